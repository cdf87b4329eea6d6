"""Deterministic image-prompt embeddings and the geometry prompt difference.

The embedder is a fixed linear patch-mean map: an image is split into
P x P patches and each patch contributes its per-channel mean. Linearity
makes the view-compensation arithmetic (difference of normal-map
embeddings added onto the color embedding) exactly testable. A matching
linear decoder paints an embedding back into latent space for the
image-prompt oracle denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import Image

DEFAULT_PATCHES = 8


@dataclass
class ImagePromptEmbedding:
    """Patch-mean embedding: length 3 * P^2, patches ordered x-major.

    Layout: for each patch (ix * P + iy) the triple (r, g, b); ix indexes
    image columns so a left/right image split yields contiguous halves.
    """

    vector: np.ndarray
    patches: int
    source_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (3 * self.patches**2,):
            raise ValueError(f"embedding length {self.vector.shape} != 3*P^2 for P={self.patches}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding entries must be finite")

    def view_key(self):
        return getattr(self, "_view_key", None)


@dataclass
class GeometryPromptDifference:
    """Difference of two normal-map embeddings from a (random, default) view pair."""

    vector: np.ndarray
    view_key: tuple | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("difference vector must be 1-D")


def embed_image(image: Image, patches: int = DEFAULT_PATCHES) -> ImagePromptEmbedding:
    p = int(patches)
    if p < 1:
        raise ValueError("patch count must be >= 1")
    h, w = image.height, image.width
    if h % p or w % p:
        raise ValueError(f"image {w}x{h} not divisible into {p}x{p} patches")
    ph, pw = h // p, w // p
    blocks = image.pixels.reshape(p, ph, p, pw, 3).mean(axis=(1, 3))  # (iy, ix, c)
    vector = blocks.transpose(1, 0, 2).reshape(-1)                    # x-major patches
    return ImagePromptEmbedding(vector, p, (w, h))


def geometry_prompt_difference(y_ran: ImagePromptEmbedding, y_def: ImagePromptEmbedding,
                               view_key: tuple | None = None) -> GeometryPromptDifference:
    if y_ran.vector.shape != y_def.vector.shape:
        raise ValueError("embedding lengths differ")
    return GeometryPromptDifference(y_ran.vector - y_def.vector, view_key=view_key)


def compensate(y_rgb: ImagePromptEmbedding, delta: GeometryPromptDifference
               ) -> ImagePromptEmbedding:
    """Shift the color embedding by the geometry difference (unscaled, unclamped)."""
    if y_rgb.vector.shape != delta.vector.shape:
        raise ValueError("embedding/difference lengths differ")
    return ImagePromptEmbedding(y_rgb.vector + delta.vector, y_rgb.patches, y_rgb.source_size)


def normal_from_rgb(image: Image) -> Image:
    """Heuristic normal map: luminance as a height field, central differences.

    n = normalize(-gx, -gy, 1) mapped by (n + 1) / 2. A user-supplied normal
    image should be preferred whenever fidelity matters.
    """
    lum = image.pixels @ np.array([0.299, 0.587, 0.114])
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, 1:-1] = (lum[:, 2:] - lum[:, :-2]) * 0.5
    gy[1:-1, :] = (lum[2:, :] - lum[:-2, :]) * 0.5
    n = np.stack([-gx, -gy, np.ones_like(lum)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return Image((n + 1.0) * 0.5)


@dataclass
class PatchEmbeddingDecoder:
    """Linear right inverse of :func:`embed_image` into latent space.

    Paints each patch's channel means as constant blocks at the latent
    resolution, so decode(embed(x)) equals encode(x) for patch-constant x.
    """

    patches: int
    latent_shape: tuple[int, int, int]  # (3, H, W)

    def __post_init__(self):
        c, h, w = self.latent_shape
        if c != 3:
            raise ValueError("decoder expects 3-channel latents")
        if h % self.patches or w % self.patches:
            raise ValueError(f"latent {w}x{h} not divisible into {self.patches} patches")

    def decode(self, embedding_vector: np.ndarray) -> np.ndarray:
        vec = np.asarray(embedding_vector, dtype=np.float64)
        p = self.patches
        if vec.shape != (3 * p * p,):
            raise ValueError(f"embedding length {vec.shape} incompatible with P={p}")
        _, h, w = self.latent_shape
        blocks = vec.reshape(p, p, 3).transpose(1, 0, 2)   # back to (iy, ix, c)
        img = np.repeat(np.repeat(blocks, h // p, axis=0), w // p, axis=1)
        return np.moveaxis(img, -1, 0)
