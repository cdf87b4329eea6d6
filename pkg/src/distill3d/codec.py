"""Fixed linear image <-> latent codecs standing in for a pretrained encoder.

``identity`` transposes (H, W, 3) to channels-first; ``avgpool-k`` takes
k x k block means. ``decode`` is the right inverse (nearest upsample);
``encode_adjoint`` is the exact transpose used to pull latent gradients
back to image space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .images import Image

_AVGPOOL_RE = re.compile(r"^avgpool-(\d+)$")


@dataclass
class Latent:
    """Denoiser working tensor, channels-first (C, H, W)."""

    tensor: np.ndarray
    codec: str

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3:
            raise ValueError(f"latent must be (C, H, W), got shape {self.tensor.shape}")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError("latent entries must be finite")
        _parse_codec(self.codec)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


def _parse_codec(codec: str) -> int:
    """Returns the pooling factor k (1 for identity)."""
    if codec == "identity":
        return 1
    m = _AVGPOOL_RE.match(codec)
    if m:
        k = int(m.group(1))
        if k >= 1:
            return k
    raise ValueError(f"unknown codec {codec!r}; expected 'identity' or 'avgpool-<k>'")


def encode(image: Image, codec: str = "identity") -> Latent:
    k = _parse_codec(codec)
    h, w = image.height, image.width
    if h % k or w % k:
        raise ValueError(f"image {w}x{h} not divisible by pooling factor {k}")
    px = image.pixels
    if k > 1:
        px = px.reshape(h // k, k, w // k, k, 3).mean(axis=(1, 3))
    return Latent(np.moveaxis(px, -1, 0), codec)


def decode(latent: Latent) -> Image:
    """Right inverse of encode: nearest-neighbor upsample, clipped to [0, 1]."""
    k = _parse_codec(latent.codec)
    px = np.moveaxis(latent.tensor, 0, -1)
    if k > 1:
        px = np.repeat(np.repeat(px, k, axis=0), k, axis=1)
    return Image(np.clip(px, 0.0, 1.0))


def decode_array(latent: Latent) -> np.ndarray:
    """Like :func:`decode` but returns the raw (H, W, 3) array without clipping."""
    k = _parse_codec(latent.codec)
    px = np.moveaxis(latent.tensor, 0, -1)
    if k > 1:
        px = np.repeat(np.repeat(px, k, axis=0), k, axis=1)
    return px


def encode_adjoint(latent_grad: np.ndarray, codec: str,
                   image_shape: tuple[int, int]) -> np.ndarray:
    """Transpose of the encoder: latent-space gradient -> (H, W, 3) gradient."""
    k = _parse_codec(codec)
    h, w = image_shape
    g = np.moveaxis(np.asarray(latent_grad, dtype=np.float64), 0, -1)
    if k > 1:
        g = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
    if g.shape != (h, w, 3):
        raise ValueError(f"latent gradient maps to {g.shape}, expected {(h, w, 3)}")
    return g


def latent_shape_for(codec: str, height: int, width: int) -> tuple[int, int, int]:
    k = _parse_codec(codec)
    if height % k or width % k:
        raise ValueError(f"image {width}x{height} not divisible by pooling factor {k}")
    return (3, height // k, width // k)
