"""RGB image container and PNG I/O (8-bit sRGB-as-is, no metadata)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import Distill3DError


@dataclass
class Image:
    """Float RGB image, pixels (H, W, 3) in [0, 1], row-major from the top."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image pixels must be (H, W, 3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image pixels must be finite")
        if self.pixels.min() < -1e-9 or self.pixels.max() > 1.0 + 1e-9:
            raise ValueError("image pixels must lie in [0, 1]")
        np.clip(self.pixels, 0.0, 1.0, out=self.pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def constant(cls, height: int, width: int, rgb) -> "Image":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(rgb, dtype=np.float64)
        return cls(px)

    def mse(self, other: "Image") -> float:
        if self.pixels.shape != other.pixels.shape:
            raise ValueError("image shapes differ")
        return float(np.mean((self.pixels - other.pixels) ** 2))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images."""
    mse = a.mse(b)
    if mse <= 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def save_png(image: Image, path) -> None:
    quantized = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(quantized, mode="RGB").save(path, format="PNG")


def load_png(path) -> Image:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise Distill3DError(f"{path}: cannot decode image ({exc})") from exc
    return Image(arr)
