"""Image <-> latent transforms.

:class:`SpaceToDepth` is the reference codec: it folds each ``p x p`` pixel
block into channels, so it is an exact permutation of the image values.
Latents are ``(1, C, h, w)``; images are ``(H, W, 3)`` floats in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ShapeError


@dataclass(frozen=True)
class SpaceToDepth:
    factor: int = 8
    scale: float = 1.0

    @property
    def channels(self) -> int:
        return 3 * self.factor**2

    def latent_shape(self, height, width):
        p = self.factor
        if height % p or width % p:
            raise ShapeError(f"image {height}x{width} not divisible by codec factor {p}")
        return (1, self.channels, height // p, width // p)

    def encode(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
        h, w, _ = image.shape
        _, c, lh, lw = self.latent_shape(h, w)
        p = self.factor
        blocks = image.reshape(lh, p, lw, p, 3).transpose(4, 1, 3, 0, 2)
        latent = blocks.reshape(1, c, lh, lw)
        return latent * self.scale if self.scale != 1 else latent.copy()

    def decode(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim == 3:
            latent = latent[None]
        if latent.ndim != 4 or latent.shape[0] != 1 or latent.shape[1] != self.channels:
            raise ShapeError(
                f"latent {latent.shape} does not have {self.channels} channels for factor {self.factor}"
            )
        if self.scale != 1:
            latent = latent / self.scale
        _, _, lh, lw = latent.shape
        p = self.factor
        image = latent[0].reshape(3, p, p, lh, lw).transpose(3, 1, 4, 2, 0)
        return image.reshape(lh * p, lw * p, 3).copy()


def encode(image, factor=8):
    return SpaceToDepth(factor).encode(image)


def decode(latent, factor=8):
    return SpaceToDepth(factor).decode(latent)


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_png(path, size=None):
    """Load an RGB image as floats in [0, 1]; ``size`` center-crops to a
    square and resizes to ``size x size``."""
    with Image.open(os.fspath(path)) as im:
        im = im.convert("RGB")
        if size is not None:
            im = center_square(im).resize((size, size), Image.Resampling.BICUBIC)
        return np.asarray(im, dtype=np.float64) / 255.0


def center_square(im: Image.Image) -> Image.Image:
    w, h = im.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    return im.crop((left, top, left + s, top + s))


def write_png(image, path) -> None:
    Image.fromarray(to_uint8(image)).save(os.fspath(path), format="PNG")
