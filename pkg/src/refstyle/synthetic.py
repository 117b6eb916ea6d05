"""Seeded synthetic content and style images for tests and demos."""

import numpy as np


def content_image(seed=0, size=64):
    """Soft-edged ellipse ("face") with two dark spots over a color gradient."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1, face = rng.uniform(0.1, 0.9, size=(3, 3))
    img = c0 * (1 - yy[..., None]) + c1 * yy[..., None]
    cx, cy = rng.uniform(0.35, 0.65, size=2)
    rx, ry = rng.uniform(0.18, 0.3, size=2)
    r = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    mask = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    img = img * (1 - mask[..., None]) + face * mask[..., None]
    for dx in (-0.35, 0.35):
        er = ((xx - cx - dx * rx) ** 2 + (yy - cy + 0.3 * ry) ** 2) / (0.06 * rx) ** 2
        img *= 1 - 0.7 * np.exp(-er)[..., None]
    return np.clip(img, 0.0, 1.0)


def style_image(seed=0, size=64):
    """Oriented stripes blended between two random palette colors, plus grain."""
    rng = np.random.default_rng(seed + 10_000)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 10)
    phase = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    a, b = rng.uniform(0.0, 1.0, size=(2, 3))
    w = (0.5 + 0.5 * phase)[..., None]
    img = a * w + b * (1 - w) + 0.08 * rng.standard_normal((size, size, 3))
    return np.clip(img, 0.0, 1.0)
