"""Deterministic 10-class 32x32 RGB image set in the CIFAR-10 layout.

Used as the desk-scale stand-in when the CIFAR-10 batches are not available.
Class ``c`` is a windowed sine grating with orientation ``(c % 5) * 36`` degrees
and a low (``c < 5``) or high spatial frequency, drawn in random colours over
a random background with additive pixel noise.  The noise level keeps a
small CNN well below perfect accuracy.
"""
from __future__ import annotations

import numpy as np

NUM_CLASSES = 10
FREQS = (0.09, 0.17)  # cycles per pixel


def make_images(n: int, seed: int, noise: float = 0.18, num_classes: int = NUM_CLASSES):
    """Return ``(images uint8 (n, 3, 32, 32), labels uint8 (n,))``; balanced classes."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)

    theta = (labels % 5) * (np.pi / 5) + rng.normal(0.0, 0.06, n)
    freq = np.asarray(FREQS)[labels // 5] * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    cy, cx = rng.uniform(10, 22, (2, n))
    radius = rng.uniform(7, 13, n)
    contrast = rng.uniform(0.35, 1.0, n)

    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    yy, xx = yy[None], xx[None]
    u = xx * np.cos(theta)[:, None, None] + yy * np.sin(theta)[:, None, None]
    grating = np.sin(2 * np.pi * freq[:, None, None] * u + phase[:, None, None])
    r2 = (xx - cx[:, None, None]) ** 2 + (yy - cy[:, None, None]) ** 2
    window = np.exp(-r2 / (2 * radius[:, None, None] ** 2))
    pattern = 0.5 + 0.5 * contrast[:, None, None] * grating * window

    fg = rng.uniform(0, 1, (n, 3))
    bg = rng.uniform(0, 1, (n, 3))
    img = bg[:, :, None, None] + (fg - bg)[:, :, None, None] * pattern[:, None]
    img += rng.normal(0.0, noise, img.shape)
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img, labels.astype(np.uint8)


def channel_stats(images_u8: np.ndarray) -> tuple[list[float], list[float]]:
    x = images_u8.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)).tolist(), x.std(axis=(0, 2, 3)).tolist()
