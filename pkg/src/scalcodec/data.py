"""Synthetic training images and the dense palette-labeling task the base
layer is trained on.

Images are float32 RGB in [0, 1], sides multiples of 16. Four texture
families round-robin: smooth two-color gradients, band-limited noise, filled
convex polygons, and checkerboards. The task labels every pixel with a
palette class derived from its luma level and hue sector, so the class map
follows image structure without any manual annotation.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

FAMILIES = ("gradient", "noise", "polygon", "checker")


def palette_targets(images, palette_size):
    """Per-pixel class in [0, palette_size): one luma bit times
    palette_size/2 hue sectors. Accepts (n, 3, h, w) or (3, h, w)."""
    if palette_size < 2 or palette_size % 2:
        raise ContractError("palette_size must be even and >= 2")
    arr = np.asarray(images, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.shape[1] != 3:
        raise ContractError("palette task needs RGB images")
    r, g, b = arr[:, 0].astype(np.float64), arr[:, 1].astype(np.float64), \
        arr[:, 2].astype(np.float64)
    luma = 0.299 * r + 0.587 * g + 0.114 * b
    hue = np.arctan2(math.sqrt(3.0) * (g - b), 2.0 * r - g - b)
    hue = np.mod(hue, 2.0 * math.pi)
    sectors = palette_size // 2
    sector = np.minimum((hue / (2.0 * math.pi) * sectors).astype(np.int64),
                        sectors - 1)
    labels = (luma >= 0.5).astype(np.int64) * sectors + sector
    return labels[0] if squeeze else labels


def _gradient(rng, size):
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    ramp = (math.cos(theta) * xx + math.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-6)
    c0 = rng.uniform(0, 1, size=3).astype(np.float32)
    c1 = rng.uniform(0, 1, size=3).astype(np.float32)
    return c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp


def _noise(rng, size):
    coarse = max(size // 8, 2)
    grid = rng.uniform(0, 1, size=(3, coarse, coarse)).astype(np.float32)
    img = np.repeat(np.repeat(grid, size // coarse, axis=1), size // coarse, axis=2)
    # two passes of a 3x3 box blur keep it band-limited
    for _ in range(2):
        padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
        acc = np.zeros_like(img)
        for dy in range(3):
            for dx in range(3):
                acc += padded[:, dy : dy + size, dx : dx + size]
        img = acc / 9.0
    return img


def _polygon(rng, size):
    background = rng.uniform(0, 1, size=3).astype(np.float32)
    foreground = rng.uniform(0, 1, size=3).astype(np.float32)
    img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
    sides = int(rng.integers(3, 6))
    cx, cy = rng.uniform(0.25, 0.75, size=2) * size
    radius = rng.uniform(0.15, 0.4) * size
    start = rng.uniform(0, 2 * math.pi)
    angles = start + np.arange(sides) * (2 * math.pi / sides)
    px = cx + radius * np.cos(angles)
    py = cy + radius * np.sin(angles)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = np.ones((size, size), dtype=bool)
    for i in range(sides):
        x0, y0 = px[i], py[i]
        x1, y1 = px[(i + 1) % sides], py[(i + 1) % sides]
        # convex vertices in angular order: interior is left of every edge
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    img[:, inside] = foreground[:, None]
    return img


def _checker(rng, size):
    cell = int(rng.integers(2, max(size // 4, 3)))
    phase_y, phase_x = rng.integers(0, cell, size=2)
    c0 = rng.uniform(0, 1, size=3).astype(np.float32)
    c1 = rng.uniform(0, 1, size=3).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    parity = (((yy + phase_y) // cell) + ((xx + phase_x) // cell)) % 2
    img = np.where(parity[None] == 0, c0[:, None, None], c1[:, None, None])
    return img.astype(np.float32)


_MAKERS = {"gradient": _gradient, "noise": _noise, "polygon": _polygon,
           "checker": _checker}


def make_images(count, size, seed, families=FAMILIES):
    """Deterministic synthetic image stack (count, 3, size, size) in [0, 1]."""
    if count < 1:
        raise ContractError("count must be >= 1")
    if size < 16 or size % 16:
        raise ContractError("size must be a positive multiple of 16")
    unknown = [f for f in families if f not in _MAKERS]
    if unknown:
        raise ContractError(f"unknown texture families: {unknown}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        maker = _MAKERS[families[i % len(families)]]
        images[i] = np.clip(maker(rng, size), 0.0, 1.0)
    return images
