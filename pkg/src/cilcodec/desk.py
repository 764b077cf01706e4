"""Synthetic desk-scale corpus: a class-specific object on a textured table.

Each class has its own object shape and colour; the table texture comes from
one of two families (wood grain or tiles) correlated with the class, so the
background carries context like the plate/table in a food photo.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .datamodel import LabeledImage

SHAPES = ("disc", "square", "triangle", "ring", "cross")


def _object_mask(shape: str, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "disc":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if shape == "triangle":
        return (v <= r * 0.7) & (v >= -r + 1.7 * np.abs(u))
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    raise ValueError(shape)


def _background(rng: np.random.Generator, family: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == 0:
        # warm wood grain
        base = np.array([150, 100, 60]) + rng.normal(0, 10, 3)
        freq = rng.uniform(0.25, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        warp = 2.0 * np.sin(xx * rng.uniform(0.05, 0.15) + rng.uniform(0, 6))
        grain = 18 * np.sin(freq * yy + warp + phase)
        img = base[None, None, :] + grain[..., None] * np.array([1.0, 0.8, 0.5])
    else:
        # cool tiles
        base = np.array([90, 130, 165]) + rng.normal(0, 10, 3)
        period = int(rng.integers(7, 11))
        off = rng.integers(0, period, 2)
        grout = ((yy + off[0]) % period < 1.5) | ((xx + off[1]) % period < 1.5)
        img = np.broadcast_to(base, (size, size, 3)).copy()
        img[grout] = base * 0.55 + 90
    tilt = rng.normal(0, 0.6, 2)
    img = img + (tilt[0] * (yy - size / 2) + tilt[1] * (xx - size / 2))[..., None]
    return img


def _class_colour(label: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    hue = (label / num_classes + rng.normal(0, 0.02)) % 1.0
    sat = np.clip(0.75 + rng.normal(0, 0.08), 0.4, 1.0)
    val = np.clip(0.85 + rng.normal(0, 0.08), 0.5, 1.0)
    return 255 * np.array(colorsys.hsv_to_rgb(hue, sat, val))


def render(label: int, rng: np.random.Generator, num_classes: int = 10, size: int = 32,
           context_prob: float = 0.8) -> np.ndarray:
    family = (label * 2 // num_classes) % 2
    if rng.random() > context_prob:
        family = 1 - family
    img = _background(rng, family, size)
    r = rng.uniform(0.17, 0.25) * size
    cy, cx = rng.uniform(r, size - r, 2)
    mask = _object_mask(SHAPES[label % len(SHAPES)], size, cy, cx, r, rng.uniform(0, np.pi / 2))
    colour = _class_colour(label, num_classes, rng)
    shade = 1.0 - 0.25 * ((np.mgrid[0:size, 0:size][0] - cy) / size)
    img[mask] = colour[None, :] * shade[mask][:, None]
    img = img + rng.normal(0, 2.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_desk_dataset(
    num_classes: int = 10,
    train_per_class: int = 500,
    test_per_class: int = 100,
    size: int = 32,
    seed: int = 0,
) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Return (train, test) lists of LabeledImage."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(num_classes):
        for i in range(train_per_class):
            train.append(LabeledImage(render(c, rng, num_classes, size), c, f"train/{c}/{i}"))
        for i in range(test_per_class):
            test.append(LabeledImage(render(c, rng, num_classes, size), c, f"test/{c}/{i}"))
    return train, test


def make_tiles(count: int, size: int = 32, seed: int = 0, num_classes: int = 10) -> list[LabeledImage]:
    """Unlabelled-style tiles cycling through the desk classes."""
    rng = np.random.default_rng(seed)
    return [LabeledImage(render(i % num_classes, rng, num_classes, size), i % num_classes, f"tile/{i}")
            for i in range(count)]
