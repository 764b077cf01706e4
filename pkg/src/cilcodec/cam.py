"""Class activation maps, foreground boxes and foreground/background compositing."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyForeground, UnsupportedArchitecture

CAM_THRESHOLD = 0.6
BLANK_GRAY = 128


class CompressionMode(str, Enum):
    RAW = "raw"
    FULL_COMPRESSION = "full_compression"
    CAM_COMPOSITE = "cam_composite"
    BLANK_BACKGROUND = "blank_background"
    BACKGROUND_REMOVAL = "background_removal"

    @property
    def code(self) -> int:
        return list(CompressionMode).index(self)

    @classmethod
    def from_code(cls, code: int) -> "CompressionMode":
        return list(cls)[code]

    @property
    def uses_codec(self) -> bool:
        return self in (CompressionMode.FULL_COMPRESSION, CompressionMode.CAM_COMPOSITE)

    @property
    def uses_cam(self) -> bool:
        return self in (
            CompressionMode.CAM_COMPOSITE,
            CompressionMode.BLANK_BACKGROUND,
            CompressionMode.BACKGROUND_REMOVAL,
        )


@dataclass(frozen=True)
class ActivationMap:
    values: np.ndarray  # (h, w) at feature-map resolution
    class_id: int


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    threshold_used: float


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x_min <= self.x_max < width and 0 <= self.y_min <= self.y_max < height):
            raise ValueError(f"{self} does not fit a {height}x{width} image")

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=np.uint8)
        m[self.y_min : self.y_max + 1, self.x_min : self.x_max + 1] = 1
        return m

    @classmethod
    def full(cls, height: int, width: int) -> "BoundingBox":
        return cls(0, 0, width - 1, height - 1)


def cam_from_features(features: np.ndarray | torch.Tensor, weights: np.ndarray | torch.Tensor, class_id: int) -> ActivationMap:
    """Weighted channel sum of (K, h, w) features with head weights (classes, K)."""
    f = torch.as_tensor(features, dtype=torch.float64)
    w = torch.as_tensor(weights, dtype=torch.float64)[class_id]
    return ActivationMap(torch.einsum("k,khw->hw", w, f).numpy(), class_id)


@torch.no_grad()
def compute_cam(classifier, image, class_id: int) -> ActivationMap:
    """CAM for ``class_id`` from the classifier's last conv features and linear head.

    The classifier must expose ``feature_maps(x)`` returning (N, K, h, w)
    maps that are globally average-pooled into a linear ``head``.
    """
    if not (hasattr(classifier, "feature_maps") and isinstance(getattr(classifier, "head", None), torch.nn.Linear)):
        raise UnsupportedArchitecture(
            f"{type(classifier).__name__} lacks a conv feature map + global pooling + linear head"
        )
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    x = torch.from_numpy(pixels.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    was_training = classifier.training
    classifier.eval()
    fmap = classifier.feature_maps(x)[0]
    classifier.train(was_training)
    return cam_from_features(fmap, classifier.head.weight, class_id)


def normalize_cam(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def upsample_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize (align_corners=False)."""
    t = torch.as_tensor(values, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)[0, 0].numpy()


def mask_from_cam(cam: ActivationMap, threshold: float = CAM_THRESHOLD, target_dims: tuple[int, int] = (32, 32)) -> BinaryMask:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    up = upsample_bilinear(normalize_cam(cam.values), *target_dims)
    return BinaryMask((up > threshold).astype(np.uint8), threshold)


def mask_to_bbox(mask: BinaryMask | np.ndarray) -> BoundingBox:
    values = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    ys, xs = np.nonzero(values)
    if len(xs) == 0:
        raise EmptyForeground("mask has no foreground pixels")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def composite(original: np.ndarray, reconstructed: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Pixels inside ``bbox`` from ``original``, everything else from ``reconstructed``."""
    original = np.asarray(original)
    reconstructed = np.asarray(reconstructed)
    if original.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {reconstructed.shape}")
    h, w = original.shape[:2]
    bbox.validate(h, w)
    m = bbox.mask(h, w)
    if original.ndim == 3:
        m = m[..., None]
    return np.where(m == 1, original, reconstructed)


def paste_foreground(background: np.ndarray, foreground: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """Composite a stored foreground crop over a full-size background."""
    out = np.array(background, copy=True)
    if foreground.shape[:2] != (bbox.height, bbox.width):
        raise ValueError("foreground crop does not match its bounding box")
    out[bbox.y_min : bbox.y_max + 1, bbox.x_min : bbox.x_max + 1] = foreground
    return out


def ablation_background(mode: CompressionMode, height: int, width: int) -> np.ndarray:
    """Constant background used by the blank / removal ablations."""
    fill = BLANK_GRAY if mode is CompressionMode.BLANK_BACKGROUND else 0
    return np.full((height, width, 3), fill, dtype=np.uint8)
