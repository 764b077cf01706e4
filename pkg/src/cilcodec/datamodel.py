"""Images, class orderings and incremental task sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigError, EmptyDomainError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True, eq=False)
class LabeledImage:
    """An 8-bit RGB raster with its class label.

    ``pixels`` has shape (H, W, 3) and dtype uint8.
    """

    pixels: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError(f"image {self.id}: intensities outside [0, 255]")
            px = px.astype(np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image {self.id}: expected HxWx3 raster, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"image {self.id}: {px.shape[:2]} is smaller than 8x8")
        if self.label < 0:
            raise ValueError(f"image {self.id}: negative label {self.label}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ClassOrder:
    permutation: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError("class order is not a permutation of 0..n-1")


@dataclass(frozen=True)
class ProtocolConfig:
    kind: Literal["LFS", "LFH"]
    base_classes: int
    step_classes: int
    budget_mode: Literal["fixed_total", "per_class_growing"]
    budget_images: int
    raw_reference_dims: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.kind not in ("LFS", "LFH"):
            raise ConfigError(f"protocol kind must be LFS or LFH, got {self.kind!r}")
        if self.budget_mode not in ("fixed_total", "per_class_growing"):
            raise ConfigError(f"unknown budget mode {self.budget_mode!r}")
        if self.base_classes < 1 or self.step_classes < 1:
            raise ConfigError("base_classes and step_classes must be >= 1")
        if self.budget_images < 0:
            raise ConfigError("budget_images must be >= 0")

    def num_tasks(self, num_classes: int) -> int:
        """Number of tasks this protocol yields on ``num_classes`` classes.

        Raises ConfigError unless base + k * step == num_classes for some k >= 0.
        """
        rest = num_classes - self.base_classes
        if rest < 0 or rest % self.step_classes:
            raise ConfigError(
                f"(base {self.base_classes}, step {self.step_classes}) does not "
                f"partition {num_classes} classes exactly"
            )
        return 1 + rest // self.step_classes


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple[int, ...]
    samples: tuple[LabeledImage, ...]


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[Task, ...]
    test_pool: tuple[LabeledImage, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.tasks)

    def classes_through(self, phase: int) -> list[int]:
        return [c for t in self.tasks[: phase + 1] for c in t.classes]


def splitmix64(seed: int):
    """Infinite generator of splitmix64 outputs for ``seed``."""
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


def shuffle_classes(num_classes: int, seed: int) -> ClassOrder:
    """Fisher-Yates over ``range(num_classes)`` driven by splitmix64(seed).

    For i = n-1 down to 1, swap position i with j = next() mod (i + 1).
    """
    if num_classes < 1:
        raise EmptyDomainError("cannot shuffle an empty class set")
    perm = list(range(num_classes))
    rng = splitmix64(seed)
    for i in range(num_classes - 1, 0, -1):
        j = next(rng) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return ClassOrder(tuple(perm), seed)


def build_task_sequence(
    dataset: Iterable[LabeledImage],
    order: ClassOrder,
    config: ProtocolConfig,
    test_pool: Iterable[LabeledImage] = (),
) -> TaskSequence:
    dataset = list(dataset)
    n_classes = len(order.permutation)
    labels = {img.label for img in dataset}
    if not labels <= set(order.permutation):
        raise ConfigError(f"dataset labels {sorted(labels - set(order.permutation))} not in class order")
    n_tasks = config.num_tasks(n_classes)

    by_class: dict[int, list[LabeledImage]] = {c: [] for c in order.permutation}
    for img in dataset:
        by_class[img.label].append(img)

    tasks = []
    start = 0
    for t in range(n_tasks):
        size = config.base_classes if t == 0 else config.step_classes
        classes = order.permutation[start : start + size]
        start += size
        samples = tuple(img for c in classes for img in by_class[c])
        tasks.append(Task(t, tuple(classes), samples))
    return TaskSequence(tuple(tasks), tuple(test_pool))


def raw_image_bits(height: int, width: int) -> int:
    """Bits needed to store an uncompressed 8-bit RGB image."""
    return height * width * 3 * 8


def load_image_dir(
    root: str | Path, manifest: str | Path | None = None
) -> tuple[list[LabeledImage], list[LabeledImage], list[str]]:
    """Ingest a class-per-subdirectory image tree.

    Class names map to ids in sorted lexicographic order. A manifest (lines of
    ``relative/path class_name split``) overrides directory inference; without
    one every image is a training sample.

    Returns (train, test, class_names).
    """
    from PIL import Image

    root = Path(root)
    entries: list[tuple[Path, str, str]] = []
    if manifest is not None:
        for lineno, line in enumerate(Path(manifest).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("train", "test"):
                raise ConfigError(f"{manifest}:{lineno}: expected 'path class train|test'")
            entries.append((root / parts[0], parts[1], parts[2]))
    else:
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for f in sorted(class_dir.iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append((f, class_dir.name, "train"))
    if not entries:
        raise EmptyDomainError(f"no images found under {root}")

    class_names = sorted({name for _, name, _ in entries})
    class_ids = {name: i for i, name in enumerate(class_names)}
    train, test = [], []
    for path, name, split in entries:
        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
        img = LabeledImage(px, class_ids[name], str(path.relative_to(root)))
        (train if split == "train" else test).append(img)
    logger.info("ingested %d train / %d test images over %d classes", len(train), len(test), len(class_names))
    return train, test, class_names


def to_unit(images: Sequence[LabeledImage] | Sequence[np.ndarray]) -> np.ndarray:
    """Stack uint8 HxWx3 rasters into a float32 NCHW array in [0, 1]."""
    arr = np.stack([im.pixels if isinstance(im, LabeledImage) else im for im in images])
    return arr.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
