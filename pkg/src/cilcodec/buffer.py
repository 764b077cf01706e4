"""Exemplar selection, compressed exemplar records and the bit-budgeted store."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .cam import BoundingBox, CompressionMode, ablation_background, paste_foreground
from .codec.bitstream import Bitstream, decode
from .datamodel import raw_image_bits
from .errors import EmptyDomainError, IncompatibleModel

logger = logging.getLogger(__name__)

BBOX_BITS = 4 * 16
META_BITS = 32  # label + flags
NO_BOX = 0xFFFF
_RECORD_HEAD = struct.Struct("<4HBHH")


@dataclass(frozen=True, eq=False)
class ExemplarRecord:
    label: int
    mode: CompressionMode
    height: int
    width: int
    bbox: BoundingBox | None  # None flags an empty foreground
    background: Bitstream | None
    foreground: np.ndarray  # (bbox.height, bbox.width, 3) uint8, empty when bbox is None
    source_id: str = ""
    phase_created: int = 0

    def __post_init__(self):
        fg = np.ascontiguousarray(self.foreground, dtype=np.uint8)
        if self.bbox is None:
            if fg.size:
                raise ValueError("record without a bounding box cannot carry a foreground")
            fg = fg.reshape(0, 0, 3)
        else:
            self.bbox.validate(self.height, self.width)
            if fg.shape != (self.bbox.height, self.bbox.width, 3):
                raise ValueError(f"foreground {fg.shape} does not match {self.bbox}")
        if self.background is not None and (self.background.orig_h, self.background.orig_w) != (self.height, self.width):
            raise ValueError("background bitstream dims differ from record dims")
        fg.setflags(write=False)
        object.__setattr__(self, "foreground", fg)

    @classmethod
    def raw(cls, pixels: np.ndarray, label: int, source_id: str = "", phase: int = 0) -> "ExemplarRecord":
        h, w = pixels.shape[:2]
        return cls(label, CompressionMode.RAW, h, w, BoundingBox.full(h, w), None, pixels, source_id, phase)

    # -- record file ------------------------------------------------------

    def to_bytes(self) -> bytes:
        box = self.bbox.as_tuple() if self.bbox is not None else (NO_BOX,) * 4
        head = _RECORD_HEAD.pack(*box, self.mode.code, self.height, self.width)
        bg = self.background.to_bytes() if self.background is not None else b""
        return head + self.foreground.tobytes() + bg

    @classmethod
    def from_bytes(cls, data: bytes, label: int, source_id: str = "", phase: int = 0) -> "ExemplarRecord":
        x0, y0, x1, y1, code, h, w = _RECORD_HEAD.unpack_from(data, 0)
        pos = _RECORD_HEAD.size
        if x0 == NO_BOX:
            bbox, fg = None, np.zeros((0, 0, 3), np.uint8)
        else:
            bbox = BoundingBox(x0, y0, x1, y1)
            n = bbox.height * bbox.width * 3
            fg = np.frombuffer(data, np.uint8, n, pos).reshape(bbox.height, bbox.width, 3)
            pos += n
        bg = Bitstream.from_bytes(data[pos:]) if pos < len(data) else None
        return cls(label, CompressionMode.from_code(code), h, w, bbox, bg, fg, source_id, phase)


def exemplar_cost_bits(record: ExemplarRecord) -> int:
    """Stored bits: background stream + raw foreground crop + box + label/flags.

    A raw-mode record is exactly an uncompressed image, costed at 24 bpp.
    """
    if record.mode is CompressionMode.RAW:
        return raw_image_bits(record.height, record.width)
    bg = record.background.total_bits if record.background is not None else 0
    fg_h, fg_w = record.foreground.shape[:2]
    return bg + fg_h * fg_w * 24 + BBOX_BITS + META_BITS


@dataclass(frozen=True)
class MemoryBudget:
    total_bits: int
    mode: Literal["fixed_total", "per_class_growing"] = "fixed_total"
    per_class_images: int = 0
    raw_reference_bits: int = 0

    @classmethod
    def fixed(cls, budget_images: int, raw_reference_bits: int) -> "MemoryBudget":
        return cls(budget_images * raw_reference_bits, "fixed_total", 0, raw_reference_bits)

    @classmethod
    def growing(cls, per_class_images: int, classes_seen: int, raw_reference_bits: int) -> "MemoryBudget":
        return cls(per_class_images * classes_seen * raw_reference_bits, "per_class_growing",
                   per_class_images, raw_reference_bits)

    def scaled(self, fraction: float) -> "MemoryBudget":
        return replace(self, total_bits=int(self.total_bits * fraction))


@dataclass(frozen=True)
class ExemplarStore:
    """Records grouped by class, each list in herding-rank order."""

    budget: MemoryBudget
    records: Mapping[int, tuple[ExemplarRecord, ...]] = field(default_factory=dict)

    @property
    def used_bits(self) -> int:
        return sum(exemplar_cost_bits(r) for rs in self.records.values() for r in rs)

    def __len__(self) -> int:
        return sum(len(rs) for rs in self.records.values())

    def counts(self) -> dict[int, int]:
        return {c: len(rs) for c, rs in sorted(self.records.items())}

    def all_records(self) -> list[ExemplarRecord]:
        return [r for c in sorted(self.records) for r in self.records[c]]

    def classes(self) -> list[int]:
        return sorted(c for c, rs in self.records.items() if rs)

    def mean_bpp(self) -> float:
        recs = self.all_records()
        if not recs:
            return 0.0
        return float(np.mean([exemplar_cost_bits(r) / (r.height * r.width) for r in recs]))


def herding_select(features: Sequence[Sequence[float]] | np.ndarray, m: int) -> list[int]:
    """Greedy herding order: each step adds the sample whose inclusion brings
    the running mean closest to the class mean. Ties go to the lowest index."""
    phi = np.asarray(features, dtype=np.float64)
    if phi.ndim != 2 or len(phi) == 0:
        raise EmptyDomainError("herding needs a non-empty 2-D feature array")
    n = len(phi)
    if not 0 <= m <= n:
        raise ValueError(f"cannot select {m} of {n} samples")
    mu = phi.mean(axis=0)
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    order = []
    for k in range(1, m + 1):
        dist = np.linalg.norm(mu[None, :] - (running[None, :] + phi) / k, axis=1)
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        order.append(i)
        taken[i] = True
        running = running + phi[i]
    return order


def admit(
    store: ExemplarStore,
    candidates: Mapping[int, Iterable[ExemplarRecord]],
    budget: MemoryBudget | None = None,
) -> ExemplarStore:
    """Round-robin admission in class-id order, one herding rank per round.

    A class whose next candidate no longer fits is closed: lower-ranked
    candidates of that class are never tried in its place. Candidate
    iterables are consumed lazily, so expensive records may be built on demand.
    Existing contents over ``budget`` are first trimmed as by ``rebalance``.
    """
    budget = budget or store.budget
    if store.used_bits > budget.total_bits:
        store = rebalance(store, budget)
    records = {c: list(rs) for c, rs in store.records.items()}
    used = store.used_bits
    iters = {c: iter(candidates[c]) for c in sorted(candidates)}
    active = list(iters)
    while active:
        still = []
        for c in active:
            rec = next(iters[c], None)
            if rec is None:
                continue
            if rec.label != c:
                raise ValueError(f"candidate labelled {rec.label} offered for class {c}")
            cost = exemplar_cost_bits(rec)
            if used + cost > budget.total_bits:
                continue
            records.setdefault(c, []).append(rec)
            used += cost
            still.append(c)
        active = still
    return ExemplarStore(budget, {c: tuple(rs) for c, rs in sorted(records.items()) if rs})


def rebalance(store: ExemplarStore, new_budget: MemoryBudget) -> ExemplarStore:
    """Re-admit the store's own records, best ranks first, under ``new_budget``."""
    return admit(ExemplarStore(new_budget), store.records, new_budget)


def materialize_record(record: ExemplarRecord, codec=None) -> np.ndarray:
    mode = record.mode
    if mode is CompressionMode.RAW:
        return np.array(record.foreground)
    if mode.uses_codec:
        if codec is None:
            raise IncompatibleModel(f"record {record.source_id!r} needs a codec to decode")
        if record.background.digest != codec.digest():
            raise IncompatibleModel(
                f"record {record.source_id!r} (class {record.label}, phase {record.phase_created}) "
                f"was encoded for decoder {record.background.digest:016x}, codec is {codec.digest():016x}"
            )
        background = decode(codec, record.background)
    else:
        background = ablation_background(mode, record.height, record.width)
    if record.bbox is None or mode is CompressionMode.FULL_COMPRESSION:
        return background
    return paste_foreground(background, record.foreground, record.bbox)


def materialize(store: ExemplarStore, codec=None, cache: dict | None = None) -> list[tuple[np.ndarray, int]]:
    """Decode every record into an (HxWx3 uint8 image, label) pair.

    ``cache`` maps id(record) to a decoded image; decoding is deterministic
    under a frozen decoder so cached entries stay valid across phases.
    """
    out = []
    for rec in store.all_records():
        key = id(rec)
        if cache is not None and key in cache and cache[key][0] is rec:
            img = cache[key][1]
        else:
            img = materialize_record(rec, codec)
            if cache is not None:
                cache[key] = (rec, img)
        out.append((img, rec.label))
    return out


# -- persistence ------------------------------------------------------------


def save_store(store: ExemplarStore, directory: str | Path) -> Path:
    """Write ``manifest`` + one binary file per record + ``budget.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for c in sorted(store.records):
        for rank, rec in enumerate(store.records[c]):
            name = f"c{c:04d}_r{rank:05d}.rec"
            (directory / name).write_bytes(rec.to_bytes())
            lines.append(f"{name} {c} {rec.phase_created} {exemplar_cost_bits(rec)} {rec.mode.value} {rec.source_id}")
    (directory / "manifest").write_text("\n".join(lines) + ("\n" if lines else ""))
    b = store.budget
    (directory / "budget.json").write_text(json.dumps({
        "total_bits": b.total_bits, "mode": b.mode,
        "per_class_images": b.per_class_images, "raw_reference_bits": b.raw_reference_bits,
    }))
    return directory


def load_store(directory: str | Path) -> ExemplarStore:
    directory = Path(directory)
    budget = MemoryBudget(**json.loads((directory / "budget.json").read_text()))
    records: dict[int, list[ExemplarRecord]] = {}
    for line in (directory / "manifest").read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split(maxsplit=5)
        name, c, phase = parts[0], int(parts[1]), int(parts[2])
        source = parts[5] if len(parts) > 5 else ""
        rec = ExemplarRecord.from_bytes((directory / name).read_bytes(), c, source, phase)
        if exemplar_cost_bits(rec) != int(parts[3]):
            raise ValueError(f"{name}: manifest cost {parts[3]} disagrees with record contents")
        records.setdefault(c, []).append(rec)
    return ExemplarStore(budget, {c: tuple(rs) for c, rs in sorted(records.items())})


def read_manifest(directory: str | Path) -> list[dict]:
    rows = []
    for line in (Path(directory) / "manifest").read_text().splitlines():
        if line.strip():
            p = line.split(maxsplit=5)
            rows.append({"file": p[0], "class": int(p[1]), "phase": int(p[2]), "cost_bits": int(p[3]),
                         "mode": p[4], "source_id": p[5] if len(p) > 5 else ""})
    return rows
