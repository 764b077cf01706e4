"""Experiment orchestration: config files, dataset setup, reports and plots."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .buffer import save_store
from .cam import CAM_THRESHOLD, CompressionMode
from .datamodel import (
    LabeledImage,
    ProtocolConfig,
    build_task_sequence,
    load_image_dir,
    shuffle_classes,
)
from .desk import make_desk_dataset
from .errors import ConfigError
from .trainer import CodecConfig, IncrementalRunner, PhaseResult, TrainConfig, summarize

logger = logging.getLogger(__name__)

DESK = "desk"

# key -> (section, field, parser)
_INT, _FLOAT, _STR = int, float, str


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in ("", "none", "auto") else float(v)


KEYS: dict[str, tuple[str, str, Any]] = {
    "dataset": ("top", "dataset", _STR),
    "manifest": ("top", "manifest", _STR),
    "image_size": ("top", "image_size", _INT),
    "desk_classes": ("top", "desk_classes", _INT),
    "desk_train_per_class": ("top", "desk_train_per_class", _INT),
    "desk_test_per_class": ("top", "desk_test_per_class", _INT),
    "desk_seed": ("top", "desk_seed", _INT),
    "class_order_seed": ("top", "class_order_seed", _INT),
    "mode": ("top", "mode", _STR),
    "out": ("top", "out", _STR),
    "seed": ("top", "seed", _INT),
    "cam_threshold": ("top", "cam_threshold", _FLOAT),
    "protocol": ("protocol", "kind", _STR),
    "base_classes": ("protocol", "base_classes", _INT),
    "step_classes": ("protocol", "step_classes", _INT),
    "budget_mode": ("protocol", "budget_mode", _STR),
    "budget_images": ("protocol", "budget_images", _INT),
    "initial_epochs": ("train", "initial_epochs", _INT),
    "incremental_epochs": ("train", "incremental_epochs", _INT),
    "base_lr": ("train", "base_lr", _FLOAT),
    "momentum": ("train", "momentum", _FLOAT),
    "lr_decay_epochs": ("train", "lr_decay_epochs", _ints),
    "lr_decay_factor": ("train", "lr_decay_factor", _FLOAT),
    "batch_size": ("train", "batch_size", _INT),
    "distill_weight": ("train", "distill_weight", _opt_float),
    "augment": ("train", "augment", _bool),
    "width": ("train", "width", _INT),
    "lambda": ("codec", "lmbda", _FLOAT),
    "codec_epochs": ("codec", "initial_epochs", _INT),
    "codec_finetune_epochs": ("codec", "finetune_epochs", _INT),
    "codec_lr": ("codec", "lr", _FLOAT),
    "codec_finetune_lr": ("codec", "finetune_lr", _FLOAT),
    "codec_batch_size": ("codec", "batch_size", _INT),
    "codec_N": ("codec", "N", _INT),
    "codec_M": ("codec", "M", _INT),
    "codec_Nh": ("codec", "Nh", _INT),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = DESK
    protocol: ProtocolConfig = ProtocolConfig("LFS", 2, 2, "fixed_total", 200)
    train: TrainConfig = TrainConfig()
    codec: CodecConfig = CodecConfig()
    mode: CompressionMode = CompressionMode.CAM_COMPOSITE
    out: str = "runs/out"
    seed: int = 1993
    manifest: str | None = None
    image_size: int = 32
    class_order_seed: int = 1993
    cam_threshold: float = CAM_THRESHOLD
    desk_classes: int = 10
    desk_train_per_class: int = 500
    desk_test_per_class: int = 100
    desk_seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.dataset != DESK and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset: directory {self.dataset!r} does not exist")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest: file {self.manifest!r} does not exist")
        if self.image_size < 8:
            raise ConfigError("image_size: must be >= 8")
        return self

    def as_flat(self) -> dict[str, Any]:
        flat = {}
        for key, (section, name, _) in KEYS.items():
            src = self if section == "top" else getattr(self, section)
            value = getattr(src, name)
            if isinstance(value, CompressionMode):
                value = value.value
            flat[key] = list(value) if isinstance(value, tuple) else value
        return flat

    def digest(self) -> str:
        blob = json.dumps(self.as_flat(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_config(values: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string (or already-typed) overrides onto ``base``."""
    base = base or ExperimentConfig()
    sections: dict[str, dict[str, Any]] = {"top": {}, "protocol": {}, "train": {}, "codec": {}}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    top = sections["top"]
    if "mode" in top:
        try:
            top["mode"] = CompressionMode(top["mode"])
        except ValueError:
            choices = ", ".join(m.value for m in CompressionMode)
            raise ConfigError(f"mode: {top['mode']!r} is not one of {choices}") from None
    try:
        protocol = dataclasses.replace(base.protocol, **sections["protocol"])
        seed = top.get("seed", base.seed)
        train = dataclasses.replace(base.train, **sections["train"], seed=seed)
        codec = dataclasses.replace(base.codec, **sections["codec"], seed=seed)
        size = top.get("image_size", base.image_size)
        protocol = dataclasses.replace(protocol, raw_reference_dims=(size, size))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return dataclasses.replace(base, protocol=protocol, train=train, codec=codec, **top).validate()


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = parse_kv(path.read_text(), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


# -- datasets ----------------------------------------------------------------


def _resize(images: list[LabeledImage], size: int) -> list[LabeledImage]:
    from PIL import Image

    out = []
    for im in images:
        if im.pixels.shape[:2] == (size, size):
            out.append(im)
            continue
        px = np.asarray(Image.fromarray(im.pixels).resize((size, size), Image.BILINEAR))
        out.append(LabeledImage(px, im.label, im.id))
    return out


def load_dataset(config: ExperimentConfig) -> tuple[list[LabeledImage], list[LabeledImage], int]:
    if config.dataset == DESK:
        train, test = make_desk_dataset(config.desk_classes, config.desk_train_per_class,
                                        config.desk_test_per_class, config.image_size, config.desk_seed)
        return train, test, config.desk_classes
    train, test, names = load_image_dir(config.dataset, config.manifest)
    if not test:
        raise ConfigError("dataset: no test split found; supply a manifest with 'test' entries")
    return _resize(train, config.image_size), _resize(test, config.image_size), len(names)


# -- reports -----------------------------------------------------------------


@dataclass
class RunReport:
    mode: str
    rows: list[PhaseResult]
    avg: float
    last: float
    config_digest: str = ""
    seconds: list[float] = field(default_factory=list)

    @classmethod
    def from_results(cls, mode: str, results: Sequence[PhaseResult], config_digest: str = "") -> "RunReport":
        avg, last = summarize(results)
        return cls(mode, list(results), avg, last, config_digest, [r.seconds for r in results])

    def table(self) -> str:
        lines = [f"mode {self.mode}  Avg {100 * self.avg:.2f}  Last {100 * self.last:.2f}",
                 "phase  classes  top1     exemplars  mean_bpp  buffer_bits  budget_bits  seconds"]
        for r, s in zip(self.rows, self.seconds):
            lines.append(f"{r.phase:5d}  {r.classes_seen:7d}  {r.top1:.4f}   {r.exemplar_count:9d}  "
                         f"{r.mean_record_bpp:8.3f}  {r.buffer_bits:11d}  {r.budget_bits:11d}  {s:7.1f}")
        return "\n".join(lines)


CSV_FIELDS = ("phase", "classes_seen", "top1", "exemplar_count", "mean_record_bpp", "buffer_bits", "budget_bits")


def write_report(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    """metrics.csv (one row per phase), summary.json, timings.csv and report.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in report.rows:
        if r.buffer_bits > r.budget_bits:
            raise AssertionError(f"phase {r.phase}: buffer {r.buffer_bits} bits exceeds budget {r.budget_bits}")
    paths = {"csv": out / "metrics.csv", "summary": out / "summary.json",
             "timings": out / "timings.csv", "report": out / "report.txt"}
    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in report.rows:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k) for k in CSV_FIELDS])
    paths["summary"].write_text(json.dumps(
        {"mode": report.mode, "avg": report.avg, "last": report.last, "config_digest": report.config_digest},
        indent=2, sort_keys=True) + "\n")
    with open(paths["timings"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "seconds"])
        for r, s in zip(report.rows, report.seconds):
            w.writerow([r.phase, f"{s:.3f}"])
    paths["report"].write_text(report.table() + "\n")
    return paths


def read_metrics_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def emit_plots(reports: RunReport | Sequence[RunReport], out_dir: str | Path) -> dict[str, Any]:
    """Accuracy-vs-phase and bpp-vs-phase curves, one line per report.

    Returns the two file paths plus the plotted series read back from the
    figure lines, keyed by mode.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(reports, RunReport):
        reports = [reports]
    if not reports or any(not r.rows for r in reports):
        raise ValueError("every report needs at least one phase")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: dict[str, dict[str, list[float]]] = {}
    paths = {}
    for metric, ylabel, fname in (("top1", "top-1 accuracy (%)", "accuracy_vs_phase.png"),
                                  ("mean_record_bpp", "mean exemplar bpp", "bpp_vs_phase.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for rep in reports:
            xs = [r.classes_seen for r in rep.rows]
            scale = 100.0 if metric == "top1" else 1.0
            ys = [scale * getattr(r, metric) for r in rep.rows]
            (line,) = ax.plot(xs, ys, marker="o", label=rep.mode)
            s = series.setdefault(rep.mode, {"classes_seen": [float(x) for x in line.get_xdata()]})
            s[metric] = [float(y) / scale for y in line.get_ydata()]
        ax.set_xlabel("number of classes")
        ax.set_ylabel(ylabel)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, dpi=100)
        paths[metric] = path
        series_legend = [t.get_text() for t in ax.get_legend().get_texts()]
        plt.close(fig)
    return {"accuracy": paths["top1"], "bpp": paths["mean_record_bpp"], "series": series, "legend": series_legend}


# -- entry point -------------------------------------------------------------


def prepare(config: ExperimentConfig):
    train, test, n_classes = load_dataset(config)
    order = shuffle_classes(n_classes, config.class_order_seed)
    sequence = build_task_sequence(train, order, config.protocol, test)
    return sequence


def run(config: ExperimentConfig, codec_cache: dict | None = None, sequence=None) -> RunReport:
    """Execute one incremental experiment and write report, metrics, store and plots."""
    config.validate()
    t0 = time.perf_counter()
    sequence = sequence or prepare(config)
    runner = IncrementalRunner(sequence, config.protocol, config.train, config.mode, config.codec,
                               codec_cache=codec_cache, cam_threshold=config.cam_threshold)
    results = runner.run()
    report = RunReport.from_results(config.mode.value, results, config.digest())
    out = Path(config.out)
    write_report(report, out)
    emit_plots(report, out)
    save_store(runner.store, out / "store")
    if runner.codec is not None:
        runner.codec.save(out / "codec.npz")
    logger.info("run finished in %.1fs: Avg %.4f Last %.4f", time.perf_counter() - t0, report.avg, report.last)
    return report
