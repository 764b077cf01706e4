"""Incremental classifier training with replay of compressed exemplars."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .buffer import ExemplarRecord, ExemplarStore, MemoryBudget, admit, herding_select, materialize, rebalance
from .cam import (
    CAM_THRESHOLD,
    ActivationMap,
    CompressionMode,
    cam_from_features,
    mask_from_cam,
    mask_to_bbox,
)
from .codec.bitstream import encode
from .codec.train import finetune_encoder, freeze_decoder_side, train_initial
from .datamodel import LabeledImage, ProtocolConfig, TaskSequence, raw_image_bits
from .errors import ContractViolation, EmptyDomainError, EmptyForeground, PhaseError

logger = logging.getLogger(__name__)

Sample = tuple[np.ndarray, int]  # (HxWx3 uint8, class id)


# -- model ------------------------------------------------------------------


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class ClassifierModel(nn.Module):
    """Small residual CNN: conv stem, three stages, global average pool, linear head.

    ``classes`` lists the dataset class id behind each head output.
    """

    def __init__(self, classes: Sequence[int] = (), width: int = 16, blocks: int = 1):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        stages = []
        cin = width
        for i, cout in enumerate((width, 2 * width, 4 * width)):
            for b in range(blocks):
                stages.append(BasicBlock(cin, cout, 2 if (i > 0 and b == 0) else 1))
                cin = cout
        self.body = nn.Sequential(*stages)
        self.feature_dim = cin
        self.classes: list[int] = list(classes)
        self.head = nn.Linear(cin, len(self.classes))

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(self.stem(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def expand_head(self, new_classes: Sequence[int]) -> None:
        clash = set(new_classes) & set(self.classes)
        if clash:
            raise ContractViolation(f"classes {sorted(clash)} already in the head")
        old = self.head
        self.head = nn.Linear(self.feature_dim, len(self.classes) + len(new_classes))
        with torch.no_grad():
            self.head.weight[: old.out_features] = old.weight
            self.head.bias[: old.out_features] = old.bias
        self.classes.extend(new_classes)

    def index_of(self, labels: Sequence[int]) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return torch.tensor([lookup[int(l)] for l in labels], dtype=torch.long)


# -- configs and results ----------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    initial_epochs: int = 30
    incremental_epochs: int = 20
    base_lr: float = 0.1
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (12, 17)
    lr_decay_factor: float = 0.1
    batch_size: int = 64
    distill_weight: float | None = None  # None: old classes / total classes
    temperature: float = 2.0
    weight_decay: float = 5e-4
    augment: bool = True
    width: int = 16
    seed: int = 1993

    def __post_init__(self):
        if self.initial_epochs < 1 or self.incremental_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.distill_weight is not None and self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(initial_epochs=200, incremental_epochs=170, base_lr=0.1, momentum=0.9,
                    lr_decay_epochs=(80, 120), lr_decay_factor=0.1, batch_size=64, seed=1993)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class CodecConfig:
    lmbda: float = 16384.0
    initial_epochs: int = 50
    finetune_epochs: int = 10
    lr: float = 1e-3
    finetune_lr: float = 2e-5
    batch_size: int = 8
    N: int = 64
    M: int = 128
    Nh: int = 96
    seed: int = 0

    @property
    def arch(self) -> dict:
        return {"N": self.N, "M": self.M, "Nh": self.Nh}


@dataclass(frozen=True)
class PhaseResult:
    phase: int
    classes_seen: int
    top1: float
    exemplar_count: int
    mean_record_bpp: float
    buffer_bits: int = 0
    budget_bits: int = 0
    seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ValueError("top1 must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


# -- training primitives ----------------------------------------------------


def _to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())


def _augment(x: torch.Tensor, gen: torch.Generator, pad: int = 4) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    rows = (dy[:, None] + torch.arange(h)[None, :])[:, None, :, None].expand(n, x.shape[1], h, w + 2 * pad)
    out = torch.gather(padded, 2, rows)
    cols = (dx[:, None] + torch.arange(w)[None, :])[:, None, None, :].expand(n, x.shape[1], h, w)
    out = torch.gather(out, 3, cols)
    flip = torch.rand(n, generator=gen) < 0.5
    out[flip] = out[flip].flip(-1)
    return out


def _as_samples(data) -> list[Sample]:
    out = []
    for item in data:
        if isinstance(item, LabeledImage):
            out.append((item.pixels, item.label))
        else:
            out.append((np.asarray(item[0]), int(item[1])))
    return out


def train_phase(
    model: ClassifierModel,
    new_data,
    replay,
    config: TrainConfig,
    *,
    old_model: ClassifierModel | None = None,
    epochs: int | None = None,
    seed: int | None = None,
    history: list | None = None,
) -> ClassifierModel:
    """Train on new-task samples plus replayed exemplars (in place; returns ``model``).

    Cross-entropy over all head outputs, plus temperature-scaled distillation
    against ``old_model`` on the old outputs when the distillation weight is
    positive. SGD with momentum and a step learning-rate schedule.
    """
    new = _as_samples(new_data)
    old = _as_samples(replay)
    if not new and not old:
        raise EmptyDomainError("nothing to train on")
    new_classes = {l for _, l in new}
    stale = new_classes & {l for _, l in old}
    if stale:
        raise ContractViolation(f"replay contains current-phase classes {sorted(stale)}")
    missing = (new_classes | {l for _, l in old}) - set(model.classes)
    if missing:
        raise ContractViolation(f"head lacks outputs for classes {sorted(missing)}")

    samples = new + old
    x_all = _to_tensor([s[0] for s in samples])
    y_all = model.index_of([s[1] for s in samples])
    n_old = old_model.head.out_features if old_model is not None else 0
    if config.distill_weight is not None:
        kd_weight = config.distill_weight
    else:
        kd_weight = n_old / len(model.classes)
    if old_model is not None:
        old_model.eval()

    epochs = epochs if epochs is not None else config.initial_epochs
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(config.lr_decay_epochs), config.lr_decay_factor)
    T = config.temperature
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(samples), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = x_all[idx].float() / 255.0
            if config.augment:
                x = _augment(x, gen)
            y = y_all[idx]
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if old_model is not None and kd_weight > 0 and n_old > 0:
                with torch.no_grad():
                    target = F.softmax(old_model(x) / T, dim=1)
                kd = F.kl_div(F.log_softmax(logits[:, :n_old] / T, dim=1), target, reduction="batchmean")
                loss = loss + kd_weight * kd * T * T
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        if history is not None:
            history.append(total / count)
        logger.debug("epoch %d/%d loss %.4f", epoch + 1, epochs, total / count)
    model.eval()
    return model


@torch.no_grad()
def predict(model: ClassifierModel, images: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Predicted class ids (argmax over every head output)."""
    model.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        x = _to_tensor(images[start : start + batch_size]).float() / 255.0
        preds.append(model(x).argmax(dim=1))
    idx = torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)
    return np.asarray(model.classes)[idx] if len(idx) else idx


def evaluate(model: ClassifierModel, test_pool, seen_classes: Sequence[int]) -> float:
    """Top-1 accuracy over test samples of ``seen_classes`` with no task identity."""
    seen = set(seen_classes)
    if set(model.classes) != seen:
        raise ContractViolation("head outputs must cover exactly the seen classes")
    pool = [s for s in _as_samples(test_pool) if s[1] in seen]
    if not pool:
        raise EmptyDomainError("no test samples for the seen classes")
    preds = predict(model, [s[0] for s in pool])
    labels = np.array([s[1] for s in pool])
    return float(np.mean(preds == labels))


@torch.no_grad()
def herding_features(model: ClassifierModel, images: Sequence[np.ndarray], batch_size: int = 256):
    """L2-normalized pooled features and the last conv feature maps."""
    model.eval()
    feats, maps = [], []
    for start in range(0, len(images), batch_size):
        x = _to_tensor(images[start : start + batch_size]).float() / 255.0
        fm = model.feature_maps(x)
        maps.append(fm)
        feats.append(F.normalize(fm.mean(dim=(2, 3)), dim=1))
    return torch.cat(feats).numpy().astype(np.float64), torch.cat(maps)


def summarize(results: Sequence[PhaseResult] | Sequence[float]) -> tuple[float, float]:
    """(Avg over phases, Last phase) of top-1 accuracy."""
    if not results:
        raise EmptyDomainError("no phase results to summarize")
    accs = [r.top1 if isinstance(r, PhaseResult) else float(r) for r in results]
    return sum(accs) / len(accs), accs[-1]


# -- the incremental loop ---------------------------------------------------


def make_record(
    mode: CompressionMode,
    pixels: np.ndarray,
    label: int,
    *,
    codec=None,
    cam_values: np.ndarray | None = None,
    source_id: str = "",
    phase: int = 0,
    threshold: float = CAM_THRESHOLD,
) -> ExemplarRecord:
    """Package one selected exemplar according to ``mode``."""
    h, w = pixels.shape[:2]
    if mode is CompressionMode.RAW:
        return ExemplarRecord.raw(pixels, label, source_id, phase)
    bbox = None
    if mode.uses_cam:
        mask = mask_from_cam(ActivationMap(cam_values, label), threshold, (h, w))
        try:
            bbox = mask_to_bbox(mask)
        except EmptyForeground:
            bbox = None
    background = encode(codec, pixels) if mode.uses_codec else None
    fg = np.zeros((0, 0, 3), np.uint8)
    if bbox is not None:
        fg = pixels[bbox.y_min : bbox.y_max + 1, bbox.x_min : bbox.x_max + 1]
    return ExemplarRecord(label, mode, h, w, bbox, background, fg, source_id, phase)


class IncrementalRunner:
    """Runs the phase loop and keeps the state a caller may want to inspect.

    Per phase: adapt the codec on the phase's originals, train the
    classifier on new data plus decoded exemplars, select exemplars by
    herding with the just-trained classifier, package and admit them under
    the bit budget, then evaluate on every class seen so far.
    """

    def __init__(
        self,
        sequence: TaskSequence,
        protocol: ProtocolConfig,
        train_config: TrainConfig,
        mode: CompressionMode | str,
        codec_config: CodecConfig | None = None,
        *,
        codec_cache: dict | None = None,
        cam_threshold: float = CAM_THRESHOLD,
        on_phase: Callable[[PhaseResult], None] | None = None,
    ):
        self.sequence = sequence
        self.protocol = protocol
        self.config = train_config
        self.mode = CompressionMode(mode)
        self.codec_config = codec_config or CodecConfig()
        self.codec_cache = codec_cache if codec_cache is not None else {}
        self.cam_threshold = cam_threshold
        self.on_phase = on_phase
        self.model: ClassifierModel | None = None
        self.codec = None
        h, w = protocol.raw_reference_dims
        self.raw_reference_bits = raw_image_bits(h, w)
        self.store = ExemplarStore(self.budget_for(0))
        self.results: list[PhaseResult] = []
        self.train_history: list[list[float]] = []
        self._decoded: dict = {}

    def budget_for(self, classes_seen: int) -> MemoryBudget:
        p = self.protocol
        if p.budget_mode == "fixed_total":
            return MemoryBudget.fixed(p.budget_images, self.raw_reference_bits)
        return MemoryBudget.growing(p.budget_images, classes_seen, self.raw_reference_bits)

    def _update_codec(self, phase: int, samples: Sequence[LabeledImage]) -> None:
        cc = self.codec_config
        key = (phase, cc, tuple(s.id for s in samples), self.codec_cache_tag())
        if key in self.codec_cache:
            self.codec = self.codec_cache[key]
            return
        if phase == 0 or self.codec is None:
            model = train_initial(samples, cc.lmbda, cc.initial_epochs, lr=cc.lr,
                                  batch_size=cc.batch_size, seed=cc.seed, arch=cc.arch)
            self.codec = freeze_decoder_side(model)
        else:
            self.codec = finetune_encoder(self.codec, samples, cc.finetune_epochs, lr=cc.finetune_lr,
                                          batch_size=cc.batch_size, seed=cc.seed + phase)
        self.codec_cache[key] = self.codec

    def codec_cache_tag(self):
        # phases chain: a phase's codec depends on every earlier phase's data
        return tuple(t.classes for t in self.sequence.tasks)

    def _candidates(self, phase: int, cls: int, samples: list[LabeledImage]) -> Iterator[ExemplarRecord]:
        images = [s.pixels for s in samples]
        feats, maps = herding_features(self.model, images)
        order = herding_select(feats, len(samples))
        weights = self.model.head.weight.detach()
        head_index = self.model.classes.index(cls)
        for i in order:
            cam_values = None
            if self.mode.uses_cam:
                cam_values = cam_from_features(maps[i], weights, head_index).values
            yield make_record(self.mode, images[i], cls, codec=self.codec, cam_values=cam_values,
                              source_id=samples[i].id, phase=phase, threshold=self.cam_threshold)

    def run_phase(self, phase: int) -> PhaseResult:
        t0 = time.perf_counter()
        task = self.sequence.tasks[phase]
        cfg = self.config
        if self.mode.uses_codec:
            self._update_codec(phase, task.samples)

        old_model = None
        if phase == 0:
            torch.manual_seed(cfg.seed)
            self.model = ClassifierModel(task.classes, width=cfg.width)
            epochs = cfg.initial_epochs
        else:
            old_model = copy.deepcopy(self.model)
            for p in old_model.parameters():
                p.requires_grad_(False)
            self.model.expand_head(task.classes)
            epochs = cfg.incremental_epochs
        replay = materialize(self.store, self.codec, self._decoded)
        hist: list[float] = []
        train_phase(self.model, task.samples, replay, cfg, old_model=old_model, epochs=epochs,
                    seed=cfg.seed + phase, history=hist)
        self.train_history.append(hist)

        seen = self.sequence.classes_through(phase)
        budget = self.budget_for(len(seen))
        store = self.store
        if self.protocol.budget_mode == "fixed_total" and store.classes():
            store = rebalance(store, budget.scaled(len(store.classes()) / len(seen)))
        by_class: dict[int, list[LabeledImage]] = {}
        for s in task.samples:
            by_class.setdefault(s.label, []).append(s)
        candidates = {c: self._candidates(phase, c, by_class.get(c, [])) for c in task.classes}
        self.store = admit(store, candidates, budget)
        assert self.store.used_bits <= budget.total_bits

        top1 = evaluate(self.model, self.sequence.test_pool, seen)
        result = PhaseResult(phase, len(seen), top1, len(self.store), self.store.mean_bpp(),
                             self.store.used_bits, budget.total_bits, time.perf_counter() - t0)
        logger.info("phase %d: %d classes, top1 %.4f, %d exemplars, %.3f bpp", phase, len(seen), top1,
                    len(self.store), result.mean_record_bpp)
        return result

    def run(self) -> list[PhaseResult]:
        for phase in range(len(self.sequence)):
            try:
                result = self.run_phase(phase)
            except PhaseError:
                raise
            except Exception as exc:
                raise PhaseError(phase, exc) from exc
            self.results.append(result)
            if self.on_phase:
                self.on_phase(result)
        return self.results


def run_incremental(
    sequence: TaskSequence,
    protocol: ProtocolConfig,
    train_config: TrainConfig,
    compression_mode: CompressionMode | str,
    codec_config: CodecConfig | None = None,
    **kwargs,
) -> list[PhaseResult]:
    return IncrementalRunner(sequence, protocol, train_config, compression_mode, codec_config, **kwargs).run()
