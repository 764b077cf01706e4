"""Rate-distortion training: initial fit, decoder-side freeze, encoder fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..datamodel import LabeledImage
from ..errors import ContractViolation, EmptyDomainError, TrainingDivergence
from .model import FROZEN_MODULES, PAD_MULTIPLE, CodecModel

logger = logging.getLogger(__name__)

FINETUNE_LR = 2e-5


@dataclass(frozen=True)
class RDReport:
    rate: float  # mean bits per image
    bpp: float
    distortion: float  # MSE on [0, 1] pixels
    loss: float  # bpp + lambda * distortion

    def __post_init__(self):
        assert self.rate >= 0 and self.distortion >= 0


def _stack(images: Sequence[LabeledImage], rng: np.random.Generator | None = None) -> torch.Tensor:
    """Float NCHW batch; images of unequal size are cropped to the common minimum."""
    h = min(im.height for im in images)
    w = min(im.width for im in images)
    crops = []
    for im in images:
        px = im.pixels
        if px.shape[:2] != (h, w):
            top = 0 if rng is None else int(rng.integers(0, px.shape[0] - h + 1))
            left = 0 if rng is None else int(rng.integers(0, px.shape[1] - w + 1))
            px = px[top : top + h, left : left + w]
        crops.append(px)
    arr = np.stack(crops).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    x = torch.from_numpy(arr)
    ph = -h % PAD_MULTIPLE
    pw = -w % PAD_MULTIPLE
    if ph or pw:
        x = torch.from_numpy(np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"))
    return x, h * w


def rd_loss(model: CodecModel, x: torch.Tensor, pixels: int, noise: bool = True):
    out = model(x, noise=noise)
    mse = ((out.x_hat - x) ** 2).mean(dim=(1, 2, 3))
    bpp = out.rate_bits / pixels
    loss = bpp + model.lmbda * mse
    return loss.mean(), out.rate_bits, mse


def _fit(
    model: CodecModel,
    params: list[torch.nn.Parameter],
    images: Sequence[LabeledImage],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> list[float]:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    best_state = copy.deepcopy(model.state_dict())
    best_loss = math.inf
    halved = False
    history = []
    model.train()
    epoch = 0
    while epoch < epochs:
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        diverged = False
        for start in range(0, len(order), batch_size):
            batch = [images[i] for i in order[start : start + batch_size]]
            x, pixels = _stack(batch, rng)
            loss, _, _ = rd_loss(model, x, pixels)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        if diverged:
            if halved:
                model.load_state_dict(best_state)
                raise TrainingDivergence(f"non-finite R-D loss at epoch {epoch + 1} after step-size halving", best_state)
            logger.warning("non-finite loss at epoch %d; restoring best checkpoint and halving lr", epoch + 1)
            model.load_state_dict(best_state)
            lr /= 2
            opt = torch.optim.Adam(params, lr=lr)
            halved = True
            continue
        mean = total / count
        history.append(mean)
        if mean < best_loss:
            best_loss = mean
            best_state = copy.deepcopy(model.state_dict())
        logger.debug("codec epoch %d/%d loss %.4f", epoch + 1, epochs, mean)
        epoch += 1
    model.eval()
    model.invalidate_tables()
    return history


def train_initial(
    images: Sequence[LabeledImage],
    lmbda: float = 16384.0,
    epochs: int = 200,
    *,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    arch: dict | None = None,
    history: list | None = None,
) -> CodecModel:
    """Fit all codec parameters from scratch on ``images``."""
    if not images:
        raise EmptyDomainError("codec training needs at least one image")
    torch.manual_seed(seed)
    model = CodecModel(**(arch or {}), lmbda=lmbda)
    h = _fit(model, list(model.parameters()), images, epochs, lr, batch_size, seed)
    if history is not None:
        history.extend(h)
    return model


def freeze_decoder_side(model: CodecModel) -> CodecModel:
    frozen = copy.deepcopy(model)
    frozen.frozen = True
    for name in FROZEN_MODULES:
        getattr(frozen, name).requires_grad_(False)
    frozen.eval()
    return frozen


def finetune_encoder(
    model: CodecModel,
    images: Sequence[LabeledImage],
    epochs: int = 50,
    *,
    lr: float = FINETUNE_LR,
    batch_size: int = 16,
    seed: int = 0,
    history: list | None = None,
) -> CodecModel:
    """Adapt the analysis transforms to new data; decoder side stays bit-identical."""
    if not model.frozen:
        raise ContractViolation("finetune_encoder requires a model with a frozen decoder side")
    tuned = copy.deepcopy(model)
    if epochs == 0 or not images:
        return tuned
    before = tuned.frozen_bytes()
    h = _fit(tuned, tuned.encoder_parameters(), images, epochs, lr, batch_size, seed)
    if history is not None:
        history.extend(h)
    if tuned.frozen_bytes() != before:
        raise ContractViolation("frozen parameters changed during encoder fine-tuning")
    return tuned


@torch.no_grad()
def rd_report(model: CodecModel, images: Sequence[LabeledImage]) -> RDReport:
    """Deterministic R-D figures with hard rounding, one image at a time."""
    model.eval()
    rates, bpps, mses = [], [], []
    for im in images:
        x, pixels = _stack([im])
        out = model(x, noise=False)
        x_hat = out.x_hat[..., : im.height, : im.width].clamp(0, 1)
        mse = ((x_hat - x[..., : im.height, : im.width]) ** 2).mean().item()
        rate = out.rate_bits.item()
        rates.append(rate)
        bpps.append(rate / pixels)
        mses.append(mse)
    rate, bpp, mse = float(np.mean(rates)), float(np.mean(bpps)), float(np.mean(mses))
    return RDReport(rate, bpp, mse, bpp + model.lmbda * mse)
