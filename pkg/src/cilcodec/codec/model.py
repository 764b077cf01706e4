"""Mean-scale hyperprior compression model.

Analysis transform g_a (4 stride-2 stages, factor 16), hyper analysis h_a
(one more stride-2 stage), hyper synthesis h_s predicting per-element mean
and scale of the latent, synthesis transform g_s, and a non-parametric
factorized density for the hyper-latent.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SCALE_FLOOR = 0.04
LIKELIHOOD_FLOOR = 1e-9
# main transforms downsample by 16, the hyper analysis by 2 more
PAD_MULTIPLE = 32
# modules held fixed after the first phase (decoder side and prior)
FROZEN_MODULES = ("g_s", "h_s", "entropy_bottleneck")


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # let gradients through where they would push x back above the bound
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


class GDN(nn.Module):
    """Generalized divisive normalization (inverse=True gives IGDN)."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(0.1 * torch.eye(channels))

    def forward(self, x):
        c = x.shape[1]
        beta = self.beta.abs() + 1e-6
        gamma = self.gamma.abs().view(c, c, 1, 1)
        norm = torch.sqrt(F.conv2d(x * x, gamma, beta))
        return x * norm if self.inverse else x / norm


def _conv(cin, cout, k=5, stride=2):
    return nn.Conv2d(cin, cout, k, stride, k // 2)


def _deconv(cin, cout, k=5, stride=2):
    return nn.ConvTranspose2d(cin, cout, k, stride, k // 2, output_padding=stride - 1)


class FactorizedPrior(nn.Module):
    """Per-channel learned cumulative density (monotone MLP on a scalar)."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        g = torch.Generator().manual_seed(0)
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1, generator=g) - 0.5))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) -> logits of the CDF, same shape."""
        logits = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            logits = torch.matmul(F.softplus(m), logits) + b
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        b, c, h, w = z.shape
        v = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        lik = lik.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return lower_bound(lik, LIKELIHOOD_FLOOR)


def gaussian_likelihood(y: torch.Tensor, means: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Mass of the unit-width bin around ``y`` under N(means, scales)."""
    scales = lower_bound(scales, SCALE_FLOOR)
    v = torch.abs(y - means)
    upper = 0.5 * torch.erfc(-((0.5 - v) / scales) / math.sqrt(2.0))
    lower = 0.5 * torch.erfc(-((-0.5 - v) / scales) / math.sqrt(2.0))
    return lower_bound(upper - lower, LIKELIHOOD_FLOOR)


@dataclass
class ForwardResult:
    x_hat: torch.Tensor
    rate_bits: torch.Tensor  # per image
    y: torch.Tensor
    z: torch.Tensor


class CodecModel(nn.Module):
    def __init__(self, N: int = 64, M: int = 128, Nh: int = 96, lmbda: float = 16384.0):
        super().__init__()
        if not lmbda > 0:
            raise ValueError("lambda must be positive")
        self.arch = {"N": N, "M": M, "Nh": Nh}
        self.lmbda = float(lmbda)
        self.frozen = False
        self.g_a = nn.Sequential(
            _conv(3, N), GDN(N), _conv(N, N), GDN(N), _conv(N, N), GDN(N), _conv(N, M)
        )
        self.g_s = nn.Sequential(
            _deconv(M, N), GDN(N, inverse=True), _deconv(N, N), GDN(N, inverse=True),
            _deconv(N, N), GDN(N, inverse=True), _deconv(N, 3),
        )
        self.h_a = nn.Sequential(_conv(M, Nh, 3, 1), nn.LeakyReLU(), _conv(Nh, Nh, 5, 2))
        self.h_s = nn.Sequential(_deconv(Nh, Nh, 5, 2), nn.LeakyReLU(), _conv(Nh, 2 * M, 3, 1))
        self.entropy_bottleneck = FactorizedPrior(Nh)
        self._prior_tables = None

    @property
    def latent_channels(self) -> int:
        return self.arch["M"]

    @property
    def hyper_channels(self) -> int:
        return self.arch["Nh"]

    def encoder_parameters(self):
        return list(self.g_a.parameters()) + list(self.h_a.parameters())

    def entropy_parameters(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        means, scales = self.h_s(z_hat).chunk(2, dim=1)
        return means, scales

    def forward(self, x: torch.Tensor, noise: bool = True) -> ForwardResult:
        y = self.g_a(x)
        z = self.h_a(y)
        if noise:
            z_t = z + torch.empty_like(z).uniform_(-0.5, 0.5)
            y_t = y + torch.empty_like(y).uniform_(-0.5, 0.5)
        else:
            z_t, y_t = torch.round(z), torch.round(y)
        z_lik = self.entropy_bottleneck.likelihood(z_t)
        means, scales = self.entropy_parameters(z_t)
        y_lik = gaussian_likelihood(y_t, means, scales)
        rate = -(torch.log2(y_lik).sum(dim=(1, 2, 3)) + torch.log2(z_lik).sum(dim=(1, 2, 3)))
        x_hat = self.g_s(y_t)
        return ForwardResult(x_hat, rate, y, z)

    # -- frozen-part bookkeeping ------------------------------------------------

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {
            k: v for k, v in self.state_dict().items() if k.split(".", 1)[0] in FROZEN_MODULES
        }

    def frozen_bytes(self) -> bytes:
        buf = io.BytesIO()
        for name, t in sorted(self.frozen_state().items()):
            buf.write(name.encode())
            buf.write(t.detach().cpu().contiguous().to(torch.float32).numpy().tobytes())
        return buf.getvalue()

    def digest(self) -> int:
        """64-bit hash of the decoder-side parameter bytes."""
        h = hashlib.blake2b(self.frozen_bytes(), digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def invalidate_tables(self) -> None:
        self._prior_tables = None

    # -- checkpoints ------------------------------------------------------------

    def save(self, path) -> None:
        """Write one .npz file: named parameter blocks plus a frozen-set marker."""
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        arrays["meta/arch"] = np.array([self.arch["N"], self.arch["M"], self.arch["Nh"]], dtype=np.int64)
        arrays["meta/lambda"] = np.array(self.lmbda, dtype=np.float64)
        arrays["meta/frozen"] = np.array(list(FROZEN_MODULES) if self.frozen else [], dtype="U32")
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> "CodecModel":
        with np.load(path) as data:
            n, m, nh = (int(v) for v in data["meta/arch"])
            model = cls(n, m, nh, float(data["meta/lambda"]))
            state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
            model.load_state_dict(state)
            model.frozen = len(data["meta/frozen"]) > 0
        if model.frozen:
            for name in FROZEN_MODULES:
                getattr(model, name).requires_grad_(False)
        model.eval()
        return model
