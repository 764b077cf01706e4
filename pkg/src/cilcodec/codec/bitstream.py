"""Bitstream container plus entropy-coded encode/decode of single images.

Container layout (little-endian)::

    magic "CZC1" | version u8 | frozen-digest u64 | orig_h u16 | orig_w u16
    | pad_h u16 | pad_w u16 | hyper_len u32 | hyper bytes | main_len u32 | main bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr

from ..datamodel import LabeledImage
from ..errors import CorruptStream, IncompatibleModel
from . import rangecoder as rc
from .model import PAD_MULTIPLE, SCALE_FLOOR, CodecModel

MAGIC = b"CZC1"
VERSION = 1
_HEAD = struct.Struct("<4sBQHHHH")
HEADER_BYTES = _HEAD.size + 4 + 4  # fixed fields plus the two length prefixes

# latent tables cover offsets within +-GAUSS_KMAX of round(mean)
GAUSS_KMAX = 128
GAUSS_TAIL = 10.0
# hyper-latent tables cover +-PRIOR_K around each channel's median
PRIOR_K = 64


@dataclass(frozen=True)
class Bitstream:
    digest: int
    orig_h: int
    orig_w: int
    pad_h: int
    pad_w: int
    hyper: bytes
    main: bytes
    version: int = VERSION

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.hyper) + len(self.main))

    @property
    def header_bits(self) -> int:
        return 8 * HEADER_BYTES

    @property
    def total_bits(self) -> int:
        return self.header_bits + self.payload_bits

    def latent_shape(self, channels: int) -> tuple[int, int, int]:
        return channels, self.pad_h // 16, self.pad_w // 16

    def hyper_shape(self, channels: int) -> tuple[int, int, int]:
        return channels, self.pad_h // PAD_MULTIPLE, self.pad_w // PAD_MULTIPLE

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(MAGIC, self.version, self.digest, self.orig_h, self.orig_w, self.pad_h, self.pad_w)
        return b"".join([
            head,
            struct.pack("<I", len(self.hyper)), self.hyper,
            struct.pack("<I", len(self.main)), self.main,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise CorruptStream(f"bitstream of {len(data)} bytes is shorter than the header")
        magic, version, digest, oh, ow, ph, pw = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptStream(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStream(f"unsupported bitstream version {version}")
        if oh == 0 or ow == 0 or ph % PAD_MULTIPLE or pw % PAD_MULTIPLE or ph < oh or pw < ow:
            raise CorruptStream("inconsistent dimensions in header")
        pos = _HEAD.size
        (hl,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + hl + 4 > len(data):
            raise CorruptStream("hyper payload truncated")
        hyper = data[pos : pos + hl]
        pos += hl
        (ml,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + ml != len(data):
            raise CorruptStream("main payload length does not match stream size")
        return cls(digest, oh, ow, ph, pw, bytes(hyper), bytes(data[pos:]), version)


def bits_per_pixel(total_bits: int, height: int, width: int) -> float:
    return total_bits / (height * width)


def measure_bpp(bitstream: Bitstream) -> float:
    """Header plus payload bits over the original pixel count."""
    return bits_per_pixel(bitstream.total_bits, bitstream.orig_h, bitstream.orig_w)


# -- probability tables -------------------------------------------------------


def gaussian_tables(means: np.ndarray, scales: np.ndarray):
    """Windowed frequency tables for a discretized Gaussian per element.

    Returns (centers, half_widths, cum) where row i of ``cum`` is the
    cumulative frequency table of element i.
    """
    means = means.astype(np.float64).ravel()
    scales = np.maximum(scales.astype(np.float64).ravel(), SCALE_FLOOR)
    centers = np.floor(means + 0.5).astype(np.int64)
    half = np.clip(np.ceil(scales * GAUSS_TAIL).astype(np.int64) + 1, 2, GAUSS_KMAX)
    offsets = np.arange(-GAUSS_KMAX, GAUSS_KMAX + 1)
    active_bins = np.abs(offsets)[None, :] <= half[:, None]
    a = np.abs(centers[:, None] + offsets[None, :] - means[:, None])
    s = scales[:, None]
    pmf = ndtr((0.5 - a) / s) - ndtr((-0.5 - a) / s)
    pmf = np.where(active_bins, pmf, 0.0)
    escape = np.maximum(0.0, 1.0 - pmf.sum(axis=1, keepdims=True))
    pmf = np.concatenate([pmf, escape], axis=1)
    active = np.concatenate([active_bins, np.ones((len(means), 1), bool)], axis=1)
    return centers, half, rc.cumulative(rc.quantize_pmf(pmf, active))


@torch.no_grad()
def prior_tables(model: CodecModel):
    """Per-channel tables for the factorized hyper-latent prior (cached once frozen)."""
    if model._prior_tables is not None and model.frozen:
        return model._prior_tables
    eb = model.entropy_bottleneck
    c = model.hyper_channels
    grid = torch.arange(-1024, 1025, dtype=torch.float32)
    logits = eb.logits_cdf(grid.expand(c, 1, -1))[:, 0, :]
    medians = grid[torch.argmax((logits >= 0).to(torch.int8), dim=1)]
    centers = medians.to(torch.int64)
    offsets = torch.arange(-PRIOR_K, PRIOR_K + 1, dtype=torch.float32)
    values = (centers[:, None].to(torch.float32) + offsets[None, :]).reshape(1, c, 1, -1)
    lik = eb.likelihood(values)[0, :, 0, :].double().numpy()
    escape = np.maximum(0.0, 1.0 - lik.sum(axis=1, keepdims=True))
    pmf = np.concatenate([lik, escape], axis=1)
    freq = rc.quantize_pmf(pmf, np.ones_like(pmf, dtype=bool))
    tables = (centers.numpy(), rc.cumulative(freq))
    if model.frozen:
        model._prior_tables = tables
    return tables


# -- coding -------------------------------------------------------------------


def _pad_image(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    ph, pw = -h % PAD_MULTIPLE, -w % PAD_MULTIPLE
    if ph or pw:
        pixels = np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return pixels


def _hyper_rows(c: int, h: int, w: int) -> np.ndarray:
    return np.repeat(np.arange(c), h * w)


@torch.no_grad()
def analyse(model: CodecModel, pixels: np.ndarray):
    """Rounded latent and hyper-latent for one HxWx3 uint8 image."""
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ValueError("cannot encode a zero-area image")
    padded = _pad_image(pixels)
    x = torch.from_numpy(padded.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    y = model.g_a(x)
    z = model.h_a(y)
    return torch.round(y), torch.round(z), padded.shape[:2]


@torch.no_grad()
def estimated_rate(model: CodecModel, pixels: np.ndarray) -> float:
    """Model bits -log2 p(z_hat) - log2 p(y_hat | z_hat) for one image."""
    from .model import gaussian_likelihood

    y_hat, z_hat, _ = analyse(model, pixels)
    z_lik = model.entropy_bottleneck.likelihood(z_hat)
    means, scales = model.entropy_parameters(z_hat)
    y_lik = gaussian_likelihood(y_hat, means, scales)
    return float(-(torch.log2(y_lik).sum() + torch.log2(z_lik).sum()))


@torch.no_grad()
def encode(model: CodecModel, image: LabeledImage | np.ndarray) -> Bitstream:
    model.eval()
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.uint8)
    h, w = pixels.shape[:2]
    y_hat, z_hat, (ph, pw) = analyse(model, pixels)

    zc, zh, zw = z_hat.shape[1:]
    p_centers, p_cum = prior_tables(model)
    rows = _hyper_rows(zc, zh, zw)
    z_vals = z_hat[0].to(torch.int64).numpy().ravel()
    hyper = rc.encode_integers(z_vals, p_centers[rows], np.full(len(rows), PRIOR_K), p_cum, rows)

    means, scales = model.entropy_parameters(z_hat)
    centers, half, cum = gaussian_tables(means.numpy(), scales.numpy())
    y_vals = y_hat[0].to(torch.int64).numpy().ravel()
    main = rc.encode_integers(y_vals, centers, half, cum, np.arange(len(y_vals)))
    return Bitstream(model.digest(), h, w, ph, pw, hyper, main)


@torch.no_grad()
def decode_latents(model: CodecModel, bitstream: Bitstream):
    if bitstream.digest != model.digest():
        raise IncompatibleModel(
            f"bitstream digest {bitstream.digest:016x} does not match model {model.digest():016x}"
        )
    zc, zh, zw = bitstream.hyper_shape(model.hyper_channels)
    p_centers, p_cum = prior_tables(model)
    rows = _hyper_rows(zc, zh, zw)
    z_vals = rc.decode_integers(bitstream.hyper, p_centers[rows], np.full(len(rows), PRIOR_K), p_cum, rows)
    z_hat = torch.from_numpy(z_vals.astype(np.float32)).reshape(1, zc, zh, zw)

    means, scales = model.entropy_parameters(z_hat)
    centers, half, cum = gaussian_tables(means.numpy(), scales.numpy())
    y_vals = rc.decode_integers(bitstream.main, centers, half, cum, np.arange(len(centers)))
    y_hat = torch.from_numpy(y_vals.astype(np.float32)).reshape(1, *bitstream.latent_shape(model.latent_channels))
    return y_hat, z_hat


@torch.no_grad()
def decode(model: CodecModel, bitstream: Bitstream | bytes) -> np.ndarray:
    """Reconstruct an HxWx3 uint8 image at the original dimensions."""
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    model.eval()
    y_hat, _ = decode_latents(model, bitstream)
    x_hat = model.g_s(y_hat)[0, :, : bitstream.orig_h, : bitstream.orig_w]
    out = torch.round(x_hat.clamp(0, 1) * 255).to(torch.uint8)
    return out.permute(1, 2, 0).contiguous().numpy()
