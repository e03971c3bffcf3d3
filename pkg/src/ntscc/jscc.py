"""Contextual variable-rate JSCC codec pieces.

Covers the entropy-driven bandwidth quantizer, SNR-conditioned codeword
scaling, rate matching of codewords to variable-length symbol vectors,
and the side-info packet (a grayscale PNG of the rate map) that tells
the receiver how many symbols each position used.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .config import ArchConfig
from .errors import ShapeMismatchError, StreamFormatError
from .layers import ContextualViTBlock, ViTBlock
from .partition import CheckerboardPartition
from .transform import db_linear_interp

STREAM_MAGIC = b"NTSS"
STREAM_VERSION = 1


def quantize_rate(k: float, variant: str = "literal") -> int:
    """Piecewise quantizer from symbol estimate to transmitted symbol count.

    k <= 32: min(1, floor(k/4)) -- the literal published rule, which only
    yields {0, 1} in that range; "max" swaps min for max as an alternate
    reading. k > 32: floor(k/16).
    """
    if k < 0:
        raise ValueError(f"rate estimate must be non-negative, got {k}")
    if k <= 32:
        low = math.floor(k / 4.0)
        return min(1, low) if variant == "literal" else max(1, low)
    return math.floor(k / 16.0)


def quantize_rate_tensor(k: torch.Tensor, variant: str = "literal") -> torch.Tensor:
    if not bool(torch.isfinite(k).all()):
        raise ValueError("non-finite rate estimates")
    if bool((k < 0).any()):
        raise ValueError("rate estimates must be non-negative")
    low = torch.div(k, 4.0, rounding_mode="floor")
    low = torch.clamp(low, max=1.0) if variant == "literal" else torch.clamp(low, min=1.0)
    high = torch.div(k, 16.0, rounding_mode="floor")
    return torch.where(k <= 32.0, low, high).long()


@dataclass
class RateAllocationMap:
    """Per-position quantized symbol counts plus side-info bookkeeping."""

    kbar: torch.Tensor              # long, (h, w)
    q: int                          # side-info bits per entry
    sideinfo_cost_symbols: int = 0

    @property
    def total_symbols(self) -> int:
        return int(self.kbar.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.kbar.shape)


def position_bits(likelihood: torch.Tensor) -> torch.Tensor:
    """Sum of -log2 p over channels: (.., C, h, w) -> (.., h, w)."""
    return (-torch.log2(likelihood)).sum(dim=-3)


def compute_rate_allocation(likelihood: torch.Tensor, eta, q: int = 4,
                            variant: str = "literal") -> RateAllocationMap:
    """Entropy-scaled, quantized bandwidth map for one image.

    likelihood: (C, h, w) per-element probabilities; eta: scalar or (h, w)
    grid of symbols-per-bit factors. Quantized counts are clamped to the
    2^q - 1 ceiling the side-info format can carry.
    """
    if likelihood.dim() != 3:
        raise ShapeMismatchError(f"expected (C, h, w) likelihoods, got {tuple(likelihood.shape)}")
    eta_t = torch.as_tensor(eta, dtype=likelihood.dtype)
    if bool((eta_t <= 0).any()):
        raise ValueError("eta must be positive")
    k = eta_t * position_bits(likelihood)
    kbar = quantize_rate_tensor(k, variant)
    kbar = kbar.clamp(max=2 ** q - 1)
    return RateAllocationMap(kbar=kbar, q=q)


class ScalingFCN(nn.Module):
    """Two-layer per-position network producing a strictly positive vector.

    Initialized to output exactly one everywhere so scaling starts as the
    identity and drifts as training shapes it.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Conv2d(dim, dim, 1)
        self.fc2 = nn.Conv2d(dim, dim, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.constant_(self.fc2.bias, math.log(math.e - 1.0))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.fc2(F.relu(self.fc1(v)))) + 1e-6


class SNRScalingParams(nn.Module):
    """Global per-CQI scalars (3 dB grid) x codeword-conditioned vectors."""

    def __init__(self, snr_table_db: tuple[float, ...], dim: int):
        super().__init__()
        self.snr_keys = [float(v) for v in snr_table_db]
        self.log_global = nn.Parameter(torch.zeros(len(self.snr_keys)))
        self.fcn_anchor = ScalingFCN(dim)
        self.fcn_nonanchor = ScalingFCN(dim)

    def global_scalar(self, nu_db: float | None) -> torch.Tensor:
        """Table lookup with 3 dB log-linear interpolation.

        A noiseless channel (nu_db None or infinite) uses the best-channel
        entry, i.e. the top of the table.
        """
        if nu_db is None or math.isinf(nu_db):
            return torch.exp(self.log_global[-1])
        return db_linear_interp(float(nu_db), self.snr_keys, self.log_global)

    def scaling_grid(self, v: torch.Tensor, nu_db: float | None,
                     part: CheckerboardPartition) -> torch.Tensor:
        c = self.global_scalar(nu_db)
        mask = part.mask4d(True).to(v.dtype)
        q = self.fcn_anchor(v) * mask + self.fcn_nonanchor(v) * (1.0 - mask)
        return c * q


def apply_snr_scaling(v_dot: torch.Tensor, nu_db: float, params: SNRScalingParams,
                      part: CheckerboardPartition) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide codewords by the CQI scaling; returns (v, q_snr)."""
    q_snr = params.scaling_grid(v_dot, nu_db, part)
    return v_dot / q_snr, q_snr


def invert_snr_scaling(v_hat: torch.Tensor, nu_db: float, params: SNRScalingParams,
                       part: CheckerboardPartition,
                       q_snr: torch.Tensor | None = None) -> torch.Tensor:
    """Multiply received codewords back up.

    Without an explicit q_snr the decoder recomputes the scaling from the
    received codewords through the shared FCN weights; supplying the
    encoder's q_snr makes the pair an exact inverse.
    """
    if q_snr is None:
        q_snr = params.scaling_grid(v_hat, nu_db, part)
    return v_hat * q_snr


class JSCCEncoder(nn.Module):
    """One codec branch: embedding, attention blocks, codeword head.

    With contextual=True the blocks alternate self- and cross-attention,
    with keys/values drawn only from the context grid.
    """

    def __init__(self, arch: ArchConfig, contextual: bool):
        super().__init__()
        m, w = arch.bottleneck, arch.jscc_width
        self.contextual = contextual
        self.embed = nn.Conv2d(m, w, 1)
        if contextual:
            self.ctx_embed = nn.Conv2d(m, w, 1)
            self.blocks = nn.ModuleList(
                ContextualViTBlock(w, arch.jscc_window, arch.mlp_ratio, arch.head_channels)
                for _ in range(arch.jscc_blocks_context)
            )
        else:
            self.blocks = nn.ModuleList(
                ViTBlock(w, arch.jscc_window, arch.mlp_ratio, arch.head_channels)
                for _ in range(arch.jscc_blocks_plain)
            )
        self.head = nn.Conv2d(w, arch.d_max, 1)

    def forward(self, latents: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed(latents)
        if self.contextual:
            if context is None:
                raise ShapeMismatchError("contextual branch requires a context grid")
            ctx = self.ctx_embed(context)
            for blk in self.blocks:
                x = blk(x, ctx)
        else:
            for blk in self.blocks:
                x = blk(x)
        return self.head(x)


class JSCCDecoder(nn.Module):
    """Mirror of the encoder: codewords back to latents."""

    def __init__(self, arch: ArchConfig, contextual: bool):
        super().__init__()
        m, w = arch.bottleneck, arch.jscc_width
        self.contextual = contextual
        self.embed = nn.Conv2d(arch.d_max, w, 1)
        if contextual:
            self.ctx_embed = nn.Conv2d(m, w, 1)
            self.blocks = nn.ModuleList(
                ContextualViTBlock(w, arch.jscc_window, arch.mlp_ratio, arch.head_channels)
                for _ in range(arch.jscc_blocks_context)
            )
        else:
            self.blocks = nn.ModuleList(
                ViTBlock(w, arch.jscc_window, arch.mlp_ratio, arch.head_channels)
                for _ in range(arch.jscc_blocks_plain)
            )
        self.head = nn.Conv2d(w, m, 1)

    def forward(self, codewords: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed(codewords)
        if self.contextual:
            if context is None:
                raise ShapeMismatchError("contextual branch requires a context grid")
            ctx = self.ctx_embed(context)
            for blk in self.blocks:
                x = blk(x, ctx)
        else:
            for blk in self.blocks:
                x = blk(x)
        return self.head(x)


class RateMatcher(nn.Module):
    """Rate-conditioned affine head followed by truncation.

    Position i is mapped through the affine transform selected by its
    quantized rate and contributes exactly its first 2*kbar_i real
    components to the stream; the receiver zero-pads them back.
    """

    def __init__(self, d_max: int, n_rates: int):
        super().__init__()
        eye = torch.eye(d_max).unsqueeze(0).repeat(n_rates, 1, 1)
        self.weight = nn.Parameter(eye + 0.01 * torch.randn(n_rates, d_max, d_max))
        self.bias = nn.Parameter(torch.zeros(n_rates, d_max))
        self.d_max = d_max
        self.n_rates = n_rates

    def _mask(self, kbar_flat: torch.Tensor) -> torch.Tensor:
        cols = torch.arange(self.d_max, device=kbar_flat.device).unsqueeze(0)
        return cols < (2 * kbar_flat).unsqueeze(1)

    def match(self, codewords: torch.Tensor, rmap: RateAllocationMap) -> torch.Tensor:
        """(d_max, h, w) codeword grid -> concatenated real symbol stream."""
        d, h, w = codewords.shape
        if rmap.shape != (h, w):
            raise ShapeMismatchError(f"rate map {rmap.shape} vs codeword grid {(h, w)}")
        kbar = rmap.kbar.reshape(-1)
        if int(kbar.max()) * 2 > self.d_max:
            raise ValueError(f"rate {int(kbar.max())} exceeds d_max/2 = {self.d_max // 2}")
        flat = codewords.reshape(d, -1).transpose(0, 1)  # (N, d)
        t = torch.einsum("nij,nj->ni", self.weight[kbar], flat) + self.bias[kbar]
        return t[self._mask(kbar)]

    def dematch(self, stream: torch.Tensor, rmap: RateAllocationMap) -> torch.Tensor:
        """Zero-padded (d_max, h, w) codeword grid from a received stream."""
        h, w = rmap.shape
        kbar = rmap.kbar.reshape(-1)
        mask = self._mask(kbar)
        expected = int(mask.sum())
        if stream.numel() != expected:
            raise StreamFormatError(
                f"stream length {stream.numel()} does not match rate map total {expected}"
            )
        flat = torch.zeros(h * w, self.d_max, dtype=stream.dtype, device=stream.device)
        flat[mask] = stream
        return flat.transpose(0, 1).reshape(self.d_max, h, w)


@dataclass
class SideInfoPacket:
    """Losslessly PNG-coded rate map plus its modeled channel cost."""

    data: bytes
    q: int
    cost_symbols: int = 0

    @property
    def byte_length(self) -> int:
        return len(self.data)


def sideinfo_cost_symbols(n_bytes: int, bits_per_symbol: float) -> int:
    return math.ceil(8.0 * n_bytes / bits_per_symbol)


def serialize_rate_map(rmap: RateAllocationMap,
                       bits_per_symbol: float = 2.667) -> SideInfoPacket:
    """Rate map -> 8-bit grayscale PNG, one pixel per latent position."""
    kbar = rmap.kbar.cpu().numpy()
    if kbar.max(initial=0) >= 2 ** rmap.q:
        raise StreamFormatError(
            f"rate index {int(kbar.max())} does not fit in {rmap.q} bits"
        )
    img = Image.fromarray(kbar.astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=True)
    data = buf.getvalue()
    cost = sideinfo_cost_symbols(len(data), bits_per_symbol)
    return SideInfoPacket(data=data, q=rmap.q, cost_symbols=cost)


def deserialize_rate_map(packet: SideInfoPacket) -> RateAllocationMap:
    img = Image.open(io.BytesIO(packet.data))
    if img.mode != "L":
        raise StreamFormatError(f"side-info PNG must be grayscale, got mode {img.mode}")
    kbar = torch.from_numpy(np.asarray(img, dtype=np.int64))
    return RateAllocationMap(kbar=kbar, q=packet.q,
                             sideinfo_cost_symbols=packet.cost_symbols)


def serialize_stream(stream: torch.Tensor, q: int) -> bytes:
    """Little-endian float32 payload behind a 16-byte header."""
    values = stream.detach().cpu().numpy().astype("<f4")
    if values.size % 2 != 0:
        raise StreamFormatError("stream must hold an even number of reals")
    header = struct.pack("<4sIII", STREAM_MAGIC, STREAM_VERSION, values.size // 2, q)
    return header + values.tobytes()


def deserialize_stream(blob: bytes) -> tuple[torch.Tensor, int]:
    if len(blob) < 16:
        raise StreamFormatError("stream blob shorter than its header")
    magic, version, k, q = struct.unpack("<4sIII", blob[:16])
    if magic != STREAM_MAGIC:
        raise StreamFormatError(f"bad stream magic {magic!r}")
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    payload = np.frombuffer(blob[16:], dtype="<f4")
    if payload.size != 2 * k:
        raise StreamFormatError(f"expected {2 * k} floats, found {payload.size}")
    return torch.from_numpy(payload.copy()), q
