"""Semantic analysis/synthesis transforms and dual-granularity rate scaling.

The transforms are four-stage residual-transformer stacks with a total
down/upsampling factor of 16. Rate control happens outside the network
weights: latents are divided elementwise by a positive scaling vector
built from a per-lambda global scalar and learned channel-wise vectors
for the anchor and non-anchor branches, and multiplied back at the
receiver.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ArchConfig
from .errors import OutOfRangeError, ShapeMismatchError
from .layers import ResTB, conv, deconv
from .partition import CheckerboardPartition


class AnalysisTransform(nn.Module):
    """g_a: image -> latent grid, 16x downsampling."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        n, m = arch.stage_channels, arch.bottleneck
        chans = (n, n, n, m)
        stages = []
        in_ch = 3
        for i, (ch, depth) in enumerate(zip(chans, arch.blocks_per_stage)):
            stages.append(conv(in_ch, ch, 5 if i == 0 else 3, stride=2))
            stages.append(ResTB(ch, depth, arch.window_transform,
                                arch.mlp_ratio, arch.head_channels))
            in_ch = ch
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeMismatchError(f"image dims must be multiples of 16, got {h}x{w}")
        return self.stages(x)


class SynthesisTransform(nn.Module):
    """g_s: latent grid -> image, symmetrical to the analysis transform."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        n, m = arch.stage_channels, arch.bottleneck
        chans = (m, n, n, n)
        depths = tuple(reversed(arch.blocks_per_stage))
        stages = []
        for i, (ch, depth) in enumerate(zip(chans, depths)):
            stages.append(ResTB(ch, depth, arch.window_transform,
                                arch.mlp_ratio, arch.head_channels))
            out_ch = 3 if i == len(chans) - 1 else chans[i + 1]
            stages.append(deconv(ch, out_ch, 5 if i == len(chans) - 1 else 3, stride=2))
        self.stages = nn.Sequential(*stages)

    def forward(self, y: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        x = self.stages(y)
        return x.clamp(0.0, 1.0) if clamp else x


def _bracket(query: float, keys: list[float], unit: str = "") -> tuple[int, int] | int:
    """Index of an exact key hit, or the (lo, hi) pair bracketing the query."""
    if not (keys[0] <= query <= keys[-1]):
        raise OutOfRangeError(
            f"query {query}{unit} outside table hull [{keys[0]}, {keys[-1]}]{unit}"
        )
    for i, k in enumerate(keys):
        if k == query:
            return i
        if k > query:
            return (i - 1, i)
    return len(keys) - 1


def log_linear_interp(query: float, keys: list[float], log_values: torch.Tensor) -> torch.Tensor:
    """Log-log linear interpolation: exact at keys, geometric in between.

    A query at the geometric midpoint of two keys returns the geometric
    mean of their values. No extrapolation: queries outside the key hull
    raise OutOfRangeError.
    """
    hit = _bracket(float(query), keys)
    if isinstance(hit, int):
        return torch.exp(log_values[hit])
    i0, i1 = hit
    t = (math.log(query) - math.log(keys[i0])) / (math.log(keys[i1]) - math.log(keys[i0]))
    return torch.exp(log_values[i0] * (1.0 - t) + log_values[i1] * t)


def db_linear_interp(query_db: float, keys_db: list[float], log_values: torch.Tensor) -> torch.Tensor:
    """Log-linear interpolation against keys that are already in dB."""
    hit = _bracket(float(query_db), keys_db, unit=" dB")
    if isinstance(hit, int):
        return torch.exp(log_values[hit])
    i0, i1 = hit
    t = (query_db - keys_db[i0]) / (keys_db[i1] - keys_db[i0])
    return torch.exp(log_values[i0] * (1.0 - t) + log_values[i1] * t)


class RateScalingParams(nn.Module):
    """Global per-lambda scalars plus channel-wise anchor/non-anchor vectors.

    Everything is stored in the log domain and exponentiated on use, so
    entries stay strictly positive through any number of gradient steps.
    The channel-wise vectors are shared across lambda.
    """

    def __init__(self, lambda_grid: tuple[float, ...], channels: int):
        super().__init__()
        self.lambda_keys = sorted(float(l) for l in lambda_grid)
        # Larger divisor at smaller lambda: coarser latents, fewer bits.
        base = self.lambda_keys[-1]
        init = [0.5 * math.log(base / k) for k in self.lambda_keys]
        self.log_global = nn.Parameter(torch.tensor(init, dtype=torch.float32))
        self.log_anchor = nn.Parameter(torch.zeros(channels))
        self.log_nonanchor = nn.Parameter(torch.zeros(channels))

    def global_scalar(self, lam: float) -> torch.Tensor:
        return log_linear_interp(float(lam), self.lambda_keys, self.log_global)

    def vectors(self, lam: float) -> tuple[torch.Tensor, torch.Tensor]:
        """(q_anchor, q_nonanchor), each a positive C-vector."""
        g = self.global_scalar(lam)
        return g * torch.exp(self.log_anchor), g * torch.exp(self.log_nonanchor)

    def scaling_grid(self, lam: float, part: CheckerboardPartition) -> torch.Tensor:
        """Positive (1, C, h, w) scaling tensor following the partition."""
        q_a, q_na = self.vectors(lam)
        mask = part.mask4d(True).to(q_a.dtype)
        return q_a.view(1, -1, 1, 1) * mask + q_na.view(1, -1, 1, 1) * (1.0 - mask)


def apply_rate_scaling(latents: torch.Tensor, lam: float, params: RateScalingParams,
                       part: CheckerboardPartition) -> torch.Tensor:
    """Elementwise division by the dual-granularity scaling vector."""
    return latents / params.scaling_grid(lam, part)


def invert_rate_scaling(latents: torch.Tensor, lam: float, params: RateScalingParams,
                        part: CheckerboardPartition) -> torch.Tensor:
    """Exact elementwise inverse of apply_rate_scaling."""
    return latents * params.scaling_grid(lam, part)
