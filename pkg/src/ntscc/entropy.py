"""Hyperprior and checkerboard context entropy model.

Produces per-position Gaussian location/scale parameters for the latent
grid and the per-element likelihoods that drive bandwidth allocation.
Anchor positions are parameterized from the hyper path alone; non-anchor
positions additionally condition on anchors through a masked 5x5
convolution whose kernel is zero at every tap sharing the parity of its
center.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchConfig
from .errors import ShapeMismatchError
from .layers import ResTB, conv, deconv
from .partition import CheckerboardPartition

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
LIKELIHOOD_FLOOR = 1e-12
_LOG_SIGMA_MIN = math.log(SIGMA_MIN)
_LOG_SIGMA_MAX = math.log(SIGMA_MAX)


class _LowerBoundFn(torch.autograd.Function):
    """clamp_min whose gradient still passes when it pushes x upward.

    A hard clamp zeroes the gradient of every floored element, which
    permanently strands latents in the saturated-rate region; letting the
    ascending direction through keeps them recoverable.
    """

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep.to(grad.dtype), None


class _UpperBoundFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_max(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x <= ctx.bound) | (grad > 0)
        return grad * keep.to(grad.dtype), None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


def upper_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _UpperBoundFn.apply(x, bound)


def gaussian_likelihood(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Probability mass of a unit-width bin around y under N(mu, sigma^2).

    p = Phi((y - mu + 1/2) / sigma) - Phi((y - mu - 1/2) / sigma),
    floored at 1e-12 so -log2 p stays finite. Evaluated on the reflected
    left tail (|y - mu|) through erfc, so both cumulative terms are small
    numbers: the difference keeps full precision and usable gradients far
    into the tails, where the erf form cancels to zero.
    """
    inv = 1.0 / (sigma * math.sqrt(2.0))
    centered = -(y - mu).abs()
    upper = 0.5 * torch.erfc(-(centered + 0.5) * inv)
    lower = 0.5 * torch.erfc(-(centered - 0.5) * inv)
    p = upper - lower
    return lower_bound(p, LIKELIHOOD_FLOOR)


def add_uniform_noise(z: torch.Tensor, training: bool,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniformly-noised proxy z + U(-1/2, 1/2); identity outside training."""
    if not training:
        return z
    noise = torch.rand(z.shape, generator=generator, dtype=z.dtype, device=z.device) - 0.5
    return z + noise


def clamp_sigma(raw_log_sigma: torch.Tensor) -> torch.Tensor:
    bounded = upper_bound(lower_bound(raw_log_sigma, _LOG_SIGMA_MIN), _LOG_SIGMA_MAX)
    return torch.exp(bounded)


class HyperAnalysis(nn.Module):
    """h_a: latent grid -> hyper latent, 4x spatial downsampling."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        m, cz = arch.bottleneck, arch.hyper_channels
        self.down1 = conv(m, cz, 3, stride=2)
        self.block = ResTB(cz, 1, arch.window_entropy, arch.mlp_ratio, arch.head_channels)
        self.down2 = conv(cz, cz, 3, stride=2)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        h, w = y.shape[-2:]
        pad_h = (4 - h % 4) % 4
        pad_w = (4 - w % 4) % 4
        if pad_h or pad_w:
            y = F.pad(y, (0, pad_w, 0, pad_h), mode="replicate")
        x = self.down1(y)
        x = self.block(x)
        return self.down2(x)


class HyperSynthesis(nn.Module):
    """h_s: hyper latent -> (mu, log_sigma) feature grid at latent resolution."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        m, cz = arch.bottleneck, arch.hyper_channels
        self.up1 = deconv(cz, cz, 3, stride=2)
        self.block = ResTB(cz, 1, arch.window_entropy, arch.mlp_ratio, arch.head_channels)
        self.up2 = deconv(cz, 2 * m, 3, stride=2)

    def forward(self, z: torch.Tensor, latent_hw: tuple[int, int]) -> torch.Tensor:
        x = self.up1(z)
        x = self.block(x)
        x = self.up2(x)
        return x[..., : latent_hw[0], : latent_hw[1]]


class CheckerboardContext(nn.Module):
    """Masked 5x5 convolution aggregating anchors for non-anchor prediction.

    The binary mask zeroes every kernel tap whose offset parity matches the
    center, so the output at a position only ever sees the opposite parity
    class within the 5x5 window.
    """

    def __init__(self, arch: ArchConfig, kernel_size: int = 5):
        super().__init__()
        m = arch.bottleneck
        self.conv = nn.Conv2d(m, 2 * m, kernel_size, padding=kernel_size // 2)
        rows = torch.arange(kernel_size).unsqueeze(1)
        cols = torch.arange(kernel_size).unsqueeze(0)
        center_parity = (kernel_size // 2 + kernel_size // 2) % 2
        mask = ((rows + cols) % 2 != center_parity).float()
        self.register_buffer("mask", mask.unsqueeze(0).unsqueeze(0))

    def masked_weight(self) -> torch.Tensor:
        return self.conv.weight * self.mask

    def forward(self, anchors_only: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            anchors_only, self.masked_weight(), self.conv.bias,
            padding=self.conv.padding,
        )


class EntropyParametersNet(nn.Module):
    """g_ep: 1x1 aggregation of hyper and context features."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        m = arch.bottleneck
        self.net = nn.Sequential(
            conv(4 * m, 3 * m, 1),
            nn.GELU(),
            conv(3 * m, 2 * m, 1),
        )

    def forward(self, hyper_feat: torch.Tensor, ctx_feat: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([hyper_feat, ctx_feat], dim=1))


class FactorizedDensity(nn.Module):
    """Per-channel monotone CDF c_psi for the hyper latent rate term.

    Each channel owns a stack of monotone elementwise maps built from
    softplus-positive weights, exactly the construction used for
    non-parametric prior densities in learned compression.
    """

    def __init__(self, channels: int, hidden: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(hidden) + (1,)
        n_layers = len(dims) - 1
        scale = init_scale ** (1.0 / n_layers)
        self._weights = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(n_layers):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self._weights.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self._biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < n_layers - 1:
                self._factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def cdf(self, value: torch.Tensor) -> torch.Tensor:
        """value: (C, N) per-channel samples -> CDF in (0, 1)."""
        x = value.unsqueeze(1)  # (C, 1, N)
        n_layers = len(self._weights)
        for i in range(n_layers):
            x = torch.matmul(F.softplus(self._weights[i]), x) + self._biases[i]
            if i < n_layers - 1:
                x = x + torch.tanh(self._factors[i]) * torch.tanh(x)
        return torch.sigmoid(x.squeeze(1))

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """Unit-bin probability mass of an NCHW hyper-latent tensor."""
        b, c, h, w = z.shape
        if c != self.channels:
            raise ShapeMismatchError(f"expected {self.channels} channels, got {c}")
        flat = z.permute(1, 0, 2, 3).reshape(c, -1)
        p = self.cdf(flat + 0.5) - self.cdf(flat - 0.5)
        p = lower_bound(p, LIKELIHOOD_FLOOR)
        return p.reshape(c, b, h, w).permute(1, 0, 2, 3)


class EntropyModel(nn.Module):
    """Combined hyper + checkerboard context parameter inference."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.hyper_analysis = HyperAnalysis(arch)
        self.hyper_synthesis = HyperSynthesis(arch)
        self.context = CheckerboardContext(arch) if arch.use_context else None
        self.aggregation = EntropyParametersNet(arch) if arch.use_context else None
        self.factorized = FactorizedDensity(arch.hyper_channels)

    def hyper_features(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (z, hyper parameter grid aligned to the latent grid)."""
        z = self.hyper_analysis(y)
        feats = self.hyper_synthesis(z, y.shape[-2:])
        return z, feats

    @staticmethod
    def split_params(feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw_log_sigma = feats.chunk(2, dim=1)
        return mu, clamp_sigma(raw_log_sigma)

    def context_features(self, anchor_latents: torch.Tensor,
                         part: CheckerboardPartition) -> torch.Tensor:
        if self.context is None:
            raise RuntimeError("context model disabled by configuration")
        return self.context(part.select(anchor_latents, anchors=True))

    def params(self, hyper_feats: torch.Tensor, anchor_latents: torch.Tensor | None,
               part: CheckerboardPartition) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position (mu, sigma); anchors depend on the hyper path only."""
        if hyper_feats.shape[-2:] != part.shape:
            raise ShapeMismatchError(
                f"hyper grid {tuple(hyper_feats.shape[-2:])} vs partition {part.shape}"
            )
        mu_a, sigma_a = self.split_params(hyper_feats)
        if self.context is None:
            return mu_a, sigma_a
        if anchor_latents is None:
            raise ShapeMismatchError("context model requires anchor latents")
        if anchor_latents.shape[-2:] != part.shape:
            raise ShapeMismatchError(
                f"latent grid {tuple(anchor_latents.shape[-2:])} vs partition {part.shape}"
            )
        ctx = self.context_features(anchor_latents, part)
        mu_na, sigma_na = self.split_params(self.aggregation(hyper_feats, ctx))
        mu = part.merge(mu_a, mu_na)
        sigma = part.merge(sigma_a, sigma_na)
        return mu, sigma
