"""Per-instance online editing of latents and transmitter JSCC parameters.

Adaptation works on a private clone of the model: gradient descent runs
on the scaled latents and the JSCC encoder weights against an instant
rate-distortion target, everything else stays frozen, and the best
iterate by recorded loss (step 0 included) is selected. The receiver
needs no knowledge that adaptation happened.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AdaptConfig, ChannelConfig
from .model import NTSCCModel, TransmissionResult
from .training import DISTORTION_SCALE, rd_loss
from .transform import apply_rate_scaling


@dataclass
class ROISpec:
    """Spatial quality map plus per-position bandwidth factors.

    quality_map lives on the pixel grid in [0, 1]; eta_map lives on the
    latent grid and must be strictly positive. weight_span linearly maps
    quality values to distortion weights, which permits emphasis factors
    above one without violating the [0, 1] bound on the map itself.
    """

    quality_map: torch.Tensor                  # (H, W) in [0, 1]
    eta_map: torch.Tensor                      # (h, w) > 0
    weight_span: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if float(self.quality_map.min()) < 0.0 or float(self.quality_map.max()) > 1.0:
            raise ValueError("quality map values must lie in [0, 1]")
        if bool((self.eta_map <= 0).any()):
            raise ValueError("eta map entries must be positive")

    @property
    def distortion_weights(self) -> torch.Tensor:
        lo, hi = self.weight_span
        return lo + self.quality_map * (hi - lo)

    @classmethod
    def from_mask(cls, mask: torch.Tensor, latent_shape: tuple[int, int],
                  eta_in: float = 0.25, eta_out: float = 0.05,
                  weight_in: float = 1.25, weight_out: float = 0.25) -> "ROISpec":
        """Binary pixel mask -> spec with the two-level factor layout."""
        m = mask.float().clamp(0.0, 1.0)
        frac = F.adaptive_avg_pool2d(m.unsqueeze(0).unsqueeze(0), latent_shape)[0, 0]
        eta_map = eta_out + frac * (eta_in - eta_out)
        return cls(quality_map=m, eta_map=eta_map, weight_span=(weight_out, weight_in))


def load_roi_map(path: str | Path, image_hw: tuple[int, int]) -> torch.Tensor:
    """8-bit grayscale PNG aligned to the image, rescaled to [0, 1]."""
    img = Image.open(path).convert("L")
    arr = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)
    if tuple(arr.shape) != tuple(image_hw):
        raise ValueError(f"ROI map {tuple(arr.shape)} does not match image {tuple(image_hw)}")
    return arr


@dataclass
class MultiDistortionWeights:
    lambda_o: float
    lambda_s: float

    def __post_init__(self):
        if self.lambda_o < 0 or self.lambda_s < 0:
            raise ValueError("distortion weights must be non-negative")
        if self.lambda_o == 0 and self.lambda_s == 0:
            raise ValueError("at least one distortion weight must be positive")


def ssim_proxy(x: torch.Tensor, x_hat: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Differentiable structural-dissimilarity score (lower is better)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    pad = window // 2
    kernel = torch.ones(3, 1, window, window, dtype=x.dtype) / window ** 2
    mu_x = F.conv2d(x, kernel, padding=pad, groups=3)
    mu_y = F.conv2d(x_hat, kernel, padding=pad, groups=3)
    var_x = F.conv2d(x * x, kernel, padding=pad, groups=3) - mu_x ** 2
    var_y = F.conv2d(x_hat * x_hat, kernel, padding=pad, groups=3) - mu_y ** 2
    cov = F.conv2d(x * x_hat, kernel, padding=pad, groups=3) - mu_x * mu_y
    ssim = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return 1.0 - ssim.mean()


@dataclass
class AdaptResult:
    """Best iterate of an online adaptation run."""

    y_edited: torch.Tensor            # (1, C, h, w) scaled latents, both branches
    encoder_state: dict               # transmitter JSCC parameters of the best iterate
    loss_trace: list[float]
    selected_step: int
    seed: int
    lam: float
    eta: object
    nu_db: float | None
    extras: dict = field(default_factory=dict)

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def selected_loss(self) -> float:
        return self.loss_trace[self.selected_step]

    def best_at(self, budget: int) -> float:
        """Best recorded loss within the first `budget` steps (step 0 counts)."""
        return min(self.loss_trace[: budget + 1])


def _encoder_state(model: NTSCCModel) -> dict:
    state = {"anchor": copy.deepcopy(model.encoder_anchor.state_dict())}
    if model.encoder_nonanchor is not None:
        state["nonanchor"] = copy.deepcopy(model.encoder_nonanchor.state_dict())
    return state


def load_encoder_state(model: NTSCCModel, state: dict) -> None:
    model.encoder_anchor.load_state_dict(state["anchor"])
    if model.encoder_nonanchor is not None and "nonanchor" in state:
        model.encoder_nonanchor.load_state_dict(state["nonanchor"])


def _adapt(model: NTSCCModel, x: torch.Tensor, objective, lam: float, eta,
           nu_db: float | None, cfg: AdaptConfig, channel_cfg: ChannelConfig,
           seed: int, n_sim: int = 1) -> AdaptResult:
    """Shared descent loop; `objective(out, x) -> scalar loss tensor`."""
    work = copy.deepcopy(model)
    work.train()
    for p in work.parameters():
        p.requires_grad_(False)
    enc_params = work.encoder_parameters()
    for p in enc_params:
        p.requires_grad_(True)

    with torch.no_grad():
        y_dot = work.analysis(x)
        part = work.partition(*y_dot.shape[-2:])
        y0 = apply_rate_scaling(y_dot, lam, work.rate_scaling, part)
    y = y0.clone().requires_grad_(True)

    optimizer = torch.optim.Adam([
        {"params": [y], "lr": cfg.lr_latent},
        {"params": enc_params, "lr": cfg.lr_encoder},
    ])
    generator = torch.Generator().manual_seed(seed)

    trace: list[float] = []
    best_loss = math.inf
    best_step = 0
    best_y = y0.detach().clone()
    best_enc = _encoder_state(work)

    for step in range(cfg.t_max + 1):
        loss = None
        try:
            for _ in range(cfg.channel_samples):
                out = work.pipeline_from_latents(
                    y, lam, eta, nu_db, channel_cfg, n_sim, generator, training=True)
                one = objective(out, x)
                loss = one if loss is None else loss + one
            loss = loss / cfg.channel_samples
        except RuntimeError:
            break  # iterate went non-finite; keep the last finite snapshot
        if not torch.isfinite(loss):
            break
        loss_val = float(loss.detach())
        trace.append(loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best_step = step
            best_y = y.detach().clone()
            best_enc = _encoder_state(work)
        if step == cfg.t_max:
            break
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    return AdaptResult(
        y_edited=best_y,
        encoder_state=best_enc,
        loss_trace=trace,
        selected_step=best_step,
        seed=seed,
        lam=lam,
        eta=eta,
        nu_db=nu_db,
    )


def adapt_standard(model: NTSCCModel, x: torch.Tensor, lam: float, eta: float,
                   nu_db: float | None, cfg: AdaptConfig, channel_cfg: ChannelConfig,
                   seed: int = 0, distortion_scale: float = DISTORTION_SCALE) -> AdaptResult:
    def objective(out, target):
        return rd_loss(target, out["x_hat"], out["bits_grid"], lam, eta,
                       distortion_scale=distortion_scale)["loss"]

    return _adapt(model, x, objective, lam, eta, nu_db, cfg, channel_cfg, seed)


def adapt_roi(model: NTSCCModel, x: torch.Tensor, roi: ROISpec, lam: float,
              nu_db: float | None, cfg: AdaptConfig, channel_cfg: ChannelConfig,
              seed: int = 0, distortion_scale: float = DISTORTION_SCALE) -> AdaptResult:
    """ROI-weighted target: per-position bandwidth factors and per-pixel
    distortion weights derived from the quality map."""
    if tuple(roi.quality_map.shape) != tuple(x.shape[-2:]):
        raise ValueError("quality map must match the image grid")
    weights = roi.distortion_weights.to(x.dtype)
    m = float(x.shape[-3] * x.shape[-2] * x.shape[-1])

    def objective(out, target):
        rate = (roi.eta_map.to(out["bits_grid"].dtype) * out["bits_grid"]).sum()
        sqerr = ((target - out["x_hat"]) ** 2).mean(dim=1)
        distortion = (weights.unsqueeze(0) * sqerr).mean()
        return rate / m + lam * distortion_scale * distortion

    result = _adapt(model, x, objective, lam, roi.eta_map, nu_db, cfg, channel_cfg, seed)
    result.extras["roi"] = roi
    return result


def adapt_multidistortion(model: NTSCCModel, x: torch.Tensor,
                          weights: MultiDistortionWeights, eta: float,
                          nu_db: float | None, cfg: AdaptConfig,
                          channel_cfg: ChannelConfig, seed: int = 0,
                          subjective_metric=ssim_proxy,
                          lam_scale: float | None = None,
                          distortion_scale: float = DISTORTION_SCALE) -> AdaptResult:
    """Rate + objective MSE + pluggable differentiable subjective metric.

    lam_scale picks the latent scaling operating point (the objective
    itself carries no SQI); it defaults to the model's base lambda.
    """
    if lam_scale is None:
        lam_scale = model.rate.lambda0

    def objective(out, target):
        m = float(target.shape[-3] * target.shape[-2] * target.shape[-1])
        rate = eta * out["bits_grid"].sum() / m
        mse = ((target - out["x_hat"]) ** 2).mean()
        loss = rate + weights.lambda_o * distortion_scale * mse
        if weights.lambda_s > 0:
            loss = loss + weights.lambda_s * subjective_metric(target, out["x_hat"])
        return loss

    result = _adapt(model, x, objective, lam_scale, eta, nu_db, cfg,
                    channel_cfg, seed)
    result.extras["md_weights"] = weights
    return result


def transmit_adapted(model: NTSCCModel, result: AdaptResult, channel_cfg: ChannelConfig,
                     x: torch.Tensor, n_sim: int = 4,
                     generator: torch.Generator | None = None,
                     sideinfo_bits_per_symbol: float = 2.667) -> TransmissionResult:
    """Run inference with the edited latents and encoder parameters.

    Decoder-side parameters are the original model's; only the clone used
    for transmission carries the edits.
    """
    work = copy.deepcopy(model)
    load_encoder_state(work, result.encoder_state)
    return work.transmit_image(
        x, result.lam, result.eta, result.nu_db, channel_cfg, n_sim,
        generator, sideinfo_bits_per_symbol, y_override=result.y_edited)
