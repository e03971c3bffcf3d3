"""End-to-end model: transforms, entropy model, contextual JSCC, channel.

The transmitter encodes anchors in one pass, locally simulates their
reception to obtain the anchor estimate the receiver will see, and
conditions both the non-anchor entropy parameters and the non-anchor
codewords on that estimate. The receiver decodes in two passes: anchors
first, then non-anchors conditioned on the decoded anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .channel import make_channel_state, normalize_power, transmit
from .config import ArchConfig, ChannelConfig, RateControl, RunConfig
from .entropy import EntropyModel, add_uniform_noise, gaussian_likelihood
from .jscc import (
    JSCCDecoder,
    JSCCEncoder,
    RateAllocationMap,
    RateMatcher,
    SideInfoPacket,
    SNRScalingParams,
    compute_rate_allocation,
    position_bits,
    serialize_rate_map,
)
from .partition import CheckerboardPartition, build_partition
from .transform import (
    AnalysisTransform,
    RateScalingParams,
    SynthesisTransform,
    apply_rate_scaling,
    invert_rate_scaling,
)


@dataclass
class TransmissionResult:
    """Single-image inference outcome with full accounting."""

    x_hat: torch.Tensor
    rate_map: RateAllocationMap
    sideinfo: SideInfoPacket
    stream: torch.Tensor
    k_symbols: int
    rho: float
    lam: float
    eta: float
    nu_db: float | None
    extras: dict = field(default_factory=dict)


class NTSCCModel(nn.Module):
    """Versatile contextual source-channel codec."""

    def __init__(self, arch: ArchConfig, rate: RateControl):
        super().__init__()
        self.arch = arch
        self.rate = rate
        self.analysis = AnalysisTransform(arch)
        self.synthesis = SynthesisTransform(arch)
        self.entropy = EntropyModel(arch)
        self.rate_scaling = RateScalingParams(rate.lambda_grid, arch.bottleneck)
        self.snr_scaling = SNRScalingParams(rate.snr_table_db, arch.d_max)
        if arch.use_context:
            self.encoder_anchor = JSCCEncoder(arch, contextual=False)
            self.encoder_nonanchor = JSCCEncoder(arch, contextual=True)
            self.decoder_anchor = JSCCDecoder(arch, contextual=False)
            self.decoder_nonanchor = JSCCDecoder(arch, contextual=True)
        else:
            self.encoder_anchor = JSCCEncoder(arch, contextual=False)
            self.decoder_anchor = JSCCDecoder(arch, contextual=False)
            self.encoder_nonanchor = None
            self.decoder_nonanchor = None
        self.rate_matcher = RateMatcher(arch.d_max, 2 ** arch.sideinfo_bits)

    # -- building blocks ---------------------------------------------------

    def partition(self, h: int, w: int) -> CheckerboardPartition:
        return build_partition(h, w, parity=0)

    def encoder_parameters(self):
        """The transmitter-side JSCC parameters that online adaptation edits."""
        params = list(self.encoder_anchor.parameters())
        if self.encoder_nonanchor is not None:
            params += list(self.encoder_nonanchor.parameters())
        return params

    def _channel_pass(self, stream: torch.Tensor, channel_cfg: ChannelConfig,
                      nu_db: float | None, generator: torch.Generator | None) -> torch.Tensor:
        """Normalize, transmit, restore amplitude. Empty streams pass through."""
        if stream.numel() == 0:
            return stream
        state = make_channel_state(channel_cfg, nu_db, stream.numel() // 2,
                                   generator, dtype=stream.dtype)
        if state.noiseless and state.h is None:
            return stream
        normed, scale = normalize_power(stream)
        received = transmit(normed, state, generator)
        return received * scale

    def _decode_codewords(self, v_hat: torch.Tensor, nu_db: float | None,
                          part: CheckerboardPartition) -> torch.Tensor:
        """Receiver-side inverse SNR scaling (recomputed from v_hat)."""
        return v_hat * self.snr_scaling.scaling_grid(v_hat, nu_db, part)

    def _simulate_from_codewords(self, v: torch.Tensor, part: CheckerboardPartition,
                                 anchor_map: RateAllocationMap, nu_db: float | None,
                                 channel_cfg: ChannelConfig, n: int,
                                 generator: torch.Generator | None) -> torch.Tensor:
        acc = None
        for _ in range(n):
            stream = self.rate_matcher.match(v[0], anchor_map)
            received = self._channel_pass(stream, channel_cfg, nu_db, generator)
            v_hat = self.rate_matcher.dematch(received, anchor_map).unsqueeze(0)
            v_hat_dot = self._decode_codewords(v_hat, nu_db, part)
            decoded = self.decoder_anchor(part.select(v_hat_dot, anchors=True))
            acc = decoded if acc is None else acc + decoded
        return part.select(acc / n, anchors=True)

    def simulate_anchor_decode(self, y: torch.Tensor, part: CheckerboardPartition,
                               anchor_map: RateAllocationMap, nu_db: float | None,
                               channel_cfg: ChannelConfig, n: int,
                               generator: torch.Generator | None) -> torch.Tensor:
        """Transmitter-local estimate of the receiver's anchor reconstruction.

        Averages n independent channel realizations of the anchor branch;
        gradients flow through every realization.
        """
        if n < 1:
            raise ValueError(f"need at least one realization, got {n}")
        v_dot = self.encoder_anchor(part.select(y, anchors=True))
        v, _ = self._apply_snr(v_dot, nu_db, part)
        return self._simulate_from_codewords(v, part, anchor_map, nu_db,
                                             channel_cfg, n, generator)

    def _apply_snr(self, v_dot: torch.Tensor, nu_db: float | None,
                   part: CheckerboardPartition) -> tuple[torch.Tensor, torch.Tensor]:
        q_snr = self.snr_scaling.scaling_grid(v_dot, nu_db, part)
        return v_dot / q_snr, q_snr

    # -- full pipeline -----------------------------------------------------

    def pipeline_from_latents(self, y: torch.Tensor, lam: float, eta, nu_db: float | None,
                              channel_cfg: ChannelConfig, n_sim: int,
                              generator: torch.Generator | None = None,
                              training: bool | None = None,
                              include_z_rate: bool = False,
                              rate_map_override: RateAllocationMap | None = None) -> dict:
        """Runs everything downstream of the scaled latents y (B, C, h, w).

        eta may be a scalar or an (h, w) grid of per-position bandwidth
        factors. rate_map_override pins the bandwidth map (shared by every
        batch item), which keeps the graph free of quantizer decisions for
        fixed-rate experiments and gradient diagnostics. Returns unclamped
        reconstructions plus the quantities the loss and accounting need.
        """
        if training is None:
            training = self.training
        b, _, h, w = y.shape
        part = self.partition(h, w)
        arch = self.arch

        z = self.entropy.hyper_analysis(y)
        hyper_feats = self.entropy.hyper_synthesis(z, (h, w))

        z_bits = None
        if include_z_rate:
            z_noisy = add_uniform_noise(z, training, generator)
            z_bits = (-torch.log2(self.entropy.factorized.likelihood(z_noisy))).sum(dim=(1, 2, 3))

        if not bool(torch.isfinite(hyper_feats).all()):
            raise RuntimeError("non-finite entropy parameters; model state is broken")

        if not arch.use_context:
            mu, sigma = self.entropy.split_params(hyper_feats)
            likelihood = gaussian_likelihood(y, mu, sigma)
            v_dot = self.encoder_anchor(y)
        else:
            # Anchor pass: parameters from the hyper path alone.
            mu_a, sigma_a = self.entropy.split_params(hyper_feats)
            lik_anchor = gaussian_likelihood(y, mu_a, sigma_a)
            anchor_ctx = part.select(y, anchors=True)
            v_dot_a = self.encoder_anchor(anchor_ctx)
            v_a, _ = self._apply_snr(v_dot_a, nu_db, part)
            sim_ctx = []
            for i in range(b):
                if rate_map_override is not None:
                    amap = RateAllocationMap(kbar=rate_map_override.kbar.clone(),
                                             q=rate_map_override.q)
                else:
                    amap = compute_rate_allocation(
                        lik_anchor[i].detach(), eta, arch.sideinfo_bits,
                        arch.quantizer_variant)
                amap.kbar *= part.anchor_mask.long()
                sim_ctx.append(self._simulate_from_codewords(
                    v_a[i:i + 1], part, amap, nu_db, channel_cfg, n_sim, generator))
            y_prime = torch.cat(sim_ctx, dim=0)
            ctx_source = y_prime if arch.context_input == "simulated" else anchor_ctx

            mu, sigma = self.entropy.params(hyper_feats, ctx_source, part)
            likelihood = gaussian_likelihood(y, mu, sigma)

            v_dot_na = self.encoder_nonanchor(part.select(y, anchors=False), ctx_source)
            v_dot = part.merge(v_dot_a, v_dot_na)

        v, q_snr = self._apply_snr(v_dot, nu_db, part)

        rate_maps, v_hat_list, symbols = [], [], []
        for i in range(b):
            if rate_map_override is not None:
                rmap = RateAllocationMap(kbar=rate_map_override.kbar.clone(),
                                         q=rate_map_override.q)
            else:
                rmap = compute_rate_allocation(
                    likelihood[i].detach(), eta, arch.sideinfo_bits,
                    arch.quantizer_variant)
            stream = self.rate_matcher.match(v[i], rmap)
            received = self._channel_pass(stream, channel_cfg, nu_db, generator)
            v_hat_list.append(self.rate_matcher.dematch(received, rmap))
            rate_maps.append(rmap)
            symbols.append(rmap.total_symbols)
        v_hat = torch.stack(v_hat_list, dim=0)

        v_hat_dot = self._decode_codewords(v_hat, nu_db, part)
        if not arch.use_context:
            y_hat = self.decoder_anchor(v_hat_dot)
        else:
            y_hat_a = part.select(self.decoder_anchor(part.select(v_hat_dot, anchors=True)),
                                  anchors=True)
            y_hat_na = self.decoder_nonanchor(part.select(v_hat_dot, anchors=False), y_hat_a)
            y_hat = part.merge(y_hat_a, y_hat_na)

        y_hat_dot = invert_rate_scaling(y_hat, lam, self.rate_scaling, part)
        x_hat = self.synthesis(y_hat_dot, clamp=not training)

        bits_grid = position_bits(likelihood)

        return {
            "x_hat": x_hat,
            "y_hat": y_hat,
            "likelihood": likelihood,
            "bits_grid": bits_grid,
            "bits": bits_grid.sum(dim=(1, 2)),
            "z_bits": z_bits,
            "rate_maps": rate_maps,
            "symbols": symbols,
            "v_dot": v_dot,
            "q_snr": q_snr,
            "partition": part,
            "mu": mu,
            "sigma": sigma,
        }

    def forward(self, x: torch.Tensor, lam: float, eta, nu_db: float | None,
                channel_cfg: ChannelConfig, n_sim: int = 1,
                generator: torch.Generator | None = None,
                training: bool | None = None,
                include_z_rate: bool = False,
                rate_map_override: RateAllocationMap | None = None) -> dict:
        if training is None:
            training = self.training
        y_dot = self.analysis(x)
        part = self.partition(*y_dot.shape[-2:])
        y = apply_rate_scaling(y_dot, lam, self.rate_scaling, part)
        out = self.pipeline_from_latents(
            y, lam, eta, nu_db, channel_cfg, n_sim, generator, training,
            include_z_rate, rate_map_override)
        out["y"] = y
        out["y_dot"] = y_dot
        return out

    # -- single-image inference --------------------------------------------

    @torch.no_grad()
    def transmit_image(self, x: torch.Tensor, lam: float, eta, nu_db: float | None,
                       channel_cfg: ChannelConfig, n_sim: int = 4,
                       generator: torch.Generator | None = None,
                       sideinfo_bits_per_symbol: float = 2.667,
                       y_override: torch.Tensor | None = None) -> TransmissionResult:
        """Full deterministic-given-seed pass over one (1, 3, H, W) image."""
        if x.dim() != 4 or x.shape[0] != 1:
            raise ValueError("transmit_image expects a single NCHW image")
        self.eval()
        if y_override is None:
            y_dot = self.analysis(x)
            part = self.partition(*y_dot.shape[-2:])
            y = apply_rate_scaling(y_dot, lam, self.rate_scaling, part)
        else:
            y = y_override
        out = self.pipeline_from_latents(
            y, lam, eta, nu_db, channel_cfg, n_sim, generator, training=False)
        rmap = out["rate_maps"][0]
        packet = serialize_rate_map(rmap, sideinfo_bits_per_symbol)
        rmap.sideinfo_cost_symbols = packet.cost_symbols
        k = rmap.total_symbols
        m = x.shape[-1] * x.shape[-2] * 3
        stream = self.rate_matcher.match(
            (out["v_dot"] / out["q_snr"])[0], rmap)
        return TransmissionResult(
            x_hat=out["x_hat"],
            rate_map=rmap,
            sideinfo=packet,
            stream=stream,
            k_symbols=k,
            rho=(k + packet.cost_symbols) / m,
            lam=lam,
            eta=eta if not torch.is_tensor(eta) else float(torch.as_tensor(eta).mean()),
            nu_db=nu_db,
            extras={"bits": float(out["bits"][0]), "y": y},
        )


def build_model(cfg: RunConfig) -> NTSCCModel:
    return NTSCCModel(cfg.arch, cfg.rate)
