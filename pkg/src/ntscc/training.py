"""Rate-distortion objective and the versatile training schedule."""

from __future__ import annotations

import csv
from pathlib import Path

import torch

from .config import RunConfig
from .data import DatasetHandle
from .model import NTSCCModel

# The rate term is bits per source dimension times the bandwidth factor,
# i.e. the pre-quantization CBR estimate; distortion is MSE on [0, 1]
# pixels times a configurable scale (1.0 balances the published lambda
# grid at desk scale, 255**2 is the full-scale pairing).
DISTORTION_SCALE = 1.0


def rd_loss(x: torch.Tensor, x_hat: torch.Tensor, bits_grid: torch.Tensor,
            lam: float, eta, z_bits: torch.Tensor | None = None,
            distortion_scale: float = DISTORTION_SCALE) -> dict:
    """Lagrangian tradeoff between channel bandwidth cost and distortion.

    bits_grid: (B, h, w) per-position entropy totals over the C channels,
    identical to the quantity the bandwidth allocator consumes before
    quantization. eta is a scalar or an (h, w) per-position grid.
    Returns the scalar loss plus its components; zero distortion with
    zero-entropy latents gives exactly zero.
    """
    m = float(x.shape[-3] * x.shape[-2] * x.shape[-1])
    eta_t = torch.as_tensor(eta, dtype=bits_grid.dtype)
    rate_symbols = (eta_t * bits_grid).sum(dim=(1, 2))
    if z_bits is not None:
        rate_symbols = rate_symbols + float(eta_t.mean()) * z_bits
    mse = ((x - x_hat) ** 2).mean(dim=(1, 2, 3))
    loss = rate_symbols / m + lam * distortion_scale * mse
    return {
        "loss": loss.mean(),
        "rate_bits": bits_grid.sum(dim=(1, 2)).mean(),
        "rate_symbols": rate_symbols.mean(),
        "mse": mse.mean(),
    }


def sample_hparams(cfg: RunConfig, generator: torch.Generator) -> tuple[float, float, float]:
    """Draw (lambda, eta, nu): lambda uniform over the grid, the rest continuous."""
    grid = cfg.rate.lambda_grid
    idx = int(torch.randint(len(grid), (1,), generator=generator))
    lam = grid[idx]
    lo, hi = cfg.rate.eta_range
    eta = lo + (hi - lo) * float(torch.rand(1, generator=generator))
    slo, shi = cfg.rate.snr_range_db
    nu = slo + (shi - slo) * float(torch.rand(1, generator=generator))
    return lam, eta, nu


def train_step(model: NTSCCModel, batch: torch.Tensor, lam: float, eta: float,
               nu_db: float, cfg: RunConfig, optimizer: torch.optim.Optimizer,
               generator: torch.Generator | None = None) -> dict:
    """One gradient step through the full end-to-end graph."""
    model.train()
    out = model(batch, lam, eta, nu_db, cfg.channel, n_sim=cfg.train.n_sim_train,
                generator=generator, training=True, include_z_rate=cfg.include_z_rate)
    losses = rd_loss(batch, out["x_hat"], out["bits_grid"], lam, eta, out["z_bits"],
                     distortion_scale=cfg.distortion_scale)
    loss = losses["loss"]
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss: loss={float(loss.detach())}, "
            f"mse={float(losses['mse'].detach())}, "
            f"rate_bits={float(losses['rate_bits'].detach())}, "
            f"lam={lam}, eta={eta}, nu={nu_db}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {
        "loss": float(loss.detach()),
        "rate_bits": float(losses["rate_bits"].detach()),
        "mse": float(losses["mse"].detach()),
        "lambda": lam,
        "eta": eta,
        "nu_db": nu_db,
    }


class MetricsLog:
    """Append-only CSV of per-iteration training metrics."""

    FIELDS = ["iteration", "loss", "rate_bits", "mse", "lambda", "eta", "nu_db"]

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, iteration: int, metrics: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [iteration] + [metrics[k] for k in self.FIELDS[1:]])


def _lr_for(it: int, cfg: RunConfig) -> float:
    switch = int(cfg.train.iterations * (1.0 - cfg.train.lr_final_frac))
    return cfg.train.lr if it < switch else cfg.train.lr_final


def train_loop(model: NTSCCModel, cfg: RunConfig, dataset: DatasetHandle,
               out_dir: str | Path, start_iteration: int = 0,
               optimizer: torch.optim.Optimizer | None = None,
               rng_states: dict | None = None,
               progress: bool = False) -> dict:
    """Run cfg.train.iterations optimizer steps and log metrics.

    Non-versatile runs hold (lambda0, eta0, snr0) fixed; versatile runs
    resample the triple every iteration. All randomness flows from
    generators seeded by cfg.train.seed; their states travel with the
    checkpoint, so a resumed run continues exactly where it stopped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out_dir / "metrics.csv")
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    if cfg.train.freeze_transforms:
        for p in list(model.analysis.parameters()) + list(model.synthesis.parameters()):
            p.requires_grad_(False)

    data_gen = torch.Generator().manual_seed(cfg.train.seed * 3 + 1)
    hparam_gen = torch.Generator().manual_seed(cfg.train.seed * 3 + 2)
    channel_gen = torch.Generator().manual_seed(cfg.train.seed * 3 + 3)
    if rng_states:
        data_gen.set_state(rng_states["data"])
        hparam_gen.set_state(rng_states["hparam"])
        channel_gen.set_state(rng_states["channel"])

    last = {}
    for it in range(start_iteration, cfg.train.iterations):
        for group in optimizer.param_groups:
            group["lr"] = _lr_for(it, cfg)
        batch = dataset.sample_batch(cfg.train.batch_size, cfg.train.crop_size, data_gen)
        if cfg.train.versatile:
            lam, eta, nu = sample_hparams(cfg, hparam_gen)
        else:
            lam, eta, nu = cfg.rate.lambda0, cfg.rate.eta0, cfg.rate.snr0_db
        last = train_step(model, batch, lam, eta, nu, cfg, optimizer, channel_gen)
        if it % cfg.train.log_every == 0 or it == cfg.train.iterations - 1:
            log.append(it, last)
            if progress:
                print(f"iter {it}: loss={last['loss']:.4f} "
                      f"rate_bits={last['rate_bits']:.1f} mse={last['mse']:.5f}")
    return {
        "iteration": cfg.train.iterations,
        "last": last,
        "optimizer": optimizer,
        "rng_states": {
            "data": data_gen.get_state(),
            "hparam": hparam_gen.get_state(),
            "channel": channel_gen.get_state(),
        },
    }
