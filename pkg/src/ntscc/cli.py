"""Command-line surface tying the pipeline together.

Commands: train, transmit, adapt, sweep, bdrate, diag. Every flag can
also be supplied through an NTSCC_-prefixed environment variable, and
each run embeds its resolved configuration in the output directory.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import adapt as adapt_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict, load_config, save_config
from .data import DatasetHandle, load_image, save_image
from .errors import NTSCCError
from .metrics import RDCurve, RDPoint, bd_rate, cosine_similarity_diag, psnr, rd_sweep
from .model import build_model
from .training import train_loop

CONTEXT_SETTINGS = {"auto_envvar_prefix": "NTSCC", "show_default": True}


def _load_cfg(config_path: str | None) -> RunConfig:
    return load_config(config_path) if config_path else RunConfig()


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


@click.group(context_settings=CONTEXT_SETTINGS)
def main():
    """Variable-rate coded image transmission over simulated channels."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML run configuration.")
@click.option("--dataset", "dataset_path", type=click.Path(), default=None,
              help="Training image directory (overrides config).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--versatile/--no-versatile", default=None,
              help="Sample (lambda, eta, SNR) per iteration.")
@click.option("--resume", type=click.Path(), default=None,
              help="Checkpoint to continue from.")
@click.option("--base", "base_ckpt", type=click.Path(), default=None,
              help="Checkpoint whose weights seed a fresh (e.g. versatile) run.")
def train(config_path, dataset_path, out_dir, seed, iterations, versatile, resume, base_ckpt):
    """Train a model and write checkpoint plus metrics CSV."""
    cfg = _load_cfg(config_path)
    if dataset_path:
        cfg.train_dir = dataset_path
    if out_dir:
        cfg.out_dir = out_dir
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
    if iterations is not None:
        cfg.train.iterations = iterations
    if versatile is not None:
        cfg.train.versatile = versatile
    if not cfg.train_dir:
        raise click.ClickException("no training dataset configured (--dataset or train_dir)")

    dataset = DatasetHandle(cfg.train_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    start_iteration = 0
    optimizer = None
    rng_states = None
    if resume:
        model, ckpt_cfg, meta = load_checkpoint(resume)
        cfg.arch, cfg.rate = ckpt_cfg.arch, ckpt_cfg.rate
        start_iteration = meta["iteration"]
        rng_states = meta["rng_states"]
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
        if meta["optimizer_state"]:
            optimizer.load_state_dict(meta["optimizer_state"])
        click.echo(f"resuming at iteration {start_iteration}")
    elif base_ckpt:
        model, ckpt_cfg, _ = load_checkpoint(base_ckpt)
        cfg.arch, cfg.rate = ckpt_cfg.arch, ckpt_cfg.rate
    else:
        torch.manual_seed(cfg.train.seed)
        model = build_model(cfg)

    state = train_loop(model, cfg, dataset, out, start_iteration, optimizer,
                       rng_states, progress=True)
    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(ckpt_path, model, cfg, state["iteration"], state["optimizer"],
                    state["rng_states"])
    click.echo(f"checkpoint written to {ckpt_path}")


@main.command()
@click.argument("image", type=click.Path(exists=True))
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--lambda", "lam", type=float, default=0.72)
@click.option("--eta", type=float, default=0.2)
@click.option("--snr-db", type=float, default=10.0)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), default="runs/transmit")
def transmit(image, checkpoint, lam, eta, snr_db, seed, out_dir):
    """Single end-to-end pass: encode, channel, decode, report the RD point."""
    model, cfg, _ = load_checkpoint(checkpoint)
    x = load_image(image)
    from .data import center_crop_multiple

    x = center_crop_multiple(x, 64).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    res = model.transmit_image(x, lam, eta, snr_db, cfg.channel, cfg.n_sim_eval,
                               gen, cfg.sideinfo_bits_per_symbol)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(res.x_hat[0], out / "reconstruction.png")
    quality = psnr(x[0], res.x_hat[0])
    point = {
        "image": str(image), "lambda": lam, "eta": eta, "snr_db": snr_db,
        "seed": seed, "rho": res.rho, "psnr_db": quality,
        "k_symbols": res.k_symbols, "sideinfo_symbols": res.sideinfo.cost_symbols,
        "config": config_to_dict(cfg),
    }
    with open(out / "rd_point.json", "w") as fh:
        json.dump(point, fh, indent=2)
    click.echo(f"rho={res.rho:.6f} psnr={quality:.2f} dB "
               f"(k={res.k_symbols}, sideinfo={res.sideinfo.cost_symbols} symbols)")


@main.command(name="adapt")
@click.argument("image", type=click.Path(exists=True))
@click.argument("checkpoint", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["standard", "roi", "md"]), default="standard")
@click.option("--lambda", "lam", type=float, default=0.72)
@click.option("--eta", type=float, default=0.2)
@click.option("--snr-db", type=float, default=10.0)
@click.option("--roi-map", type=click.Path(), default=None,
              help="Grayscale PNG quality map (required for --mode roi).")
@click.option("--lambda-o", type=float, default=0.72, help="MD objective weight.")
@click.option("--lambda-s", type=float, default=1.0, help="MD subjective weight.")
@click.option("--steps", type=int, default=None, help="Override adaptation step budget.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), default="runs/adapt")
def adapt_cmd(image, checkpoint, mode, lam, eta, snr_db, roi_map, lambda_o, lambda_s,
              steps, seed, out_dir):
    """Per-image online latent and encoder editing."""
    model, cfg, _ = load_checkpoint(checkpoint)
    if steps is not None:
        cfg.adapt.t_max = steps
    x = load_image(image)
    from .data import center_crop_multiple

    x = center_crop_multiple(x, 64).unsqueeze(0)

    if mode == "standard":
        result = adapt_mod.adapt_standard(model, x, lam, eta, snr_db,
                                          cfg.adapt, cfg.channel, seed,
                                          distortion_scale=cfg.distortion_scale)
    elif mode == "roi":
        if not roi_map:
            raise click.ClickException("--mode roi requires --roi-map")
        qmap = adapt_mod.load_roi_map(roi_map, tuple(x.shape[-2:]))
        latent_hw = (x.shape[-2] // 16, x.shape[-1] // 16)
        roi = adapt_mod.ROISpec.from_mask(qmap, latent_hw)
        result = adapt_mod.adapt_roi(model, x, roi, lam, snr_db,
                                     cfg.adapt, cfg.channel, seed,
                                     distortion_scale=cfg.distortion_scale)
    else:
        weights = adapt_mod.MultiDistortionWeights(lambda_o, lambda_s)
        result = adapt_mod.adapt_multidistortion(model, x, weights, eta, snr_db,
                                                 cfg.adapt, cfg.channel, seed,
                                                 distortion_scale=cfg.distortion_scale)

    gen = torch.Generator().manual_seed(seed + 1)
    res = adapt_mod.transmit_adapted(model, result, cfg.channel, x,
                                     cfg.n_sim_eval, gen, cfg.sideinfo_bits_per_symbol)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(res.x_hat[0], out / "reconstruction.png")
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(enumerate(result.loss_trace))
    quality = psnr(x[0], res.x_hat[0])
    summary = {
        "mode": mode, "selected_step": result.selected_step,
        "initial_loss": result.initial_loss, "selected_loss": result.selected_loss,
        "rho": res.rho, "psnr_db": quality, "seed": seed,
        "config": config_to_dict(cfg),
    }
    with open(out / "adapt.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    click.echo(f"selected step {result.selected_step}: "
               f"loss {result.initial_loss:.4f} -> {result.selected_loss:.4f}, "
               f"rho={res.rho:.6f}, psnr={quality:.2f} dB")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--lambdas", default="0.013,0.0483,0.18,0.36,0.72")
@click.option("--nus", default="0,4,10")
@click.option("--eta", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--max-images", type=int, default=None)
@click.option("--workers", type=int, default=1)
@click.option("--out", "out_dir", type=click.Path(), default="runs/sweep")
def sweep(checkpoint, dataset, lambdas, nus, eta, seed, max_images, workers, out_dir):
    """Rate-SNR-distortion surface over a lambda x SNR grid."""
    model, cfg, _ = load_checkpoint(checkpoint)
    handle = DatasetHandle(dataset)
    result = rd_sweep(model, handle, _parse_floats(lambdas), _parse_floats(nus),
                      cfg, eta, seed, out_dir, max_images, workers=workers)
    save_config(cfg, Path(out_dir) / "config.yaml")
    click.echo(f"{len(result['points'])} points -> {out_dir}/rd_points.csv")
    for row in result["surface"]:
        click.echo(f"lambda={row['lambda']:<8} nu={row['nu_db']:<5} "
                   f"rho={row['mean_rho']:.6f} psnr={row['mean_psnr_db']:.2f} dB")


@main.command()
@click.argument("anchor_csv", type=click.Path(exists=True))
@click.argument("test_csv", type=click.Path(exists=True))
@click.option("--piecewise", is_flag=True, default=False)
def bdrate(anchor_csv, test_csv, piecewise):
    """BD-rate of a test RD curve against an anchor, in percent.

    Input CSVs need `rho` and `psnr_db` columns; rows are sorted by rho.
    """
    def read_curve(path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        pts = sorted(
            (RDPoint(rho=float(r["rho"]), psnr_db=float(r["psnr_db"]),
                     nu_db=None, lam=0.0, eta=0.0) for r in rows),
            key=lambda p: p.rho)
        return RDCurve(pts)

    value = bd_rate(read_curve(anchor_csv), read_curve(test_csv), piecewise)
    click.echo(f"{value:+.3f}%")


@main.command()
@click.argument("checkpoints", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--probe", type=click.Choice(["latent", "codeword"]), default="latent")
@click.option("--lambda", "lam", type=float, default=0.72)
@click.option("--eta", type=float, default=0.2)
@click.option("--max-images", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def diag(checkpoints, dataset, probe, lam, eta, max_images, out_dir):
    """Averaged cosine-similarity matrix between model probes."""
    loaded = [load_checkpoint(p) for p in checkpoints]
    models = [m for m, _, _ in loaded]
    cfg = loaded[0][1]
    handle = DatasetHandle(dataset)
    matrix = cosine_similarity_diag(models, handle, probe, lam, eta, cfg,
                                    max_images=max_images)
    for row in matrix:
        click.echo("  ".join(f"{v:.4f}" for v in row))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / f"cosine_{probe}.csv", matrix, delimiter=",", fmt="%.6f")


def run():
    try:
        main()
    except NTSCCError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    run()
