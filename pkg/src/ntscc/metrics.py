"""Metrics, sweeps, and diagnostics: PSNR, CBR, BD-rate, RD surfaces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import DatasetHandle
from .errors import ConfigError
from .model import NTSCCModel

PSNR_CAP_DB = 100.0


def psnr(x: torch.Tensor, x_hat: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    """10 log10(1 / MSE) on [0, 1] pixels; identical inputs report the cap.

    An optional (H, W) mask restricts the error average to a region.
    """
    err = (x.double() - x_hat.double()) ** 2
    if mask is not None:
        m = mask.double()
        while m.dim() < err.dim():
            m = m.unsqueeze(0)
        denom = float((m.expand_as(err)).sum())
        if denom == 0:
            raise ValueError("mask selects no pixels")
        mse = float((err * m).sum() / denom)
    else:
        mse = float(err.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def cbr(k_symbols: int, sideinfo_symbols: int, image_hw: tuple[int, int]) -> float:
    """Channel bandwidth ratio: complex channel uses per source dimension."""
    m = image_hw[0] * image_hw[1] * 3
    return (k_symbols + sideinfo_symbols) / m


@dataclass
class RDPoint:
    rho: float
    psnr_db: float
    nu_db: float | None
    lam: float
    eta: float
    image_id: str = ""
    sideinfo_frac: float = 0.0


@dataclass
class RDCurve:
    """Ordered operating points at a fixed channel SNR."""

    points: list[RDPoint]

    def __post_init__(self):
        if len(self.points) < 4:
            raise ConfigError("an RD curve needs at least 4 points")
        rhos = [p.rho for p in self.points]
        if any(b <= a for a, b in zip(rhos, rhos[1:])):
            raise ConfigError("RD curve rho values must be strictly increasing")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rho for p in self.points], dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points], dtype=np.float64)


def bd_rate(anchor: RDCurve, test: RDCurve, piecewise: bool = False) -> float:
    """Average rate difference of test against anchor, in percent.

    Negative values mean the test curve saves bandwidth. Uses the classic
    cubic fit of log-rate against quality; `piecewise` switches to the
    monotone piecewise-cubic variant.
    """
    log_anchor = np.log(anchor.rates)
    log_test = np.log(test.rates)
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if hi <= lo:
        raise ConfigError(f"quality ranges do not overlap: [{lo}, {hi}]")
    if piecewise:
        from scipy import interpolate

        samples, step = np.linspace(lo, hi, num=100, retstep=True)
        va = interpolate.pchip_interpolate(np.sort(anchor.qualities),
                                           log_anchor[np.argsort(anchor.qualities)], samples)
        vt = interpolate.pchip_interpolate(np.sort(test.qualities),
                                           log_test[np.argsort(test.qualities)], samples)
        int_anchor = np.trapezoid(va, dx=step)
        int_test = np.trapezoid(vt, dx=step)
    else:
        poly_anchor = np.polyint(np.polyfit(anchor.qualities, log_anchor, 3))
        poly_test = np.polyint(np.polyfit(test.qualities, log_test, 3))
        int_anchor = np.polyval(poly_anchor, hi) - np.polyval(poly_anchor, lo)
        int_test = np.polyval(poly_test, hi) - np.polyval(poly_test, lo)
    avg_log_diff = (int_test - int_anchor) / (hi - lo)
    return float((math.exp(avg_log_diff) - 1.0) * 100.0)


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregate: dict
    config_echo: dict
    seed: int
    extras: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump({
                "per_image": self.per_image,
                "aggregate": self.aggregate,
                "config": self.config_echo,
                "seed": self.seed,
                "extras": self.extras,
            }, fh, indent=2)


def evaluate_point(model: NTSCCModel, dataset: DatasetHandle, lam: float, eta: float,
                   nu_db: float | None, cfg: RunConfig, seed: int = 0,
                   max_images: int | None = None, workers: int = 1) -> list[RDPoint]:
    """Transmit every eval image at one (lambda, eta, nu) operating point.

    With workers > 1 the images fan out over a thread pool; results are
    collected in dataset order so aggregation stays reproducible.
    """
    n = len(dataset) if max_images is None else min(max_images, len(dataset))

    def one(idx: int) -> RDPoint:
        x = dataset.eval_image(idx).unsqueeze(0)
        gen = torch.Generator().manual_seed(seed * 100003 + idx)
        res = model.transmit_image(
            x, lam, eta, nu_db, cfg.channel, cfg.n_sim_eval, gen,
            cfg.sideinfo_bits_per_symbol)
        total = res.k_symbols + res.sideinfo.cost_symbols
        return RDPoint(
            rho=res.rho,
            psnr_db=psnr(x[0], res.x_hat[0]),
            nu_db=nu_db,
            lam=lam,
            eta=eta,
            image_id=dataset.paths[idx].name,
            sideinfo_frac=res.sideinfo.cost_symbols / total if total else 0.0,
        )

    if workers <= 1:
        return [one(i) for i in range(n)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n)))


def rd_sweep(model: NTSCCModel, dataset: DatasetHandle, lambdas, nus, cfg: RunConfig,
             eta: float | None = None, seed: int = 0, out_dir: str | Path | None = None,
             max_images: int | None = None, plot: bool = True, workers: int = 1) -> dict:
    """Rate-SNR-distortion surface over a lambda x SNR grid.

    Returns per-point records and the |lambdas| x |nus| aggregated surface;
    optionally writes rd_points.csv, surface.csv, and a vector plot.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    eta = cfg.rate.eta0 if eta is None else eta
    all_points: list[RDPoint] = []
    surface = []
    for lam in lambdas:
        for nu in nus:
            pts = evaluate_point(model, dataset, lam, eta, nu, cfg, seed,
                                 max_images, workers)
            all_points.extend(pts)
            surface.append({
                "lambda": lam,
                "nu_db": nu,
                "eta": eta,
                "mean_rho": float(np.mean([p.rho for p in pts])),
                "mean_psnr_db": float(np.mean([p.psnr_db for p in pts])),
                "mean_sideinfo_frac": float(np.mean([p.sideinfo_frac for p in pts])),
            })
    result = {"points": all_points, "surface": surface}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "rd_points.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "lambda", "eta", "snr_db", "rho",
                             "psnr_db", "sideinfo_frac"])
            for p in all_points:
                writer.writerow([p.image_id, p.lam, p.eta, p.nu_db, p.rho,
                                 p.psnr_db, p.sideinfo_frac])
        with open(out_dir / "surface.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(surface[0].keys()))
            writer.writeheader()
            writer.writerows(surface)
        if plot:
            _plot_surface(surface, out_dir / "surface.svg")
    return result


def _plot_surface(surface: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    nus = sorted({row["nu_db"] for row in surface})
    for nu in nus:
        rows = sorted((r for r in surface if r["nu_db"] == nu), key=lambda r: r["mean_rho"])
        ax.plot([r["mean_rho"] for r in rows], [r["mean_psnr_db"] for r in rows],
                marker="o", label=f"SNR {nu} dB")
    ax.set_xlabel("CBR")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def flat_cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity between two flattened tensors."""
    av = a.double().flatten()
    bv = b.double().flatten()
    denom = float(av.norm() * bv.norm())
    if denom == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(av.dot(bv) / denom)


def extract_probe(model: NTSCCModel, x: torch.Tensor, probe: str, lam: float,
                  eta: float, cfg: RunConfig, seed: int = 0) -> torch.Tensor:
    """Per-image diagnostic tensor: raw latents or unmatched codewords.

    The codeword probe runs the encoder over a noiseless channel so the
    extraction is deterministic and model-comparable.
    """
    model.eval()
    with torch.no_grad():
        if probe == "latent":
            return model.analysis(x)
        if probe == "codeword":
            out = model(x, lam, eta, None, cfg.channel, n_sim=1,
                        generator=torch.Generator().manual_seed(seed), training=False)
            return out["v_dot"]
    raise ConfigError(f"unknown probe kind: {probe}")


def cosine_similarity_diag(models: list[NTSCCModel], dataset: DatasetHandle,
                           probe: str, lam: float, eta: float, cfg: RunConfig,
                           seed: int = 0, max_images: int | None = None) -> np.ndarray:
    """Averaged pairwise cosine similarity matrix of per-image probes."""
    n = len(dataset) if max_images is None else min(max_images, len(dataset))
    if n == 0:
        raise ConfigError("empty dataset")
    sims = np.zeros((len(models), len(models)), dtype=np.float64)
    for idx in range(n):
        x = dataset.eval_image(idx).unsqueeze(0)
        probes = [extract_probe(m, x, probe, lam, eta, cfg, seed) for m in models]
        for i in range(len(models)):
            for j in range(len(models)):
                sims[i, j] += flat_cosine(probes[i], probes[j])
    return sims / n
