"""Shared fixtures: micro architectures, toy corpora, cached trained models.

Trained fixtures are expensive, so they are built once per configuration
and cached as checkpoints under tests/_cache. Deleting that directory
forces retraining. Budgets scale up to the full desk-scale schedule when
NTSCC_ACCEPT_FULL=1 is set.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest
import torch

from ntscc.checkpoint import load_checkpoint, save_checkpoint
from ntscc.config import ArchConfig, RunConfig, TrainConfig
from ntscc.data import DatasetHandle, synthesize_toy_corpus
from ntscc.model import NTSCCModel, build_model
from ntscc.training import rd_loss, train_loop

CACHE_DIR = Path(__file__).parent / "_cache"
FULL = os.environ.get("NTSCC_ACCEPT_FULL", "0") == "1"

BASE_ITERS = 20000 if FULL else int(os.environ.get("NTSCC_TEST_ITERS", "700"))
VERSATILE_ITERS = 20000 if FULL else int(os.environ.get("NTSCC_TEST_VERSATILE_ITERS", "350"))
CROP = 48 if FULL else 32
BATCH = 8 if FULL else 4
CORPUS_IMAGES = 200 if FULL else 24
EVAL_IMAGES = 10


def micro_arch(**overrides) -> ArchConfig:
    """Smallest architecture that exercises every code path."""
    kwargs = dict(
        stage_channels=12, bottleneck=16, blocks_per_stage=(1, 1, 1, 1),
        window_transform=2, window_entropy=2, hyper_channels=8,
        jscc_width=12, jscc_window=2, jscc_blocks_context=1,
        jscc_blocks_plain=1, d_max=16, sideinfo_bits=3,
    )
    kwargs.update(overrides)
    return ArchConfig(**kwargs)


def micro_config(**arch_overrides) -> RunConfig:
    cfg = RunConfig(arch=micro_arch(**arch_overrides))
    cfg.train = TrainConfig(iterations=BASE_ITERS, batch_size=BATCH,
                            crop_size=CROP, seed=0, log_every=100)
    return cfg


def fresh_model(cfg: RunConfig, seed: int = 0) -> NTSCCModel:
    torch.manual_seed(seed)
    return build_model(cfg)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus")
    synthesize_toy_corpus(root / "train", n_images=CORPUS_IMAGES, size=64, seed=1)
    synthesize_toy_corpus(root / "eval", n_images=EVAL_IMAGES, size=64, seed=2)
    return root


@pytest.fixture(scope="session")
def train_set(corpus_dir) -> DatasetHandle:
    return DatasetHandle(corpus_dir / "train")


@pytest.fixture(scope="session")
def eval_set(corpus_dir) -> DatasetHandle:
    return DatasetHandle(corpus_dir / "eval")


def train_or_load(name: str, cfg: RunConfig, dataset: DatasetHandle,
                  base_model: NTSCCModel | None = None) -> NTSCCModel:
    """Train a fixture model once and reuse the cached checkpoint afterwards."""
    CACHE_DIR.mkdir(exist_ok=True)
    tag = (f"{name}_i{cfg.train.iterations}_c{cfg.train.crop_size}"
           f"_b{cfg.train.batch_size}_d{cfg.distortion_scale:g}")
    path = CACHE_DIR / f"{tag}.pt"
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return model
    if base_model is not None:
        import copy

        model = copy.deepcopy(base_model)
    else:
        model = fresh_model(cfg, cfg.train.seed)
    state = train_loop(model, cfg, dataset, CACHE_DIR / f"{tag}_logs")
    save_checkpoint(path, model, cfg, state["iteration"])
    return model


def contextual_cfg(seed: int) -> RunConfig:
    cfg = micro_config()
    cfg.train.seed = seed
    return cfg


def ablation_cfg(seed: int) -> RunConfig:
    cfg = micro_config(use_context=False)
    cfg.train.seed = seed
    return cfg


def versatile_cfg(seed: int) -> RunConfig:
    cfg = micro_config()
    cfg.train.seed = seed + 500
    cfg.train.iterations = VERSATILE_ITERS
    cfg.train.versatile = True
    return cfg


SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def ctx_models(train_set) -> list[NTSCCModel]:
    """Contextual models trained at the base point, one per seed."""
    return [train_or_load(f"ctx_s{s}", contextual_cfg(s), train_set) for s in SEEDS]


@pytest.fixture(scope="session")
def abl_models(train_set) -> list[NTSCCModel]:
    """Non-contextual ablations paired with ctx_models seed for seed."""
    return [train_or_load(f"abl_s{s}", ablation_cfg(s), train_set) for s in SEEDS]


@pytest.fixture(scope="session")
def versatile_models(ctx_models, train_set) -> list[NTSCCModel]:
    """Versatile finetunes of each contextual base."""
    return [
        train_or_load(f"versatile_s{s}", versatile_cfg(s), train_set, base_model=m)
        for s, m in zip(SEEDS, ctx_models)
    ]


@pytest.fixture(scope="session")
def trained_ctx(train_set) -> NTSCCModel:
    """Contextual model trained at the base (lambda0, eta0, snr0) point."""
    return train_or_load("ctx_s0", contextual_cfg(0), train_set)


@pytest.fixture(scope="session")
def trained_versatile(trained_ctx, train_set) -> NTSCCModel:
    """Versatile finetune of the seed-0 contextual model."""
    return train_or_load("versatile_s0", versatile_cfg(0), train_set,
                         base_model=trained_ctx)


def validation_rd_loss(model: NTSCCModel, dataset: DatasetHandle, cfg: RunConfig,
                       lam: float, eta: float, nu_db: float, seed: int = 0,
                       max_images: int | None = None) -> float:
    """Mean instant RD loss over held-out images with seeded channel noise."""
    model.eval()
    n = len(dataset) if max_images is None else min(max_images, len(dataset))
    total = 0.0
    with torch.no_grad():
        for idx in range(n):
            x = dataset.eval_image(idx).unsqueeze(0)
            gen = torch.Generator().manual_seed(seed * 9973 + idx)
            out = model(x, lam, eta, nu_db, cfg.channel, n_sim=cfg.n_sim_eval,
                        generator=gen, training=False)
            total += float(rd_loss(x, out["x_hat"], out["bits_grid"], lam, eta,
                                   distortion_scale=cfg.distortion_scale)["loss"])
    return total / n
