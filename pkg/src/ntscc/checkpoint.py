"""Self-describing versioned checkpoints.

A checkpoint is a single archive holding the resolved run configuration,
the full parameter dictionary keyed by module path, the training
iteration, and optionally the optimizer and RNG states needed to resume.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .config import RunConfig, config_from_dict, config_to_dict
from .errors import StreamFormatError
from .model import NTSCCModel, build_model

FORMAT_VERSION = 1
KIND = "ntscc-checkpoint"


def save_checkpoint(path: str | Path, model: NTSCCModel, cfg: RunConfig,
                    iteration: int = 0, optimizer: torch.optim.Optimizer | None = None,
                    rng_states: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": KIND,
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "state_dict": model.state_dict(),
        "iteration": int(iteration),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "rng_states": rng_states,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[NTSCCModel, RunConfig, dict]:
    """Rebuild the model from a checkpoint; rejects malformed archives."""
    path = Path(path)
    if not path.exists():
        raise StreamFormatError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise StreamFormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != KIND:
        raise StreamFormatError(f"{path} is not a recognized checkpoint")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise StreamFormatError(f"unsupported checkpoint format version {version}")
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    meta = {
        "iteration": payload.get("iteration", 0),
        "optimizer_state": payload.get("optimizer_state"),
        "rng_states": payload.get("rng_states"),
    }
    return model, cfg, meta
