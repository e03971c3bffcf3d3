"""Run configuration: nested dataclasses with strict YAML (de)serialization.

Unknown keys are rejected so that a typo in a config file fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class ArchConfig:
    """Network shape knobs.

    Desk-scale defaults keep toy training in the minutes range; the
    full-size values (N=192, M=320, blocks (1,2,6,2)) stay reachable
    through configuration.
    """

    stage_channels: int = 48          # N, first three transform stages
    bottleneck: int = 80              # M, latent channel count C
    blocks_per_stage: tuple[int, ...] = (1, 1, 2, 1)
    window_transform: int = 7         # attention window for g_a / g_s
    window_entropy: int = 3           # attention window for hyper transforms
    mlp_ratio: float = 2.0
    head_channels: int = 16           # one attention head per this many channels
    hyper_channels: int = 48          # C_z
    jscc_width: int = 48
    jscc_window: int = 4
    jscc_blocks_context: int = 4      # contextual blocks in the non-anchor branch
    jscc_blocks_plain: int = 4        # plain blocks in the anchor branch
    d_max: int = 32                   # codeword dimension (real values per position)
    sideinfo_bits: int = 4            # q: bits per rate-map entry
    use_context: bool = True          # False = non-contextual ablation (single branch)
    context_input: str = "simulated"  # "simulated" | "raw" anchor feed for the context model
    quantizer_variant: str = "literal"  # "literal" | "max" low-rate branch

    def __post_init__(self):
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if len(self.blocks_per_stage) != 4:
            raise ConfigError("blocks_per_stage must list four stages")
        if self.d_max < 2 * (2 ** self.sideinfo_bits - 1):
            raise ConfigError(
                f"d_max={self.d_max} cannot carry the maximum quantized rate "
                f"{2 ** self.sideinfo_bits - 1}"
            )
        if self.context_input not in ("simulated", "raw"):
            raise ConfigError(f"unknown context_input: {self.context_input}")
        if self.quantizer_variant not in ("literal", "max"):
            raise ConfigError(f"unknown quantizer_variant: {self.quantizer_variant}")

    @property
    def max_rate(self) -> int:
        return 2 ** self.sideinfo_bits - 1


@dataclass
class ChannelConfig:
    kind: str = "awgn"                # "awgn" | "rayleigh_block"
    block_length: int = 256           # fading block length in complex symbols
    csi: str = "perfect"

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh_block"):
            raise ConfigError(f"unknown channel kind: {self.kind}")
        if self.block_length < 1:
            raise ConfigError("block_length must be >= 1")


@dataclass
class RateControl:
    """Operating-point grids shared by training and evaluation."""

    lambda_grid: tuple[float, ...] = (0.013, 0.0483, 0.18, 0.36, 0.72)
    eta_range: tuple[float, float] = (0.15, 0.3)
    snr_range_db: tuple[float, float] = (0.0, 14.0)
    snr_table_db: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0)  # 3 dB spacing
    lambda0: float = 0.72             # base operating point for non-versatile training
    eta0: float = 0.2
    snr0_db: float = 10.0

    def __post_init__(self):
        self.lambda_grid = tuple(self.lambda_grid)
        self.snr_table_db = tuple(self.snr_table_db)
        if any(l <= 0 for l in self.lambda_grid):
            raise ConfigError("lambda_grid entries must be positive")
        steps = [round(b - a, 9) for a, b in zip(self.snr_table_db, self.snr_table_db[1:])]
        if any(s != 3.0 for s in steps):
            raise ConfigError("snr_table_db must use 3 dB spacing")


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 8
    crop_size: int = 48
    lr: float = 1e-4
    lr_final: float = 1e-5
    lr_final_frac: float = 10.0 / 610.0  # tail fraction run at lr_final
    seed: int = 0
    versatile: bool = False           # sample (lambda, eta, snr) per iteration
    freeze_transforms: bool = False   # optionally freeze g_a/g_s during versatile finetuning
    n_sim_train: int = 1              # channel realizations for anchor simulation in training
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.crop_size < 16:
            raise ConfigError("iterations/batch_size/crop_size out of range")
        if self.crop_size % 16 != 0:
            raise ConfigError("crop_size must be a multiple of 16")


@dataclass
class AdaptConfig:
    t_max: int = 20
    lr_latent: float = 5e-3
    lr_encoder: float = 1e-4
    channel_samples: int = 1          # fresh channel draws per adaptation step

    def __post_init__(self):
        if self.t_max < 0 or self.channel_samples < 1:
            raise ConfigError("t_max must be >= 0 and channel_samples >= 1")


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    rate: RateControl = field(default_factory=RateControl)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train_dir: str = ""
    eval_dir: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    include_z_rate: bool = False      # add the factorized hyper-latent rate term
    n_sim_eval: int = 4               # channel realizations for anchor simulation at inference
    sideinfo_bits_per_symbol: float = 2.667  # spectral efficiency of the side-info link
    # Multiplier on the [0,1]-pixel MSE in the objective. 1.0 balances the
    # published lambda grid against per-dimension rate at desk scale;
    # 255**2 reproduces the full-scale pairing those lambdas ship with.
    distortion_scale: float = 1.0


_NESTED = {
    "arch": ArchConfig,
    "channel": ChannelConfig,
    "rate": RateControl,
    "train": TrainConfig,
    "adapt": AdaptConfig,
}


def _build(cls, data: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key)
        if sub is not None and cls is RunConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            kwargs[key] = _build(sub, value)
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return _build(RunConfig, data)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_listify(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return _listify(dataclasses.asdict(cfg))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
