"""Training configuration and the flat JSON config file format.

A config file is one JSON object. Keys may be any ``TrainConfig`` or
``DataConfig`` field; anything else is rejected. Missing keys take defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .synthetic import DataConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-5
    warmup_epochs: int = 10
    decay_epochs: tuple = (40, 70)
    decay_lrs: tuple = (3.5e-5, 3.5e-6)
    weight_decay: float = 5e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    margin: float = 0.3
    gamma_part: float = 0.35
    visibility_threshold: float = 0.5
    smoothing: float = 0.1
    n_ids: int = 8
    n_per_id: int = 4
    random_erasing_prob: float = 0.5
    crop_pad: int = 4  # pixels; multiple of the feature stride, 0 disables
    seed: int = 0
    eval_every: int = 10
    # architecture
    num_parts: int = 6
    feat_channels: int = 256
    mid_channels: int = 128
    embed_dim: int = 128
    gate_kernel: int = 3
    encoder_widths: tuple = (32, 64, 128)
    # ablation switches
    use_part_attention: bool = True
    use_focuser: bool = True
    single_stage_predictor: bool = False
    triplet_mode: str = "part"  # "part" | "global"
    mining: str = "anchor"  # "anchor" | "per_part"

    def __post_init__(self):
        for name in ("decay_epochs", "decay_lrs", "adam_betas", "encoder_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        d1, d2 = self.decay_epochs
        if not self.warmup_epochs < d1 < d2 <= self.epochs:
            raise ValueError("need warmup_epochs < first decay epoch < second decay epoch <= epochs")
        if self.warmup_epochs < 2:
            raise ValueError("warmup_epochs must be at least 2")
        if self.triplet_mode not in ("part", "global"):
            raise ValueError(f"unknown triplet_mode {self.triplet_mode!r}")
        if self.mining not in ("anchor", "per_part"):
            raise ValueError(f"unknown mining {self.mining!r}")

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_DATA_KEYS = {f.name for f in fields(DataConfig)}


def split_config(raw: dict) -> tuple[DataConfig, TrainConfig]:
    unknown = set(raw) - _TRAIN_KEYS - _DATA_KEYS - {"data_seed"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    # "seed" belongs to training; the dataset takes "data_seed"
    data = {k: v for k, v in raw.items() if k in _DATA_KEYS and k != "seed"}
    if "data_seed" in raw:
        data["seed"] = raw["data_seed"]
    train = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    return DataConfig(**data), TrainConfig(**train)


def load_config(path) -> tuple[DataConfig, TrainConfig]:
    return split_config(json.loads(Path(path).read_text()))


def config_to_dict(data: DataConfig, train: TrainConfig) -> dict:
    out = {k: v for k, v in asdict(data).items() if k != "seed"}
    out["data_seed"] = data.seed
    out.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(train).items()})
    return out


def save_config(path, data: DataConfig, train: TrainConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(data, train), indent=2, sort_keys=True))


DESK_DATA = DataConfig(seed=0, n_train_ids=20, n_eval_ids=10, samples_per_id=8)
# 30-epoch desk schedule: the 120-epoch shape compressed, learning rates x10 for a from-scratch encoder
DESK_TRAIN = TrainConfig(
    epochs=30, warmup_epochs=3, decay_epochs=(20, 26), eval_every=10,
    base_lr=3.5e-3, warmup_start_lr=3.5e-4, decay_lrs=(3.5e-4, 3.5e-5), crop_pad=0,
)
