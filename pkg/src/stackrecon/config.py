"""Run configuration shared by the trainer, refinement, and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from .field import FieldConfig


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 4096
    psf_samples: int = 256
    lr: float = 1e-3
    lam: float = 20.0
    lambda_v: float = 2.0
    lambda_b: float = 100.0
    alpha0: float = 1e-3
    t: int = 10
    seed: int = 0
    huber_delta: float = 1.0
    grad_clip: float = 10.0
    log_stride: int = 1
    refine_transforms: bool = False
    transform_lr: float = 1e-4
    levels: int = 16
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.382
    table_exp: int = 19
    low_levels: int = 4
    feat_dim: int = 15
    embed_dim: int = 16
    coord_branch: bool = True
    var_bias_init: float = -5.0
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_iters: int = 1000
    noise_batch: int = 4096
    noise_lr: float = 1e-3
    checkpoint_every: int = 0

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            levels=self.levels, features=self.features,
            base_resolution=self.base_resolution, growth=self.growth,
            table_exp=self.table_exp, low_levels=self.low_levels,
            feat_dim=self.feat_dim, embed_dim=self.embed_dim,
            coord_branch=self.coord_branch,
            var_bias_init=self.var_bias_init)


# JSON key -> dataclass field; "lambda" is a Python keyword so it maps to lam
_KEY_MAP = {"lambda": "lam"}
_INT_KEYS = {"iterations", "batch_size", "psf_samples", "t", "seed",
             "log_stride", "levels", "features", "base_resolution",
             "table_exp", "low_levels", "feat_dim", "embed_dim",
             "noise_iters", "noise_batch", "checkpoint_every"}
_BOOL_KEYS = {"refine_transforms", "coord_branch"}


def config_from_dict(doc: dict) -> TrainConfig:
    """Validate a config mapping; unknown keys and bad types are errors."""
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    out = {}
    for key, value in doc.items():
        name = _KEY_MAP.get(key, key)
        if name not in known:
            raise ValueError(f"unknown config key {key!r}")
        if name in _BOOL_KEYS:
            if not isinstance(value, bool):
                raise ValueError(f"config key {key!r} must be a boolean")
            out[name] = value
        elif name in _INT_KEYS:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"config key {key!r} must be an integer")
            out[name] = value
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"config key {key!r} must be a number")
            out[name] = float(value)
    return TrainConfig(**out)
