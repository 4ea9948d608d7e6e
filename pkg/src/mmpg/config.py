"""Flat run configuration shared by the harness and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigInvalid
from .model import ModelConfig

_RENAMES = {"lambda": "lam"}


@dataclass
class RunConfig:
    # model
    d_model: int = 64
    L_enc: int = 2
    L_exp: int = 1
    M: int = 10
    K: int = 4
    n_classes: int = 4
    lam: float = 0.1
    lb_coeff: float = 0.01
    multi_label: bool = False
    expert_input: str = "encoder"
    lb_mode: str = "importance"
    init_gain: float = 1.0
    # graphs
    tau: float = -1.0
    k: int = 20
    r: float = 4.0
    table_path: str | None = None
    table_seed: int = 0
    # data
    dataset_path: str | None = None
    structures_per_class: int = 40
    min_len: int = 30
    max_len: int = 50
    data_seed: int = 0
    # optimisation
    seed: int = 0
    split_seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # io
    output_dir: str = "runs/default"
    deterministic: bool = True

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigInvalid("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigInvalid("lr, weight_decay must be >= 0 and momentum in [0, 1)")
        if self.r <= 0:
            raise ConfigInvalid("radius r must be positive")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ConfigInvalid("need 2 <= min_len <= max_len")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = {_RENAMES.get(k, k): v for k, v in d.items()}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f"unknown config keys {sorted(unknown)}")
        for key in ("tau",):
            if isinstance(d.get(key), str):
                d[key] = float(d[key])
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: {exc}") from None
