"""Codec hyperparameters and their key-value file format.

The on-disk form is a single INI section::

    [dpcc]
    depth = 10
    enc_channels = 32, 64, 64
    lam = 4.0
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

__all__ = ["Config", "LAMBDA_POINTS", "load_config", "save_config", "toy_config"]

# operating points used for RD sweeps, multiplied by a per-dataset scale
LAMBDA_POINTS = (0.5, 1.0, 2.0, 4.0, 7.0, 10.0, 16.0)

_SECTION = "dpcc"


@dataclass
class Config:
    depth: int = 10
    enc_channels: Tuple[int, int, int] = (32, 64, 64)
    bottleneck: int = 8
    irb_blocks: int = 3
    predictor_hidden: int = 64
    prior_filters: Tuple[int, ...] = (3, 3, 3, 3)
    prior_init_scale: float = 3.0
    lam: float = 4.0
    bce_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    gop: int = 8
    steps: int = 2000
    blocks: int = 1
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.prior_filters = tuple(int(c) for c in self.prior_filters)
        self.bce_weights = tuple(float(w) for w in self.bce_weights)
        if len(self.enc_channels) != 3:
            raise ValueError("enc_channels needs three widths")
        if len(self.bce_weights) != 3:
            raise ValueError("bce_weights needs one weight per decoder scale")
        if not 4 <= self.depth <= 16:
            raise ValueError("depth must be in [4, 16] (three downsamplings plus octree)")
        if self.blocks < 1 or self.blocks & (self.blocks - 1):
            raise ValueError("blocks must be a power of two")

    @property
    def dec_channels(self) -> Tuple[int, int, int]:
        c0, c1, c2 = self.enc_channels
        return (c2, c1, c0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def toy_config(**changes) -> Config:
    """Narrow depth-6 model that trains on one CPU core in minutes."""
    base = Config(depth=6, enc_channels=(16, 32, 32), bottleneck=8, irb_blocks=1,
                  predictor_hidden=32, lam=10.0, steps=2000)
    return base.replace(**changes)


def _parse(value: str, default):
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(v.strip()) for v in value.split(",") if v.strip())
    return type(default)(value)


def load_config(path) -> Config:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if _SECTION not in parser:
        raise ValueError(f"{path}: missing [{_SECTION}] section")
    base = Config()
    values = {}
    for key, raw in parser[_SECTION].items():
        if not hasattr(base, key):
            raise ValueError(f"{path}: unknown key {key!r}")
        values[key] = _parse(raw, getattr(base, key))
    return Config(**values)


def save_config(cfg: Config, path):
    parser = configparser.ConfigParser()
    parser[_SECTION] = {
        k: ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        for k, v in cfg.to_dict().items()
    }
    with open(Path(path), "w") as fh:
        parser.write(fh)
