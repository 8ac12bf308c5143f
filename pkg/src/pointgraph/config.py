"""Experiment configuration (JSON with exactly these fields)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .model import BASELINE, LEARNED, Architecture


@dataclass
class Widths:
    f_hidden: int = 16
    node_hidden: int = 64
    node_out: int = 64
    edge_hidden: int = 64
    edge_out: int = 64
    fusion_hidden: int = 256
    fusion_out: int = 256
    head_hidden: int = 128


@dataclass
class ExperimentConfig:
    T: int = 4
    k: int = 16
    d_graph: int = 3
    gamma: float = 0.0
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    lr_halving_period: int = 20
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    mode: str = LEARNED
    dataset: str = "toy"  # "toy" or a ModelNet-style directory
    cache_dir: str | None = None
    n_points: int = 1024
    val_fraction: float = 0.1
    data_seed: int = 0
    toy_per_class: int = 100
    dtype: str = "float64"
    widths: Widths = field(default_factory=Widths)

    def __post_init__(self):
        if isinstance(self.widths, dict):
            unknown = set(self.widths) - {f.name for f in fields(Widths)}
            if unknown:
                raise ValueError(f"unknown widths field(s): {', '.join(sorted(unknown))}")
            self.widths = Widths(**self.widths)
        self.seeds = list(self.seeds)
        for name in ("T", "k", "d_graph", "epochs", "batch_size", "lr_halving_period", "n_points", "toy_per_class"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if self.mode not in (LEARNED, BASELINE):
            raise ValueError(f"mode must be '{LEARNED}' or '{BASELINE}', got {self.mode!r}")
        if self.mode == BASELINE and self.d_graph != 3:
            raise ValueError("mode=baseline requires d_graph=3")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def architecture(self, d_classes: int, d_in: int = 3) -> Architecture:
        return Architecture(d_in=d_in, d_graph=self.d_graph, d_classes=d_classes, T=self.T, k=self.k,
                            mode=self.mode, **asdict(self.widths))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        try:
            return cls.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: {exc}") from None

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
