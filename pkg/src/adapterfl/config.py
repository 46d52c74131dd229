"""Experiment configuration: one flat TOML table of ``key = value`` lines.

Unknown keys are rejected. Missing keys take the defaults below, which mirror a
100-client, 10%-activation CIFAR-10 run. A resolved config is written next to every
run's metrics and reproduces it exactly.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .io import atomic_write_text

OUTPUT_ENV = "ADAPTERFL_OUTPUT_DIR"
METHODS = ("adapterfl", "fedavg", "fedbase")
DATASETS = ("synthetic", "cifar10", "cifar100")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "cifar10"
    data_path: str = "data/cifar-10-batches-bin"
    n_train: int = 0  # 0 keeps the full split
    n_test: int = 0
    num_classes: int = 10  # synthetic only; CIFAR fixes its own
    input_shape: list = field(default_factory=lambda: [3, 32, 32])  # synthetic only
    separability: float = 0.5
    split: str = "iid"
    beta: float = 0.5
    # models
    group: str = "standard"
    width: float = 1.0
    ex_source: str = "L"
    cuts: dict = field(default_factory=dict)  # e.g. {S = 3, M = 7, L = 7}; empty runs the search
    probe_size: int = 256
    # clients
    num_clients: int = 100
    activation: float = 0.1
    ratio: list = field(default_factory=lambda: [0.4, 0.4, 0.2])
    headroom: float = 1.05
    # optimisation
    rounds: int = 100
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 1e-3
    lr_decay: float = 0.998
    # seeds
    data_seed: int = 0
    init_seed: int = 0
    dispatch_seed: int = 0
    train_seed: int = 0
    # method and runtime
    method: str = "adapterfl"
    fedavg_level: str = "L"
    weighted: bool = False
    freeze_bn: bool = False
    eval_every: int = 1
    workers: int = 1
    checkpoint_every: int = 0
    record_wall_time: bool = False
    output_dir: str = "runs/default"

    @property
    def clients_per_round(self) -> int:
        return max(1, int(round(self.activation * self.num_clients)))

    def validate(self) -> "ExperimentConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)
        need(self.dataset in DATASETS, f"dataset must be one of {DATASETS}")
        need(self.split in ("iid", "dirichlet"), "split must be 'iid' or 'dirichlet'")
        need(self.beta > 0, "beta must be > 0")
        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(self.num_clients >= 1, "num_clients must be >= 1")
        need(0 < self.activation <= 1, "activation must lie in (0, 1]")
        need(len(self.ratio) == 3 and abs(sum(self.ratio) - 1) <= 1e-9 and min(self.ratio) >= 0,
             "ratio must be three nonnegative numbers summing to 1")
        need(len(self.input_shape) == 3, "input_shape must be [C, H, W]")
        need(self.rounds >= 0 and self.epochs >= 1 and self.batch_size >= 1, "rounds/epochs/batch_size out of range")
        need(self.lr >= 0 and 0 <= self.momentum < 1 and self.weight_decay >= 0 and 0 < self.lr_decay <= 1,
             "optimizer hyperparameters out of range")
        need(self.eval_every >= 1 and self.workers >= 1 and self.checkpoint_every >= 0, "runtime knobs out of range")
        need(self.width > 0 and self.probe_size >= 2, "width and probe_size must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.dumps())


def from_dict(doc: dict) -> ExperimentConfig:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = ExperimentConfig(**doc)
    cfg.input_shape = [int(v) for v in cfg.input_shape]
    cfg.ratio = [float(v) for v in cfg.ratio]
    cfg.cuts = {str(k): int(v) for k, v in cfg.cuts.items()}
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
            setattr(cfg, f.name, float(v))
    return cfg.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad config syntax: {e}") from None
    return from_dict(doc)


def load(path: str | os.PathLike, env: dict | None = None) -> ExperimentConfig:
    """Read a config file; ``$ADAPTERFL_OUTPUT_DIR`` overrides ``output_dir``."""
    cfg = loads(Path(path).read_text())
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        cfg.output_dir = env[OUTPUT_ENV]
    return cfg
