"""Config-driven runs: data, zoo, partition, group, then one of the three training methods."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines
from .config import ExperimentConfig
from .data import Dataset, dirichlet_split, iid_split, load_cifar, synthetic_dataset
from .fl import METRIC_FIELDS, MetricsRecord, RunContext, TrainSettings, assign_levels, run_adapterfl
from .io import write_csv, write_json
from .nn import ModelGraph, checkpoint, load_state_dict, state_dict
from .reassembly import ModelGroup, build_group, group_from_meta
from .similarity import PartitionResult, model_ids, partition_search, sample_probes
from .zoo import PrototypeModel, build, default_zoo

log = logging.getLogger(__name__)
MODEL_FORMAT = "adapterfl-model/1"
MEMBER_FORMAT = "adapterfl-member/1"


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "synthetic":
        return synthetic_dataset(cfg.num_classes, cfg.input_shape, cfg.n_train or 2000, cfg.n_test or 500,
                                 cfg.data_seed, cfg.separability)
    return load_cifar(cfg.data_path, cfg.dataset, cfg.n_train or None, cfg.n_test or None)


def make_shards(cfg: ExperimentConfig, data: Dataset):
    if cfg.split == "iid":
        return iid_split(data.y_train, cfg.num_clients, cfg.data_seed)
    return dirichlet_split(data.y_train, cfg.num_clients, cfg.beta, cfg.data_seed)


def make_zoo(cfg: ExperimentConfig, data: Dataset) -> list[PrototypeModel]:
    return default_zoo(cfg.group, data.num_classes, data.input_shape, cfg.width, cfg.init_seed)


def make_partition(cfg: ExperimentConfig, zoo, data: Dataset) -> PartitionResult:
    ids = model_ids(zoo)
    if cfg.cuts:
        if set(cfg.cuts) != set(ids):
            raise ValueError(f"cuts must name exactly {ids}, got {sorted(cfg.cuts)}")
        src = cfg.ex_source if cfg.ex_source in ids else ids[-1]
        return PartitionResult(ids, dict(cfg.cuts), src, cfg.cuts[src], float("nan"))
    probes = sample_probes(data.x_train, cfg.probe_size, cfg.data_seed)
    return partition_search(zoo, probes)


@dataclass
class Setup:
    cfg: ExperimentConfig
    data: Dataset
    zoo: list
    partition: PartitionResult
    group: ModelGroup
    ctx: RunContext


def prepare(cfg: ExperimentConfig) -> Setup:
    cfg.validate()
    data = make_dataset(cfg)
    shards = make_shards(cfg, data)
    zoo = make_zoo(cfg, data)
    part = make_partition(cfg, zoo, data)
    group = build_group(zoo, part, cfg.ex_source, cfg.init_seed)
    profiles = assign_levels(shards, cfg.ratio, group, cfg.dispatch_seed, cfg.headroom)
    settings = TrainSettings(cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_decay,
                             cfg.train_seed, cfg.workers)
    ctx = RunContext(profiles, data.x_train, data.y_train, data.x_test, data.y_test, settings, cfg.rounds,
                     cfg.clients_per_round, cfg.dispatch_seed, cfg.weighted, cfg.freeze_bn, cfg.eval_every,
                     cfg.record_wall_time)
    return Setup(cfg, data, zoo, part, group, ctx)


def save_model(path, model: ModelGraph, proto: PrototypeModel, model_id: str) -> None:
    checkpoint.save(path, state_dict(model), {"format": MODEL_FORMAT, "model_id": model_id,
                                              "arch_id": proto.arch_id, "level": proto.level,
                                              "dtype": np.dtype(model.dtype).name, **proto.build_args})


def save_member(path, model: ModelGraph, group: ModelGroup, model_id: str) -> None:
    checkpoint.save(path, state_dict(model), {"format": MEMBER_FORMAT, "model_id": model_id, **group.meta})


def load_models(path) -> dict[str, ModelGraph]:
    """Models stored in any checkpoint this package writes, keyed by model id."""
    state, meta = checkpoint.load(path)
    fmt = meta.get("format")
    if fmt == "adapterfl-group/1":
        group = group_from_meta(meta)
        group.load_state(state)
        return dict(group.members)
    if fmt == MEMBER_FORMAT:
        model = group_from_meta(meta)[meta["model_id"]]
    elif fmt == MODEL_FORMAT:
        model = build(meta["arch_id"], meta["num_classes"], tuple(meta["input_shape"]), meta["width"],
                      meta["seed"], meta["level"], np.dtype(meta.get("dtype", "float32"))).graph
    else:
        raise checkpoint.CheckpointError(f"{path}: unknown checkpoint format {fmt!r}")
    try:
        load_state_dict(model, state)
    except (KeyError, ValueError) as e:
        raise checkpoint.CheckpointError(f"{path}: schema mismatch: {e}") from None
    return {meta["model_id"]: model}


def write_metrics(path, records: list[MetricsRecord]) -> None:
    write_csv(path, METRIC_FIELDS, (r.row() for r in records))


def run_training(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[MetricsRecord]:
    """Run ``cfg.method`` and, if ``out_dir`` (default ``cfg.output_dir``) is not empty-string,
    write ``config.toml``, ``partition.json``, ``metrics.csv`` and checkpoints there."""
    s = prepare(cfg)
    out = Path(cfg.output_dir if out_dir is None else out_dir) if out_dir != "" else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.toml")
        write_json(out / "partition.json", s.partition.to_json())
        write_json(out / "data.json", {k: v for k, v in s.data.info.items() if k != "class_means"})

    every = cfg.checkpoint_every
    ckdir = out / "checkpoints" if out is not None else None

    def due(t):
        return ckdir is not None and every and t % every == 0

    log.info("method=%s cuts=%s sizes=%s", cfg.method, s.partition.cuts, s.group.param_counts())
    if cfg.method == "adapterfl":
        s.ctx.on_round = lambda t, _: due(t) and s.group.save(ckdir / f"round_{t:04d}.ckpt")
        records = run_adapterfl(s.group, s.ctx)
        final = lambda: s.group.save(out / "final.ckpt")
    elif cfg.method == "fedbase":
        models = baselines.independent_members(s.group)

        def hook(t, _):
            if due(t):
                for mid, m in models.items():
                    save_member(ckdir / f"round_{t:04d}_{mid}.ckpt", m, s.group, mid)

        s.ctx.on_round = hook
        records, _ = baselines.run_fedbase(s.group, s.ctx, models)
        final = lambda: [save_member(out / f"final_{mid}.ckpt", m, s.group, mid) for mid, m in models.items()]
    else:
        level = cfg.fedavg_level
        ids = model_ids(s.zoo)
        if level not in ids:
            raise ValueError(f"fedavg_level must be one of {ids}")
        proto = s.zoo[ids.index(level)]
        s.ctx.on_round = lambda t, _: due(t) and save_model(ckdir / f"round_{t:04d}.ckpt", proto.graph, proto, level)
        records = baselines.run_fedavg_exclusive(proto.graph, s.ctx, level)
        final = lambda: save_model(out / "final.ckpt", proto.graph, proto, level)
    if out is not None:
        write_metrics(out / "metrics.csv", records)
        final()
    return records

