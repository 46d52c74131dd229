"""Command-line front end.

    adapterfl params     --group standard
    adapterfl split      --config run.toml [--out shards.csv]
    adapterfl partition  --config run.toml [--out partition.json] [--init L=model.ckpt]
    adapterfl reassemble --config run.toml --partition partition.json [--out DIR]
    adapterfl train      --config run.toml [--method fedbase] [--rounds 10] [--workers 4]
    adapterfl evaluate   --config run.toml --checkpoint final.ckpt [--out report.json]

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import experiment
from .data import DataFormatError, class_histograms, write_shards_csv
from .fl import evaluate
from .io import write_csv, write_json
from .nn import checkpoint, load_state_dict
from .reassembly import build_group
from .similarity import PartitionResult, model_ids, partition_search, sample_probes
from .zoo import GROUPS, default_zoo

log = logging.getLogger("adapterfl")


class UsageError(Exception):
    pass


def _shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,H,W") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use C,H,W")
    return dims


def _load_config(path: str) -> config_mod.ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return config_mod.load(p)
    except config_mod.ConfigError as e:
        raise UsageError(f"{p}: {e}") from None


def _out_dir(cfg, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_params(args) -> int:
    zoo = default_zoo(args.group, args.num_classes, args.input_shape, args.width)
    print(f"{'level':<6}{'arch':<14}{'params':>12}{'millions':>10}  cut candidates")
    for m in zoo:
        print(f"{m.level:<6}{m.arch_id:<14}{m.params:>12,}{m.params / 1e6:>10.2f}  {m.cut_candidates}")
    return 0


def cmd_split(args) -> int:
    cfg = _load_config(args.config)
    data = experiment.make_dataset(cfg)
    shards = experiment.make_shards(cfg, data)
    out = Path(args.out) if args.out else _out_dir(cfg, None) / "shards.csv"
    write_shards_csv(out, shards)
    sizes = np.array([len(s) for s in shards])
    hist = class_histograms(shards, data.y_train, data.num_classes)
    classes = (hist > 0).sum(1)
    print(f"{len(shards)} shards ({cfg.split}{', beta=' + str(cfg.beta) if cfg.split == 'dirichlet' else ''}): "
          f"size min/median/max {sizes.min()}/{int(np.median(sizes))}/{sizes.max()}, "
          f"classes per client mean {classes.mean():.2f}")
    print(f"wrote {out}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load_config(args.config)
    data = experiment.make_dataset(cfg)
    zoo = experiment.make_zoo(cfg, data)
    ids = model_ids(zoo)
    for spec in args.init or []:
        mid, _, path = spec.partition("=")
        if mid not in ids:
            raise UsageError(f"--init names unknown model {mid!r}; expected one of {ids}")
        state, _ = checkpoint.load(path)
        load_state_dict(zoo[ids.index(mid)].graph, state)
    probes = sample_probes(data.x_train, cfg.probe_size, cfg.data_seed)
    result = partition_search(zoo, probes)
    out = Path(args.out) if args.out else _out_dir(cfg, None) / "partition.json"
    write_json(out, result.to_json())
    print(f"anchor {result.anchor_id}@{result.anchor_cut}, objective {result.objective:.6f}")
    for mid in ids:
        print(f"  {mid}: cut {result.cuts[mid]}")
    print(f"wrote {out}")
    return 0


def cmd_reassemble(args) -> int:
    import json

    cfg = _load_config(args.config)
    part = PartitionResult.from_json(json.loads(Path(args.partition).read_text()))
    data = experiment.make_dataset(cfg)
    zoo = experiment.make_zoo(cfg, data)
    group = build_group(zoo, part, cfg.ex_source, cfg.init_seed)
    out = _out_dir(cfg, args.out)
    group.save(out / "group.ckpt")
    counts = group.param_counts()
    write_csv(out / "param_counts.csv", ["model_id", "params", "params_millions"],
              ([mid, n, f"{n / 1e6:.2f}"] for mid, n in counts.items()))
    for mid, n in counts.items():
        print(f"{mid:<6}{n:>12,}{n / 1e6:>8.2f}M  {group[mid].adapter!r}")
    print(f"wrote {out / 'group.ckpt'} and {out / 'param_counts.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    for key in ("method", "rounds", "workers", "output_dir"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    try:
        cfg.validate()
    except config_mod.ConfigError as e:
        raise UsageError(str(e)) from None
    records = experiment.run_training(cfg)
    last = max((r.round for r in records), default=0)
    for r in records:
        if r.round == last:
            print(f"round {r.round} {r.method} {r.model_id}: acc {r.test_accuracy:.4f} loss {r.test_loss:.4f}")
    print(f"wrote {Path(cfg.output_dir) / 'metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    data = experiment.make_dataset(cfg)
    models = experiment.load_models(args.checkpoint)
    report = {"checkpoint": str(args.checkpoint), "dataset": cfg.dataset, "n_test": int(len(data.y_test)),
              "models": {}}
    for mid, m in models.items():
        if m.input_shape != data.input_shape:
            raise checkpoint.CheckpointError(f"{mid} expects inputs {m.input_shape}, dataset has {data.input_shape}")
        acc, loss = evaluate(m, data.x_test, data.y_test)
        report["models"][mid] = {"test_accuracy": acc, "test_loss": loss}
        print(f"{mid}: accuracy {acc:.4f}, loss {loss:.4f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    write_json(out, report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapterfl", description="Heterogeneous FL by model partition and reassembly.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="parameter counts of a prototype group")
    s.add_argument("--group", choices=sorted(GROUPS), default="standard")
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--input-shape", type=_shape, default=(3, 32, 32))
    s.add_argument("--width", type=float, default=1.0)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("split", help="write client shards as CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("partition", help="similarity-based two-block partition of the zoo")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--init", action="append", metavar="ID=CKPT", help="load prototype weights before the search")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("reassemble", help="build the model group from a partition")
    s.add_argument("--config", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_reassemble)

    s = sub.add_parser("train", help="run a federated training experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--method", choices=config_mod.METHODS)
    s.add_argument("--rounds", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="test accuracy of a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"adapterfl {args.command}: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, checkpoint.CheckpointError, DataFormatError) as e:
        print(f"adapterfl {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
