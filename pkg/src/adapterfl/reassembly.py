"""Cutting prototypes into blocks, adapters, and the shared-trunk model group."""

from __future__ import annotations

import copy
import math
import os
from collections import OrderedDict
from typing import Sequence

import numpy as np

from .nn import AdaptiveAvgPool, Conv2d, ModelGraph, Sequential, param_count, state_dict, load_state_dict
from .nn import checkpoint
from .similarity import PartitionResult, model_ids
from .zoo import LEVELS, PrototypeModel, build

GROUP_FORMAT = "adapterfl-group/1"


class Block(Sequential):
    """A contiguous slice of a prototype graph, remembering where it was cut from."""

    def __init__(self, layers, kind: str, source: str, arch_id: str, cut: int,
                 in_shape: tuple[int, ...], out_shape: tuple[int, ...]):
        super().__init__(layers)
        self.kind = kind
        self.source = source
        self.arch_id = arch_id
        self.cut = cut
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def __repr__(self):
        return f"Block({self.kind} of {self.source}/{self.arch_id} @ {self.cut}, {self.in_shape} -> {self.out_shape})"


def split(model: PrototypeModel, cut: int, source: str | None = None) -> tuple[Block, Block]:
    """Deep-copied (feature-extraction, device-adaptation) blocks of ``model`` at ``cut``."""
    if cut not in model.cut_candidates:
        raise ValueError(f"cut {cut} is not a candidate of {model.arch_id}: {model.cut_candidates}")
    source = source or model.level or model.arch_id
    layers = copy.deepcopy(model.graph.layers)
    shapes = model.graph.boundary_shapes()
    ex = Block(layers[:cut], "ex", source, model.arch_id, cut, shapes[0], shapes[cut])
    ad = Block(layers[cut:], "ad", source, model.arch_id, cut, shapes[cut], shapes[-1])
    return ex, ad


def adapter_width(c_in: int, c_out: int) -> int:
    return max(1, int(round(math.sqrt(c_in * c_out))))


class Adapter(Sequential):
    """1x1 conv -> optional adaptive average pool -> 1x1 conv."""

    def __init__(self, ex_out_shape, ad_in_shape, seed: int = 0, identity: bool = False, dtype=np.float32):
        ex_out_shape, ad_in_shape = tuple(ex_out_shape), tuple(ad_in_shape)
        if len(ex_out_shape) != 3 or len(ad_in_shape) != 3:
            raise ValueError(f"adapter needs C x H x W shapes, got {ex_out_shape} and {ad_in_shape}")
        ca, ha, wa = ex_out_shape
        cb, hb, wb = ad_in_shape
        cm = adapter_width(ca, cb)
        rng = np.random.default_rng(seed)
        alpha0 = Conv2d(ca, cm, 1, rng=rng, dtype=dtype)
        alpha1 = Conv2d(cm, cb, 1, rng=rng, dtype=dtype)
        layers = [("alpha0", alpha0)]
        self.spatial_rule = "identity" if (ha, wa) == (hb, wb) else "adaptive_avg_pool"
        if self.spatial_rule != "identity":
            layers.append(("pool", AdaptiveAvgPool(hb, wb)))
        layers.append(("alpha1", alpha1))
        super().__init__(layers)
        if identity:
            if not ca == cm == cb:
                raise ValueError(f"identity init needs equal widths, got {ca}->{cm}->{cb}")
            for conv in (alpha0, alpha1):
                conv.params["weight"].data[...] = np.eye(cm, dtype=dtype)[:, :, None, None]
        self.in_shape, self.out_shape = ex_out_shape, ad_in_shape
        self.mid_channels = cm

    def __repr__(self):
        return (f"Adapter({self.in_shape[0]}->{self.mid_channels}->{self.out_shape[0]}, "
                f"{self.spatial_rule} to {self.out_shape[1]}x{self.out_shape[2]})")


def make_adapter(ex_out_shape, ad_in_shape, seed: int = 0, identity: bool = False, dtype=np.float32) -> Adapter:
    return Adapter(ex_out_shape, ad_in_shape, seed, identity, dtype)


class ReassembledModel(ModelGraph):
    """``ad_j(alpha1(resize(alpha0(ex_i(x)))))``. Top-level children are ex, adapter, ad."""

    def __init__(self, ex: Block, adapter: Adapter, ad: Block):
        super().__init__([("ex", ex), ("adapter", adapter), ("ad", ad)], ex.in_shape,
                         name=f"{ex.source}-{ad.source}")
        self.id = (ex.source, ad.source)
        self.output_shape(self.input_shape)  # raises ShapeError on a bad composition

    @property
    def model_id(self) -> str:
        return f"{self.id[0]}-{self.id[1]}"

    @property
    def ex(self) -> Block:
        return self["ex"]

    @property
    def adapter(self) -> Adapter:
        return self["adapter"]

    @property
    def ad(self) -> Block:
        return self["ad"]


def reassemble(ex: Block, ad: Block, seed: int = 0, identity: bool = False) -> ReassembledModel:
    """Join ``ex`` (used as-is, so it can be shared) to ``ad`` through a fresh adapter."""
    for blk, kind in ((ex, "ex"), (ad, "ad")):
        if not isinstance(blk, Block) or blk.kind != kind or blk.cut is None:
            raise ValueError(f"expected a {kind} block produced by split(), got {type(blk).__name__}")
    dtype = next((p.data.dtype for _, p in ex.named_parameters()), np.dtype(np.float32))
    return ReassembledModel(ex, make_adapter(ex.out_shape, ad.in_shape, seed, identity, dtype), ad)


class ModelGroup:
    """Members ``{i-S, i-M, i-L}`` sharing one feature-extraction block object."""

    def __init__(self, ex_source: str, ex: Block, members: Sequence[ReassembledModel], meta: dict | None = None):
        for m in members:
            if m.ex is not ex:
                raise ValueError(f"member {m.model_id} does not share the group's ex block")
        self.ex_source = ex_source
        self.ex = ex
        order = {lvl: i for i, lvl in enumerate(LEVELS)}
        ranked = sorted(members, key=lambda m: (param_count(m), order.get(m.id[1], 99), m.id[1]))
        self.members: OrderedDict[str, ReassembledModel] = OrderedDict((m.model_id, m) for m in ranked)
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members.values())

    def __getitem__(self, model_id: str) -> ReassembledModel:
        return self.members[model_id]

    @property
    def member_ids(self) -> list[str]:
        return list(self.members)

    def param_counts(self) -> dict[str, int]:
        return {k: param_count(m) for k, m in self.members.items()}

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Flat global state: ``ex.*`` once, then ``<model_id>.adapter.*`` / ``<model_id>.ad.*``."""
        out = OrderedDict((f"ex.{k}", v) for k, v in state_dict(self.ex).items())
        for mid, m in self.members.items():
            for part in ("adapter", "ad"):
                out.update((f"{mid}.{part}.{k}", v) for k, v in state_dict(m[part]).items())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        load_state_dict(self.ex, {k[3:]: v for k, v in state.items() if k.startswith("ex.")})
        for mid, m in self.members.items():
            for part in ("adapter", "ad"):
                pre = f"{mid}.{part}."
                load_state_dict(m[part], {k[len(pre):]: v for k, v in state.items() if k.startswith(pre)})
        known = {"ex"} | set(self.members)
        stray = [k for k in state if k.split(".", 1)[0] not in known]
        if stray:
            raise KeyError(f"unexpected group state entries: {stray[:5]}")

    def save(self, path: str | os.PathLike) -> None:
        checkpoint.save(path, self.state(), {"format": GROUP_FORMAT, **self.meta})


def resolve_ex_source(ids: Sequence[str], ex_source: str | int = "L", seed: int = 0) -> str:
    if ex_source == "random":
        return ids[int(np.random.default_rng(seed).integers(len(ids)))]
    if isinstance(ex_source, (int, np.integer)):
        return ids[int(ex_source)]
    if ex_source not in ids:
        raise ValueError(f"ex_source {ex_source!r} not among {list(ids)}")
    return ex_source


def build_group(zoo: Sequence[PrototypeModel], partition: PartitionResult, ex_source: str | int = "L",
                seed: int = 0) -> ModelGroup:
    """Group sharing the ex block of ``ex_source`` (a model id, an index, or ``"random"``).

    Adapter ``k`` (in zoo order) is seeded with ``seed + k``.
    """
    ids = model_ids(zoo)
    missing = [i for i in ids if i not in partition.cuts]
    if missing:
        raise ValueError(f"partition has no cut for {missing}")
    src = resolve_ex_source(ids, ex_source, seed)
    i = ids.index(src)
    ex, _ = split(zoo[i], partition.cuts[src], src)
    members = []
    for k, (mid, model) in enumerate(zip(ids, zoo)):
        _, ad = split(model, partition.cuts[mid], mid)
        members.append(reassemble(ex, ad, seed + k))
    meta = {
        "ex_source": src,
        "seed": seed,
        "cuts": dict(partition.cuts),
        "zoo": [{"id": mid, "arch_id": m.arch_id, "level": m.level, **m.build_args,
                 "dtype": np.dtype(m.graph.dtype).name} for mid, m in zip(ids, zoo)],
    }
    return ModelGroup(src, ex, members, meta)


def zoo_from_meta(meta: dict) -> list[PrototypeModel]:
    return [build(z["arch_id"], z["num_classes"], tuple(z["input_shape"]), z["width"], z["seed"],
                  level=z["level"], dtype=np.dtype(z.get("dtype", "float32")))
            for z in meta["zoo"]]


def group_from_meta(meta: dict) -> ModelGroup:
    """Rebuild an (initial-weight) group from the metadata stored in a group checkpoint."""
    zoo = zoo_from_meta(meta)
    ids = model_ids(zoo)
    part = PartitionResult(ids, {k: int(v) for k, v in meta["cuts"].items()}, meta["ex_source"],
                           int(meta["cuts"][meta["ex_source"]]), float("nan"))
    return build_group(zoo, part, meta["ex_source"], int(meta["seed"]))


def load_group(path: str | os.PathLike) -> ModelGroup:
    state, meta = checkpoint.load(path)
    if meta.get("format") != GROUP_FORMAT:
        raise checkpoint.CheckpointError(f"{path}: not a group checkpoint (format={meta.get('format')!r})")
    group = group_from_meta(meta)
    group.load_state(state)
    return group
