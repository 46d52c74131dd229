"""Round engine: resource tiers, client selection and dispatch, local training, block-wise aggregation."""

from __future__ import annotations

import copy
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import ClientShard
from .nn import SGD, ModelGraph, cross_entropy, loss_and_grads, lr_at, param_count, parameters, state_dict
from .reassembly import ModelGroup

TIERS = ("S", "M", "L")
METRIC_FIELDS = ("method", "round", "model_id", "test_accuracy", "test_loss", "lr", "wall_time_ms")


@dataclass
class ClientProfile:
    client_id: int
    level: str
    gamma: float
    shard: ClientShard

    @property
    def num_samples(self) -> int:
        return len(self.shard)

    def can_host(self, size: int) -> bool:
        return size <= self.gamma


@dataclass
class RoundPlan:
    round_index: int
    assignments: list[tuple[int, str]]  # (client_id, model_id), sorted by client id

    def clients_of(self, model_id: str) -> list[int]:
        return [c for c, m in self.assignments if m == model_id]


@dataclass
class Upload:
    client_id: int
    model_id: str
    state: "OrderedDict[str, np.ndarray]"
    num_samples: int
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class AggregationReport:
    contributors: dict[str, int]  # "ex" and each member id
    delta_norms: dict[str, float]


@dataclass
class MetricsRecord:
    method: str
    round: int
    model_id: str
    test_accuracy: float
    test_loss: float
    lr: float
    wall_time_ms: float = 0.0

    def row(self) -> list:
        return [self.method, self.round, self.model_id, repr(self.test_accuracy), repr(self.test_loss),
                repr(self.lr), f"{self.wall_time_ms:.0f}"]


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 1e-3
    lr_decay: float = 0.998
    seed: int = 0
    workers: int = 1


# -- tiers and dispatch ------------------------------------------------------

def tier_counts(num_clients: int, ratio: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``ratio * num_clients`` (ties to the earlier tier)."""
    ratio = np.asarray(ratio, dtype=float)
    if ratio.shape != (len(TIERS),) or (ratio < 0).any() or abs(ratio.sum() - 1) > 1e-9:
        raise ValueError(f"ratio must be {len(TIERS)} nonnegative numbers summing to 1, got {ratio.tolist()}")
    raw = ratio * num_clients
    counts = np.floor(raw + 1e-9).astype(int)
    frac = raw - counts
    for k in sorted(range(len(TIERS)), key=lambda k: (-frac[k], k))[: num_clients - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def assign_levels(shards: Sequence[ClientShard] | int, ratio: Sequence[float], sizes: Sequence[int] | ModelGroup,
                  seed: int = 0, headroom: float = 1.05) -> list[ClientProfile]:
    """Give each client a tier. Tier k's budget is ``headroom`` times the size of the k-th
    smallest group member, so it can host that member and everything smaller.

    ``shards`` may be an int (client count, empty shards) for pure dispatch studies.
    """
    if isinstance(shards, int):
        shards = [ClientShard(k, np.zeros(0, dtype=np.int64)) for k in range(shards)]
    if isinstance(sizes, ModelGroup):
        sizes = list(sizes.param_counts().values())
    sizes = sorted(int(s) for s in sizes)
    if len(sizes) != len(TIERS):
        raise ValueError(f"need {len(TIERS)} member sizes, got {len(sizes)}")
    counts = tier_counts(len(shards), ratio)
    order = np.random.default_rng(seed).permutation(len(shards))
    tier_of = np.repeat(np.arange(len(TIERS)), counts)
    profiles = [None] * len(shards)
    for pos, idx in enumerate(order):
        t = int(tier_of[pos])
        s = shards[idx]
        profiles[idx] = ClientProfile(s.client_id, TIERS[t], headroom * sizes[t], s)
    return profiles


def hosted_member(profile: ClientProfile, sizes: Mapping[str, int]) -> str:
    """Largest member the client can host."""
    fits = [m for m, s in sizes.items() if profile.can_host(s)]
    if not fits:
        raise ValueError(f"client {profile.client_id} cannot host any member")
    return max(fits, key=lambda m: sizes[m])


def select_and_dispatch(profiles: Sequence[ClientProfile], sizes: Mapping[str, int], k: int, seed: int = 0,
                        round_index: int = 0, require_data: bool = True) -> RoundPlan:
    """Activate ``k`` clients and assign every one a member it can host.

    Members are covered first, largest first, each by a random client of the matching
    tier (any able client if that tier is exhausted). The remaining slots are drawn
    uniformly from the rest and train the largest member they can host, so member
    counts follow the tier ratio. Clients with empty shards are never activated.
    """
    members = sorted(sizes, key=lambda m: sizes[m])
    if k < len(members):
        raise ValueError(f"K={k} cannot cover {len(members)} members")
    pool = [p for p in profiles if p.num_samples > 0 or not require_data]
    if k > len(pool):
        raise ValueError(f"K={k} exceeds the {len(pool)} clients with data")
    rng = np.random.default_rng([seed, round_index])
    free = {p.client_id: p for p in pool}
    plan: dict[int, str] = {}
    for rank in range(len(members) - 1, -1, -1):
        m = members[rank]
        able = [c for c, p in free.items() if p.can_host(sizes[m])]
        exact = [c for c in able if free[c].level == TIERS[min(rank, len(TIERS) - 1)]]
        cands = exact or able
        if not cands:
            raise ValueError(f"no activatable client can host member {m} ({sizes[m]} params)")
        c = cands[int(rng.integers(len(cands)))]
        plan[c] = m
        del free[c]
    rest = sorted(free)
    for c in rng.choice(rest, size=k - len(plan), replace=False) if k > len(plan) else []:
        plan[int(c)] = hosted_member(free[int(c)], sizes)
    by_id = {p.client_id: p for p in pool}
    for c, m in plan.items():
        if not by_id[c].can_host(sizes[m]):
            raise AssertionError(f"infeasible assignment {c}->{m}")
    return RoundPlan(round_index, sorted(plan.items()))


def sample_eligible(profiles: Sequence[ClientProfile], size: int, k: int, seed: int = 0,
                    round_index: int = 0) -> list[int]:
    """Exclusive learning: sample ``k`` data-holding clients and keep those able to host ``size``."""
    pool = [p for p in profiles if p.num_samples > 0]
    if not any(p.can_host(size) for p in pool):
        raise ValueError(f"no client can host a model of {size} params")
    rng = np.random.default_rng([seed, round_index])
    picked = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return sorted(pool[i].client_id for i in picked if pool[i].can_host(size))


# -- local training and evaluation ---------------------------------------

def local_train(model: ModelGraph, x: np.ndarray, y: np.ndarray, settings: TrainSettings, lr: float,
                seed=0) -> tuple[ModelGraph, list[float]]:
    """Train a private deep copy of ``model``; the argument is never modified.

    Returns the trained copy and the mean training loss of each epoch.
    """
    if len(y) == 0:
        raise ValueError("cannot train on an empty shard")
    local = copy.deepcopy(model)
    opt = SGD(parameters(local), lr=lr, momentum=settings.momentum, weight_decay=settings.weight_decay,
              lr_decay=settings.lr_decay)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(settings.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), settings.batch_size):
            idx = order[s:s + settings.batch_size]
            loss, _ = loss_and_grads(local, x[idx], y[idx])
            opt.step()
            total += loss * len(idx)
        losses.append(total / len(y))
    return local, losses


def evaluate(model: ModelGraph, x: np.ndarray, y: np.ndarray, batch: int = 250) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    correct, loss = 0, 0.0
    for s in range(0, len(y), batch):
        logits = model.forward(x[s:s + batch], train=False).astype(np.float64)
        l, _ = cross_entropy(logits, y[s:s + batch])
        loss += l * len(logits)
        correct += int((logits.argmax(1) == y[s:s + batch]).sum())
    return correct / len(y), loss / len(y)


def client_seed(settings: TrainSettings, round_index: int, client_id: int) -> list[int]:
    return [settings.seed, round_index, client_id]


def train_clients(jobs: Sequence[tuple[int, str, ModelGraph]], shards: Mapping[int, ClientShard],
                  x: np.ndarray, y: np.ndarray, settings: TrainSettings, round_index: int) -> list[Upload]:
    """Run local training for ``(client_id, model_id, global model)`` jobs; each job owns
    its copy and RNG stream, so serial and threaded execution give identical uploads."""
    lr = lr_at(settings.lr, settings.lr_decay, round_index)

    def one(job):
        cid, mid, model = job
        idx = shards[cid].indices
        trained, losses = local_train(model, x[idx], y[idx], settings, lr, client_seed(settings, round_index, cid))
        return Upload(cid, mid, state_dict(trained), len(idx), losses)

    if settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as pool:
            ups = list(pool.map(one, jobs))
    else:
        ups = [one(j) for j in jobs]
    return sorted(ups, key=lambda u: u.client_id)


# -- aggregation -------------------------------------------------------------

def _is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("running_mean", "running_var")


def weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    w = np.ones(len(arrays)) if weights is None else np.asarray(weights, dtype=float)
    if len(arrays) == 0 or w.sum() <= 0:
        raise ValueError("mean over an empty or zero-weight set")
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for a, wi in zip(arrays, w):
        acc += wi * a
    return acc / w.sum()


def _check_upload(u: Upload, schema: Mapping[str, np.ndarray]) -> None:
    for name, ref in schema.items():
        if name not in u.state:
            raise ValueError(f"upload from client {u.client_id} ({u.model_id}) is missing {name}")
        got = u.state[name]
        if got.shape != ref.shape:
            raise ValueError(f"upload from client {u.client_id}: {name} has shape {got.shape}, expected {ref.shape}")
        if not np.all(np.isfinite(got)):
            raise ValueError(f"upload from client {u.client_id}: non-finite values in {name}")


def _write(module, name: str, value: np.ndarray, params: Mapping, freeze_bn: bool) -> float:
    """Store an aggregated tensor; returns the squared change."""
    if name in params:
        old = params[name].data
    else:
        if freeze_bn:
            return 0.0
        old = dict(module.named_buffers())[name]
    new = value.astype(old.dtype)
    delta = float(np.sum((new.astype(np.float64) - old) ** 2))
    if name in params:
        old[...] = new
    else:
        module.set_buffer(name, new)
    return delta


def aggregate(group: ModelGroup, uploads: Sequence[Upload], weighted: bool = False,
              freeze_bn: bool = False) -> AggregationReport:
    """Block-wise aggregation.

    The shared ex block becomes the mean over all uploads; each member's adapter and
    ad block become the mean over the uploads that trained that member. Means are
    unweighted unless ``weighted`` (then by shard size). Members without uploads and
    anything not uploaded stay as they were. With ``freeze_bn`` running statistics are
    not averaged.
    """
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    for u in uploads:
        if u.model_id not in group.members:
            raise ValueError(f"upload from client {u.client_id} names unknown member {u.model_id}")
        _check_upload(u, state_dict(group[u.model_id]))

    def w(us):
        return [u.num_samples for u in us] if weighted else None

    report = AggregationReport({"ex": len(uploads)}, {})
    ex_params = parameters(group.ex)
    sq = 0.0
    for name in state_dict(group.ex):
        if freeze_bn and _is_buffer(name):
            continue
        sq += _write(group.ex, name, weighted_mean([u.state[f"ex.{name}"] for u in uploads], w(uploads)),
                     ex_params, freeze_bn)
    report.delta_norms["ex"] = sq ** 0.5
    for mid, member in group.members.items():
        mine = [u for u in uploads if u.model_id == mid]
        report.contributors[mid] = len(mine)
        sq = 0.0
        if mine:
            for part in ("adapter", "ad"):
                blk = member[part]
                bp = parameters(blk)
                for name in state_dict(blk):
                    if freeze_bn and _is_buffer(name):
                        continue
                    sq += _write(blk, name, weighted_mean([u.state[f"{part}.{name}"] for u in mine], w(mine)),
                                 bp, freeze_bn)
        report.delta_norms[mid] = sq ** 0.5
    return report


def fedavg_aggregate(model: ModelGraph, uploads: Sequence[Upload], weighted: bool = True,
                     freeze_bn: bool = False) -> float:
    """Plain FedAvg over whole models (shard-size weights by default). Returns the update norm."""
    if not uploads:
        raise ValueError("fedavg_aggregate needs at least one upload")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    for u in uploads:
        _check_upload(u, state_dict(model))
    weights = [u.num_samples for u in uploads] if weighted else None
    params = parameters(model)
    sq = 0.0
    for name in state_dict(model):
        if freeze_bn and _is_buffer(name):
            continue
        sq += _write(model, name, weighted_mean([u.state[name] for u in uploads], weights), params, freeze_bn)
    return sq ** 0.5


# -- the AdapterFL loop --------------------------------------------------------

@dataclass
class RunContext:
    """Everything a training loop needs besides the models."""
    profiles: list[ClientProfile]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    settings: TrainSettings
    rounds: int
    clients_per_round: int
    dispatch_seed: int = 0
    weighted: bool = False
    freeze_bn: bool = False
    eval_every: int = 1
    record_wall_time: bool = False
    on_round: Callable[[int, object], None] | None = None  # called after each aggregation

    @property
    def shards(self) -> dict[int, ClientShard]:
        return {p.client_id: p.shard for p in self.profiles}


def _should_eval(ctx: RunContext, t: int) -> bool:
    return (t + 1) % ctx.eval_every == 0 or t + 1 == ctx.rounds


def _evaluate_all(method: str, models: Mapping[str, ModelGraph], ctx: RunContext, t: int,
                  start: float) -> list[MetricsRecord]:
    lr = lr_at(ctx.settings.lr, ctx.settings.lr_decay, t)
    out = []
    for mid, m in models.items():
        acc, loss = evaluate(m, ctx.x_test, ctx.y_test)
        wall = (time.perf_counter() - start) * 1000 if ctx.record_wall_time else 0.0
        out.append(MetricsRecord(method, t + 1, mid, acc, loss, lr, wall))
    return out


def run_adapterfl(group: ModelGroup, ctx: RunContext) -> list[MetricsRecord]:
    """Rounds of select -> dispatch -> local train -> upload -> block-wise aggregate.

    Metrics rows carry the 1-based round number and the learning rate used in it.
    """
    sizes = group.param_counts()
    records: list[MetricsRecord] = []
    for t in range(ctx.rounds):
        start = time.perf_counter()
        plan = select_and_dispatch(ctx.profiles, sizes, ctx.clients_per_round, ctx.dispatch_seed, t)
        jobs = [(c, m, group[m]) for c, m in plan.assignments]
        uploads = train_clients(jobs, ctx.shards, ctx.x_train, ctx.y_train, ctx.settings, t)
        report = aggregate(group, uploads, ctx.weighted, ctx.freeze_bn)
        if _should_eval(ctx, t):
            records += _evaluate_all("adapterfl", group.members, ctx, t, start)
        if ctx.on_round:
            ctx.on_round(t + 1, report)
    return records
