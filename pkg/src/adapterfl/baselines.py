"""Comparison methods run under the same data, tiers and seeds as AdapterFL.

``fedavg_exclusive`` trains one prototype with FedAvg on the clients that can host it.
``fedbase`` trains every reassembled member as its own FedAvg instance: no trunk sharing,
but the same per-round dispatch plan as AdapterFL.
"""

from __future__ import annotations

import copy
import time
from collections import OrderedDict

from .fl import (MetricsRecord, RunContext, _evaluate_all, _should_eval, fedavg_aggregate, sample_eligible,
                 select_and_dispatch, train_clients)
from .nn import ModelGraph, param_count
from .reassembly import ModelGroup


def eligible_clients(ctx: RunContext, model: ModelGraph) -> list[int]:
    size = param_count(model)
    return [p.client_id for p in ctx.profiles if p.num_samples > 0 and p.can_host(size)]


def run_fedavg_exclusive(model: ModelGraph, ctx: RunContext, model_id: str = "L") -> list[MetricsRecord]:
    """Each round samples ``clients_per_round`` clients as AdapterFL would and drops those
    that cannot host ``model``; a round with no eligible client leaves the model as is."""
    if not eligible_clients(ctx, model):
        raise ValueError(f"no client can host {model_id} ({param_count(model)} params)")
    size = param_count(model)
    records = []
    for t in range(ctx.rounds):
        start = time.perf_counter()
        chosen = sample_eligible(ctx.profiles, size, ctx.clients_per_round, ctx.dispatch_seed, t)
        if chosen:
            ups = train_clients([(c, model_id, model) for c in chosen], ctx.shards, ctx.x_train, ctx.y_train,
                                ctx.settings, t)
            fedavg_aggregate(model, ups, weighted=True, freeze_bn=ctx.freeze_bn)
        if _should_eval(ctx, t):
            records += _evaluate_all("fedavg", {model_id: model}, ctx, t, start)
        if ctx.on_round:
            ctx.on_round(t + 1, chosen)
    return records


def independent_members(group: ModelGroup) -> "OrderedDict[str, ModelGraph]":
    """Deep copies of the members, so their ex blocks no longer alias."""
    return OrderedDict((mid, copy.deepcopy(m)) for mid, m in group.members.items())


def run_fedbase(group: ModelGroup, ctx: RunContext, models: "OrderedDict[str, ModelGraph] | None" = None
                ) -> tuple[list[MetricsRecord], "OrderedDict[str, ModelGraph]"]:
    """Returns the metrics and the trained independent members (``models`` if given,
    else fresh copies from ``group``)."""
    models = independent_members(group) if models is None else models
    sizes = group.param_counts()
    records = []
    for t in range(ctx.rounds):
        start = time.perf_counter()
        plan = select_and_dispatch(ctx.profiles, sizes, ctx.clients_per_round, ctx.dispatch_seed, t)
        ups = train_clients([(c, m, models[m]) for c, m in plan.assignments], ctx.shards, ctx.x_train,
                            ctx.y_train, ctx.settings, t)
        for mid, model in models.items():
            mine = [u for u in ups if u.model_id == mid]
            if mine:
                fedavg_aggregate(model, mine, weighted=True, freeze_bn=ctx.freeze_bn)
        if _should_eval(ctx, t):
            records += _evaluate_all("fedbase", models, ctx, t, start)
        if ctx.on_round:
            ctx.on_round(t + 1, plan)
    return records, models
