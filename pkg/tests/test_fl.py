from collections import Counter

import numpy as np
import pytest

from adapterfl.data import ClientShard, iid_split, synthetic_dataset
from adapterfl.fl import (ClientProfile, RunContext, TrainSettings, Upload, aggregate, assign_levels, evaluate,
                          fedavg_aggregate, hosted_member, local_train, run_adapterfl, select_and_dispatch,
                          tier_counts, train_clients, weighted_mean)
from adapterfl.nn import parameters, state_dict
from adapterfl.reassembly import build_group
from adapterfl.similarity import PartitionResult
from adapterfl.zoo import build, default_zoo
from oracles import aggregation_oracle, random_uploads, rel

SHAPE = (3, 16, 16)
SIZES = {"L-S": 1000, "L-M": 5000, "L-L": 20000}


def make_group(dtype=np.float32, seed=0, width=0.125):
    zoo = default_zoo("standard", num_classes=4, input_shape=SHAPE, width=width, seed=seed, dtype=dtype)
    part = PartitionResult(["S", "M", "L"], {"S": 3, "M": 7, "L": 7}, "L", 7, 0.0)
    return build_group(zoo, part, "L", seed=seed)


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset(4, SHAPE, n_train=400, n_test=100, seed=0)


# -- tiers ---------------------------------------------------------------------

def test_tier_counts():
    assert tier_counts(100, [0.4, 0.4, 0.2]) == [40, 40, 20]
    assert tier_counts(20, [0.4, 0.4, 0.2]) == [8, 8, 4]
    assert tier_counts(7, [1 / 3, 1 / 3, 1 / 3]) == [3, 2, 2]
    with pytest.raises(ValueError):
        tier_counts(10, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        tier_counts(10, [0.5, 0.5])


def test_assign_levels_budgets():
    profiles = assign_levels(100, [0.4, 0.4, 0.2], list(SIZES.values()), seed=1)
    levels = Counter(p.level for p in profiles)
    assert levels == {"S": 40, "M": 40, "L": 20}
    for p in profiles:
        hostable = [m for m, s in SIZES.items() if p.can_host(s)]
        assert hostable == {"S": ["L-S"], "M": ["L-S", "L-M"], "L": list(SIZES)}[p.level]
    assert hosted_member(profiles[0], SIZES) == {"S": "L-S", "M": "L-M", "L": "L-L"}[profiles[0].level]


def test_all_large_ratio():
    profiles = assign_levels(10, [0, 0, 1], list(SIZES.values()))
    assert {p.level for p in profiles} == {"L"}


def test_small_budget_cannot_host_large_member():
    profiles = assign_levels(10, [0.4, 0.4, 0.2], list(SIZES.values()))
    small = next(p for p in profiles if p.level == "S")
    assert small.gamma < SIZES["L-L"] and not small.can_host(SIZES["L-L"])
    with pytest.raises(ValueError):
        assign_levels(10, [0.4, 0.4, 0.2], [1, 2])


# -- dispatch -------------------------------------------------------------------

def _profiles(n=20, seed=0):
    shards = [ClientShard(k, np.arange(k * 5, k * 5 + 5)) for k in range(n)]
    return assign_levels(shards, [0.4, 0.4, 0.2], list(SIZES.values()), seed=seed)


def test_dispatch_feasible_and_covering_over_1000_plans():
    profiles = _profiles()
    by_id = {p.client_id: p for p in profiles}
    totals = Counter()
    for t in range(1000):
        plan = select_and_dispatch(profiles, SIZES, 10, seed=0, round_index=t)
        clients = [c for c, _ in plan.assignments]
        assert len(set(clients)) == 10 and clients == sorted(clients)
        assert set(m for _, m in plan.assignments) == set(SIZES)
        assert all(by_id[c].can_host(SIZES[m]) for c, m in plan.assignments)
        totals.update(m for _, m in plan.assignments)
    mean = {m: totals[m] / 1000 for m in SIZES}
    assert mean["L-S"] == pytest.approx(4, abs=0.35)
    assert mean["L-M"] == pytest.approx(4, abs=0.35)
    assert mean["L-L"] == pytest.approx(2, abs=0.35)


def test_dispatch_is_seeded():
    profiles = _profiles()
    a = select_and_dispatch(profiles, SIZES, 5, seed=3, round_index=2)
    b = select_and_dispatch(profiles, SIZES, 5, seed=3, round_index=2)
    c = select_and_dispatch(profiles, SIZES, 5, seed=3, round_index=3)
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_dispatch_errors_and_empty_shards():
    with pytest.raises(ValueError):
        select_and_dispatch(_profiles(), SIZES, 2)
    gammas = {"S": 1500, "M": 6000, "L": 30000}
    levels = "SSMMLSSMML"
    profiles = [ClientProfile(k, lvl, gammas[lvl], ClientShard(k, np.array([k]) if k < 5 else np.zeros(0, int)))
                for k, lvl in enumerate(levels)]
    for t in range(50):
        plan = select_and_dispatch(profiles, SIZES, 4, round_index=t)
        assert all(c < 5 for c, _ in plan.assignments)
    with pytest.raises(ValueError):
        select_and_dispatch(profiles, SIZES, 6)


def test_dispatch_without_a_large_client_fails():
    shards = [ClientShard(k, np.array([k])) for k in range(6)]
    profiles = assign_levels(shards, [0.5, 0.5, 0.0], list(SIZES.values()))
    with pytest.raises(ValueError, match="L-L"):
        select_and_dispatch(profiles, SIZES, 3)


# -- local training ------------------------------------------------------------------

def _small_model(seed=0, dtype=np.float32):
    return build("cnn_s", 4, SHAPE, width=0.25, seed=seed, dtype=dtype).graph


def test_zero_lr_leaves_parameters_unchanged(data):
    model = _small_model()
    before = {k: v.data.copy() for k, v in parameters(model).items()}
    trained, _ = local_train(model, data.x_train[:60], data.y_train[:60], TrainSettings(epochs=2), lr=0.0)
    after = parameters(trained)
    assert all(np.array_equal(before[k], after[k].data) for k in before)
    assert all(np.array_equal(before[k], v.data) for k, v in parameters(model).items())


def test_local_loss_mostly_decreases(data):
    model = _small_model(1)
    _, losses = local_train(model, data.x_train[:200], data.y_train[:200], TrainSettings(epochs=5, lr=0.05),
                            lr=0.05, seed=0)
    drops = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0] and drops >= 3


def test_same_seed_same_weights_and_shuffle_invariance_at_full_batch(data):
    model = _small_model(2, np.float64)
    x, y = data.x_train[:40].astype(np.float64), data.y_train[:40]
    s = TrainSettings(epochs=1, batch_size=40)
    a, _ = local_train(model, x, y, s, lr=0.05, seed=[0, 1, 2])
    b, _ = local_train(model, x, y, s, lr=0.05, seed=[0, 1, 2])
    c, _ = local_train(model, x, y, s, lr=0.05, seed=[0, 1, 3])
    for (k, p), (_, q), (_, r) in zip(parameters(a).items(), parameters(b).items(), parameters(c).items()):
        assert np.array_equal(p.data, q.data), k
        # one full batch: the order only changes floating-point summation
        assert np.allclose(p.data, r.data, atol=1e-9), k


def test_evaluate_rejects_empty(data):
    with pytest.raises(ValueError):
        evaluate(_small_model(), data.x_test[:0], data.y_test[:0])
    acc, loss = evaluate(_small_model(), data.x_test, data.y_test, batch=33)
    assert 0 <= acc <= 1 and loss > 0


def test_serial_equals_parallel(data):
    group = make_group()
    shards = {s.client_id: s for s in iid_split(data.y_train, 6, seed=0)}
    jobs = [(c, m, group[m]) for c, m in [(0, "L-S"), (2, "L-M"), (3, "L-L"), (5, "L-S")]]
    s1 = TrainSettings(epochs=1, workers=1)
    s3 = TrainSettings(epochs=1, workers=3)
    a = train_clients(jobs, shards, data.x_train, data.y_train, s1, 4)
    b = train_clients(list(reversed(jobs)), shards, data.x_train, data.y_train, s3, 4)
    assert [u.client_id for u in a] == [u.client_id for u in b] == [0, 2, 3, 5]
    for u, v in zip(a, b):
        assert u.epoch_losses == v.epoch_losses
        assert all(u.state[k].tobytes() == v.state[k].tobytes() for k in u.state)


# -- aggregation ----------------------------------------------------------------

def test_weighted_mean_trivial():
    assert weighted_mean([np.array([0.0]), np.array([2.0])])[0] == 1.0
    assert weighted_mean([np.array([0.0]), np.array([2.0])], [3, 1])[0] == 0.5
    with pytest.raises(ValueError):
        weighted_mean([])


@pytest.fixture(scope="module")
def f64_group():
    return make_group(np.float64, width=0.0625)


@pytest.mark.parametrize("case", range(100))
def test_aggregate_matches_brute_force_means(f64_group, case):
    rng = np.random.default_rng(case)
    group = f64_group
    group.load_state({k: v + rng.standard_normal(v.shape) * 0.01 for k, v in group.state().items()})
    uploads = random_uploads(group, rng, int(rng.integers(1, 8)))
    weighted = bool(case % 2)
    exp = aggregation_oracle(group, uploads, weighted)
    report = aggregate(group, uploads, weighted=weighted)
    got = group.state()
    assert report.contributors["ex"] == len(uploads)
    for k in exp:
        assert rel(got[k], exp[k]) < 1e-7, k


def test_single_upload_is_copied(f64_group):
    rng = np.random.default_rng(0)
    (u,) = random_uploads(f64_group, rng, 1, ["L-M"])
    aggregate(f64_group, [u])
    st = state_dict(f64_group["L-M"])
    assert all(np.array_equal(st[k], u.state[k]) for k in st)


def test_seven_uploads_mixed_members(f64_group):
    rng = np.random.default_rng(7)
    ups = random_uploads(f64_group, rng, 7, ["L-S", "L-S", "L-M", "L-L", "L-M", "L-S", "L-L"])
    exp = aggregation_oracle(f64_group, ups, False)
    report = aggregate(f64_group, ups)
    assert report.contributors == {"ex": 7, "L-S": 3, "L-M": 2, "L-L": 2}
    got = f64_group.state()
    assert all(rel(got[k], exp[k]) < 1e-7 for k in exp)


def test_identical_uploads_are_conserved():
    group = make_group()
    before = {k: v.copy() for k, v in group.state().items()}
    ups = [Upload(c, m, state_dict(group[m]), 10) for c, m in enumerate(["L-S", "L-M", "L-L", "L-L"])]
    report = aggregate(group, ups, weighted=True)
    assert all(np.array_equal(before[k], v) for k, v in group.state().items())
    assert all(v == 0 for v in report.delta_norms.values())


def test_members_without_uploads_are_untouched(f64_group):
    rng = np.random.default_rng(1)
    before = {k: v.copy() for k, v in f64_group.state().items() if k.startswith("L-L.")}
    aggregate(f64_group, random_uploads(f64_group, rng, 3, ["L-S", "L-M", "L-S"]))
    after = f64_group.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_freeze_bn_keeps_running_stats(f64_group):
    rng = np.random.default_rng(2)
    buf = {k: v.copy() for k, v in f64_group.state().items() if k.endswith(("running_mean", "running_var"))}
    aggregate(f64_group, random_uploads(f64_group, rng, 3, ["L-L", "L-M", "L-S"]), freeze_bn=True)
    after = f64_group.state()
    assert buf and all(np.array_equal(buf[k], after[k]) for k in buf)


def test_bad_uploads_name_the_parameter(f64_group):
    rng = np.random.default_rng(3)
    (u,) = random_uploads(f64_group, rng, 1, ["L-S"])
    name = next(k for k in u.state if k.startswith("ad."))
    u.state[name] = u.state[name].copy()
    u.state[name].flat[0] = np.nan
    with pytest.raises(ValueError, match=name.replace(".", r"\.")):
        aggregate(f64_group, [u])
    u.state[name] = np.zeros((1, 2))
    with pytest.raises(ValueError, match=name.replace(".", r"\.")):
        aggregate(f64_group, [u])
    with pytest.raises(ValueError):
        aggregate(f64_group, [])
    with pytest.raises(ValueError):
        aggregate(f64_group, [Upload(0, "X-Y", {}, 1)])


@pytest.mark.parametrize("case", range(20))
def test_fedavg_matches_sample_weighted_mean(case):
    rng = np.random.default_rng(case)
    model = build("cnn_s", 4, SHAPE, width=0.125, seed=case, dtype=np.float64).graph
    ref = state_dict(model)
    ups = []
    for c in range(int(rng.integers(1, 6))):
        st = type(ref)((k, v + rng.standard_normal(v.shape)) for k, v in ref.items())
        ups.append(Upload(c, "L", st, int(rng.integers(1, 100))))
    w = np.array([u.num_samples for u in ups], float)
    fedavg_aggregate(model, ups)
    got = state_dict(model)
    for k in ref:
        exp = sum(wi * u.state[k] for wi, u in zip(w, ups)) / w.sum()
        assert rel(got[k], exp) < 1e-7


# -- the round loop ------------------------------------------------------------------

def _ctx(data, rounds, k=4, **kw):
    shards = iid_split(data.y_train, 8, seed=0)
    group = make_group()
    profiles = assign_levels(shards, [0.4, 0.4, 0.2], group, seed=0)
    settings = TrainSettings(epochs=1, lr=0.05, **kw)
    return group, RunContext(profiles, data.x_train, data.y_train, data.x_test, data.y_test, settings, rounds, k)


def test_zero_rounds_is_a_no_op(data):
    group, ctx = _ctx(data, 0)
    before = {k: v.copy() for k, v in group.state().items()}
    assert run_adapterfl(group, ctx) == []
    assert all(np.array_equal(before[k], v) for k, v in group.state().items())


def test_round_loop_records_and_callback(data):
    group, ctx = _ctx(data, 2)
    seen = []
    ctx.on_round = lambda t, rep: seen.append((t, rep.contributors["ex"]))
    recs = run_adapterfl(group, ctx)
    assert seen == [(1, 4), (2, 4)]
    assert [(r.round, r.model_id) for r in recs] == [(t, m) for t in (1, 2) for m in ("L-S", "L-M", "L-L")]
    assert recs[3].lr == pytest.approx(0.05 * 0.998)
    assert all(r.wall_time_ms == 0 for r in recs)
