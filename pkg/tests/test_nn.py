import math

import numpy as np
import pytest

from adapterfl.nn import (SGD, BatchNorm2d, Conv2d, Dense, Flatten, ModelGraph, Parameter, ReLU, ShapeError,
                          cross_entropy, load_state_dict, loss_and_grads, lr_at, param_count, softmax, state_dict)
from gradcheck import check_module
from layer_cases import CASES


# -- direct-loop oracle for a conv -> relu -> flatten -> dense model ----------------

def conv_loops(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oc in range(o):
            grp = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for ci in range(cg):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[oc, ci, di, dj] * xp[ni, grp * cg + ci, i * stride + di, j * stride + dj]
                    out[ni, oc, i, j] = acc
    return out


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(7)
    conv = Conv2d(4, 6, 3, stride=2, pad=1, groups=2, rng=rng, dtype=np.float64)
    conv.params["bias"].data[...] = rng.standard_normal(6)
    dense = Dense(6 * 3 * 3, 5, rng=rng, dtype=np.float64)
    dense.params["bias"].data[...] = rng.standard_normal(5)
    model = ModelGraph([("conv", conv), ("relu", ReLU()), ("flat", Flatten()), ("fc", dense)], (4, 5, 5))
    x = rng.standard_normal((3, 4, 5, 5))
    h = np.maximum(conv_loops(x, conv.params["weight"].data, conv.params["bias"].data, 2, 1, 2), 0)
    ref = h.reshape(3, -1) @ dense.params["weight"].data.T + dense.params["bias"].data
    out = model.forward(x)
    assert np.max(np.abs(out - ref) / (np.abs(ref) + 1e-12)) < 1e-6


def test_zero_dense_gives_zero_logits():
    d = Dense(7, 4)
    d.params["weight"].data[...] = 0
    model = ModelGraph([("flat", Flatten()), ("fc", d)], (1, 7, 1))
    assert np.all(model.forward(np.random.default_rng(0).standard_normal((5, 1, 7, 1))) == 0)


def test_identity_grouped_1x1_conv():
    c = Conv2d(5, 5, 1, groups=5, bias=False)
    c.params["weight"].data[...] = 1.0
    x = np.random.default_rng(1).standard_normal((2, 5, 4, 3)).astype(np.float32)
    assert np.array_equal(c.forward(x), x)
    assert np.array_equal(c.forward(x, train=True), x)


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    module, x = CASES[name](rng)
    errs = check_module(module, x, rng)
    assert max(errs.values()) < 1e-3, errs


def test_loss_and_grads_end_to_end_finite_difference():
    rng = np.random.default_rng(3)
    model = ModelGraph([("conv", Conv2d(2, 3, 3, pad=1, rng=rng, dtype=np.float64)),
                        ("bn", BatchNorm2d(3, dtype=np.float64)), ("relu", ReLU()),
                        ("flat", Flatten()), ("fc", Dense(3 * 4 * 4, 4, rng=rng, dtype=np.float64))], (2, 4, 4))
    x = rng.standard_normal((6, 2, 4, 4))
    y = rng.integers(0, 4, 6)
    _, params = loss_and_grads(model, x, y)
    for name, p in params.items():
        i = np.unravel_index(int(rng.integers(p.size)), p.shape)
        old = p.data[i]
        p.data[i] = old + 1e-5
        hi, _ = cross_entropy(model.forward(x, train=True), y)
        p.data[i] = old - 1e-5
        lo, _ = cross_entropy(model.forward(x, train=True), y)
        p.data[i] = old
        num = (hi - lo) / 2e-5
        assert abs(num - p.grad[i]) <= 1e-6 + 1e-4 * abs(num), name


def test_uniform_logits_loss_is_log_k():
    loss, _ = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 9, 5]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_confident_logits_loss_near_zero():
    logits = np.full((3, 5), -50.0)
    labels = np.array([1, 4, 0])
    logits[np.arange(3), labels] = 50.0
    assert cross_entropy(logits, labels)[0] < 1e-30


def test_label_out_of_range_raises():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(0).standard_normal((50, 7)) * 30
    assert np.allclose(softmax(z).sum(1), 1, atol=1e-6)


def test_shape_error_names_layer():
    model = ModelGraph([("conv1", Conv2d(3, 4, 3)), ("relu", ReLU()), ("conv2", Conv2d(5, 2, 1))], (3, 8, 8))
    with pytest.raises(ShapeError) as e:
        model.forward(np.zeros((1, 3, 8, 8), np.float32))
    assert e.value.layer == "conv2"
    with pytest.raises(ShapeError) as e:
        model.forward(np.zeros((1, 3, 9, 8), np.float32))
    assert e.value.layer == "conv1"


def test_conv_param_count_arithmetic():
    assert param_count(Conv2d(3, 16, 3)) == 3 * 16 * 9 + 16


def test_param_count_excludes_running_stats_and_is_stable():
    rng = np.random.default_rng(0)
    model = ModelGraph([("conv", Conv2d(3, 4, 3, rng=rng)), ("bn", BatchNorm2d(4)), ("flat", Flatten()),
                        ("fc", Dense(4 * 4 * 4, 3, rng=rng))], (3, 6, 6))
    before = param_count(model)
    assert before == 3 * 4 * 9 + 4 + 8 + 64 * 3 + 3
    loss_and_grads(model, rng.standard_normal((2, 3, 6, 6)), np.array([0, 2]))
    assert param_count(model) == before


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        model = ModelGraph([("conv", Conv2d(3, 4, 3, pad=1, rng=rng)), ("bn", BatchNorm2d(4)), ("relu", ReLU()),
                            ("flat", Flatten()), ("fc", Dense(64, 3, rng=rng))], (3, 4, 4))
        x = rng.standard_normal((5, 3, 4, 4)).astype(np.float32)
        loss, params = loss_and_grads(model, x, np.array([0, 1, 2, 0, 1]))
        return loss, [p.grad.copy() for p in params.values()]
    a, b = run(), run()
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))


def test_batchnorm_running_stats_momentum_and_eval():
    bn = BatchNorm2d(2, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) * 2 + 1
    bn.forward(x, train=True)
    m = 4 * 9
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * m / (m - 1)
    assert np.allclose(bn.buffers["running_mean"], 0.1 * mean)
    assert np.allclose(bn.buffers["running_var"], 0.9 + 0.1 * var)
    y = bn.forward(x)
    ref = (x - bn.buffers["running_mean"][None, :, None, None]) / np.sqrt(
        bn.buffers["running_var"][None, :, None, None] + bn.eps)
    assert np.allclose(y, ref)


def test_eval_folding_matches_unfolded():
    rng = np.random.default_rng(2)
    conv, bn = Conv2d(3, 4, 3, pad=1, rng=rng, dtype=np.float64), BatchNorm2d(4, dtype=np.float64)
    bn.buffers["running_mean"][...] = rng.standard_normal(4)
    bn.buffers["running_var"][...] = rng.uniform(0.5, 2, 4)
    bn.params["weight"].data[...] = rng.uniform(0.5, 2, 4)
    model = ModelGraph([("conv", conv), ("bn", bn)], (3, 5, 5))
    x = rng.standard_normal((2, 3, 5, 5))
    folded = model.forward(x)
    unfolded = bn.forward(conv.forward(x))
    assert np.allclose(folded, unfolded, atol=1e-12)
    model.forward(x, capture=[1])
    assert np.allclose(model.captured[1], conv.forward(x))


def test_state_dict_round_trip_and_strictness():
    rng = np.random.default_rng(0)
    a = ModelGraph([("conv", Conv2d(3, 4, 3, rng=rng)), ("bn", BatchNorm2d(4))], (3, 5, 5))
    b = ModelGraph([("conv", Conv2d(3, 4, 3, rng=np.random.default_rng(9))), ("bn", BatchNorm2d(4))], (3, 5, 5))
    a["bn"].buffers["running_mean"][...] = 3.0
    load_state_dict(b, state_dict(a))
    assert all(np.array_equal(x, y) for x, y in zip(state_dict(a).values(), state_dict(b).values()))
    bad = state_dict(a)
    bad["conv.weight"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        load_state_dict(b, bad)
    with pytest.raises(KeyError):
        load_state_dict(b, {"conv.weight": state_dict(a)["conv.weight"]})


# -- optimizer ----------------------------------------------------------------

def _single(w, g):
    p = Parameter(np.array([w]))
    p.grad[...] = g
    return p


def test_sgd_plain_step():
    p = _single(1.0, 0.5)
    SGD({"w": p}, lr=0.01, momentum=0, weight_decay=0).step()
    assert p.data[0] == pytest.approx(0.995, abs=1e-15)
    assert p.grad[0] == 0


def test_sgd_zero_grad_leaves_weight():
    p = _single(1.3, 0.0)
    SGD({"w": p}, lr=0.1, momentum=0.5, weight_decay=0).step()
    assert p.data[0] == 1.3


def test_sgd_two_step_recurrence():
    lr, mom, wd = 0.1, 0.5, 1e-3
    p = _single(2.0, 0.7)
    opt = SGD({"w": p}, lr=lr, momentum=mom, weight_decay=wd)
    w, v = 2.0, 0.0
    for g in (0.7, -0.3):
        p.grad[...] = g
        opt.step()
        v = mom * v + (g + wd * w)
        w = w - lr * v
        assert p.data[0] == pytest.approx(w, rel=1e-14)


def test_sgd_empty_is_noop_and_validation():
    SGD({}).step()
    with pytest.raises(ValueError):
        SGD({}, momentum=1.0)
    with pytest.raises(ValueError):
        SGD({}, lr_decay=0.0)


def test_lr_schedule_per_round():
    assert lr_at(0.01, 0.998, 0) == 0.01
    assert lr_at(0.01, 0.998, 3) == pytest.approx(0.01 * 0.998 ** 3)
    rates = [lr_at(0.01, 0.998, t) for t in range(5)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    opt = SGD({}, lr=0.01, lr_decay=0.998)
    opt.decay()
    assert opt.lr == pytest.approx(0.00998)


@pytest.mark.parametrize("shape,groups", [((2, 4, 3, 3), 1), ((2, 4, 9, 9), 1), ((2, 4, 5, 5), 4), ((2, 4, 6, 6), 2)])
def test_eval_and_train_conv_paths_agree(shape, groups):
    rng = np.random.default_rng(0)
    conv = Conv2d(4, 4, 3, stride=1 + (shape[2] % 2 == 0), pad=1, groups=groups, rng=rng, dtype=np.float64)
    conv.params["bias"].data[...] = rng.standard_normal(4)
    x = rng.standard_normal(shape)
    ref = conv_loops(x, conv.params["weight"].data, conv.params["bias"].data, conv.stride, 1, groups)
    assert np.allclose(conv.forward(x), ref, atol=1e-12)
    assert np.allclose(conv.forward(x, train=True), ref, atol=1e-12)
