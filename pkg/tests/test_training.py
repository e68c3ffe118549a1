import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphkit.grid import DomainError
from morphkit.layers import LayerSpec, NetworkSpec, build_adaptive, build_residual_mnn, build_stacked, init_states
from morphkit.soft import smooth_sign
from morphkit.training import (Decision, TrainConfig, TrainingDiverged, apply_sgd, binarize_se, cross_entropy_loss,
                               decide_operation, epoch_order, finite_diff_check, mse_loss, offset_aligned_taxicab,
                               se_exact_match, sgd_update, train)

finite = st.floats(-1e3, 1e3, allow_nan=False)


# -- losses ---------------------------------------------------------------------

def test_mse_loss_examples():
    x = np.random.default_rng(0).random((2, 1, 3, 3))
    loss, g = mse_loss(x, x)
    assert loss == 0 and not np.any(g)
    loss, g = mse_loss(np.array([1.0]), np.array([0.0]))
    assert loss == 1.0 and g[0] == 2.0
    with pytest.raises(DomainError):
        mse_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mse_gradient_matches_finite_difference(seed):
    # the oracle differences the loss in 50-digit arithmetic, so only the analytic side rounds
    mp.mp.dps = 50
    rng = np.random.default_rng(seed)
    p, t = rng.random((2, 5)), rng.random((2, 5))
    _, g = mse_loss(p, t)
    pm, tm = [mp.mpf(float(v)) for v in p.ravel()], [mp.mpf(float(v)) for v in t.ravel()]

    def loss(vals):
        return mp.fsum((a - b) ** 2 for a, b in zip(vals, tm)) / len(vals)

    h = mp.mpf("1e-6")
    for j in range(p.size):
        up, down = list(pm), list(pm)
        up[j] += h
        down[j] -= h
        fd = float((loss(up) - loss(down)) / (2 * h))
        assert abs(fd - g.flat[j]) / max(abs(fd), abs(g.flat[j]), 1e-8) < 1e-7


def test_cross_entropy_examples():
    loss, g = cross_entropy_loss(np.full((1, 10), 0.1), np.array([3]))
    assert loss == pytest.approx(2.302585, abs=1e-6)
    assert loss == pytest.approx(math.log(10), rel=1e-12)
    loss, _ = cross_entropy_loss(np.array([[0.0, 1.0, 0.0]]), np.array([1]))
    assert loss == 0.0
    with pytest.raises(DomainError):
        cross_entropy_loss(np.full((1, 3), 1 / 3), np.array([3]))
    with pytest.raises(DomainError):
        cross_entropy_loss(np.full((1, 3), 1 / 3), np.array([-1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 8))
def test_cross_entropy_gradient_rows_sum_to_zero(seed, n, k):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k), size=n)
    _, g = cross_entropy_loss(p, rng.integers(0, k, n))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


# -- SGD update -----------------------------------------------------------------------

def test_sgd_examples():
    assert sgd_update(np.array([1.0]), np.array([0.5]), 0.1)[0] == pytest.approx(0.95, abs=1e-15)
    w = np.random.default_rng(0).random(4)
    np.testing.assert_array_equal(sgd_update(w, np.zeros(4), 3.0), w)
    with pytest.raises(DomainError):
        sgd_update(np.zeros(2), np.zeros(3), 0.1)


@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=8), st.sampled_from([0.5, 0.25, 2.0]))
def test_sgd_frozen_grads_are_linear(rows, lr):
    # power-of-two rates keep every product exact
    w, g1, g2 = (np.array(c) for c in zip(*rows))
    twice = sgd_update(sgd_update(w, g1, lr), g2, lr)
    once = sgd_update(w, g1 + g2, lr)
    np.testing.assert_allclose(twice, once, rtol=1e-12, atol=1e-9)


def test_apply_sgd_touches_every_tensor():
    spec = build_adaptive((3, 3), (5, 5))
    states = init_states(spec, 0)
    before = [{k: v.copy() for k, v in s.items()} for s in states]
    grads = [{k: np.ones_like(v) for k, v in s.items()} for s in states]
    apply_sgd(states, grads, 0.5)
    for b, s in zip(before, states):
        for k in s:
            np.testing.assert_array_equal(s[k], b[k] - 0.5)


# -- training loop -------------------------------------------------------------

def _toy_problem(n=40, seed=0):
    spec = build_stacked(["dilate"], image_shape=(6, 6), form="additive")
    rng = np.random.default_rng(seed)
    x = rng.random((n, 1, 6, 6))
    truth_spec = build_stacked(["dilate"], image_shape=(6, 6), form="additive")
    truth = init_states(truth_spec, 99)
    from morphkit.layers import network_forward
    y, _ = network_forward(truth_spec, truth, x)
    return spec, x, y


def test_training_reduces_loss():
    spec, x, y = _toy_problem()
    states = init_states(spec, 1)
    rep = train(spec, states, x, y, TrainConfig(learning_rate=1.0, batch_size=8, epochs=5, seed=3))
    assert rep.final_loss < rep.initial_loss
    assert len(rep.epoch_losses) == 5 and rep.steps == 5 * 5


def test_perfect_fit_leaves_parameters_unchanged():
    spec, x, _ = _toy_problem()
    states = init_states(spec, 1)
    from morphkit.layers import network_forward
    y, _ = network_forward(spec, states, x)
    before = [{k: v.copy() for k, v in s.items()} for s in states]
    rep = train(spec, states, x, y, TrainConfig(learning_rate=1.0, epochs=1))
    assert rep.final_loss == 0.0
    for b, s in zip(before, states):
        for k in s:
            np.testing.assert_array_equal(s[k], b[k])


@pytest.mark.parametrize("workers", [2, 3])
def test_training_is_bitwise_independent_of_worker_count(workers):
    spec, x, y = _toy_problem(n=70)
    s1, s2 = init_states(spec, 5), init_states(spec, 5)
    cfg = dict(learning_rate=0.5, batch_size=32, epochs=3, seed=7)
    r1 = train(spec, s1, x, y, TrainConfig(workers=1, **cfg))
    r2 = train(spec, s2, x, y, TrainConfig(workers=workers, **cfg))
    assert r1.to_dict(timing=False) == r2.to_dict(timing=False)
    for a, b in zip(s1, s2):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_dropout_training_is_deterministic():
    spec = build_residual_mnn({"input": (6, 6), "fc": (8, 6), "classes": 3}, dropout=0.5)
    rng = np.random.default_rng(0)
    x, labels = rng.random((30, 1, 6, 6)), rng.integers(0, 3, 30)
    cfg = TrainConfig(learning_rate=0.05, batch_size=10, epochs=2, loss="cross_entropy", seed=4)
    runs = []
    for w in (1, 2):
        s = init_states(spec, 2)
        runs.append((train(spec, s, x, labels, TrainConfig(**{**cfg.__dict__, "workers": w})), s))
    assert runs[0][0].to_dict(False) == runs[1][0].to_dict(False)
    np.testing.assert_array_equal(runs[0][1][4]["weight"], runs[1][1][4]["weight"])


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(50, 3, 0)
    np.testing.assert_array_equal(a, epoch_order(50, 3, 0))
    assert sorted(a) == list(range(50))
    assert not np.array_equal(a, epoch_order(50, 3, 1))
    # seed + epoch keys the generator
    np.testing.assert_array_equal(epoch_order(50, 3, 1), epoch_order(50, 4, 0))
    np.testing.assert_array_equal(epoch_order(5, 0, 0, shuffle=False), np.arange(5))


def test_divergence_guard_names_step():
    spec, x, y = _toy_problem()
    states = init_states(spec, 1)
    with pytest.raises(TrainingDiverged) as err:
        train(spec, states, x, y * 1e5, TrainConfig(learning_rate=1.0, epochs=1))
    assert err.value.epoch == 0 and err.value.step == 0
    assert "dilation" in str(err.value)


def test_train_rejects_bad_inputs():
    spec, x, y = _toy_problem()
    states = init_states(spec, 1)
    with pytest.raises(DomainError):
        train(spec, states, x[:0], y[:0], TrainConfig(learning_rate=1.0))
    with pytest.raises(DomainError):
        train(spec, states, x, y[:3], TrainConfig(learning_rate=1.0))
    for bad in (dict(learning_rate=0.0), dict(learning_rate=1.0, batch_size=0), dict(learning_rate=1.0, seed=-1),
                dict(learning_rate=1.0, loss="hinge"), dict(learning_rate=1.0, smooth="sigmoid")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- gradient checker --------------------------------------------------------

def test_fd_check_linear_dense_is_exact():
    spec = NetworkSpec((1, 2, 3), [LayerSpec("flatten"), LayerSpec("dense", fc_width=4)])
    rng = np.random.default_rng(0)
    states = init_states(spec, rng)
    assert finite_diff_check(spec, states, (rng.random((3, 1, 2, 3)), rng.random((3, 4)))) < 1e-9


@pytest.mark.parametrize("form", ["product", "additive"])
def test_fd_check_opening_net(form):
    spec = build_stacked(["erode", "dilate"], image_shape=(8, 8), form=form)
    rng = np.random.default_rng(1)
    states = init_states(spec, rng)
    assert finite_diff_check(spec, states, (rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8)))) < 1e-4


@pytest.mark.parametrize("smooth", ["tanh", "softsign"])
def test_fd_check_adaptive_gate(smooth):
    spec = build_adaptive((3, 3), (8, 8), smooth)
    rng = np.random.default_rng(2)
    states = init_states(spec, rng)
    errs = finite_diff_check(spec, states, (rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))), per_tensor=True)
    assert errs["0:adaptive.gate"] < 1e-5
    assert max(errs.values()) < 1e-5


def test_fd_check_detects_a_wrong_gradient(monkeypatch):
    spec = NetworkSpec((1, 2, 2), [LayerSpec("flatten"), LayerSpec("dense", fc_width=2)])
    rng = np.random.default_rng(0)
    states = init_states(spec, rng)
    import morphkit.training as tr
    real = tr.loss_and_grads

    def broken(*a, **k):
        v, g = real(*a, **k)
        g[1]["bias"] = g[1]["bias"] * 1.5
        return v, g

    monkeypatch.setattr(tr, "loss_and_grads", broken)
    errs = finite_diff_check(spec, states, (rng.random((2, 1, 2, 2)), rng.random((2, 2))), per_tensor=True)
    assert errs["1:dense.bias"] > 0.3 and errs["1:dense.weight"] < 1e-9


def test_fd_check_subsamples_large_networks():
    spec = NetworkSpec((1, 4, 4), [LayerSpec("flatten"), LayerSpec("dense", fc_width=8)])
    rng = np.random.default_rng(0)
    states = init_states(spec, rng)
    calls = []
    import morphkit.training as tr
    real = tr.loss_and_grads
    try:
        tr.loss_and_grads = lambda *a, **k: calls.append(1) or real(*a, **k)
        finite_diff_check(spec, states, (rng.random((1, 1, 4, 4)), rng.random((1, 8))), max_params=10)
    finally:
        tr.loss_and_grads = real
    assert len(calls) == 1 + 2 * 10


# -- SE metrics and decision ----------------------------------------------------------

def test_binarize_examples():
    np.testing.assert_array_equal(binarize_se([0.49, 0.51]), [0.0, 1.0])
    flat = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=float)
    np.testing.assert_array_equal(binarize_se(flat), flat)


def test_exact_match():
    a = np.eye(3)
    assert se_exact_match(a, a.copy())
    b = a.copy()
    b[0, 1] = 1
    assert not se_exact_match(a, b)
    with pytest.raises(DomainError):
        se_exact_match(np.eye(3), np.eye(2))


@given(st.lists(finite, min_size=9, max_size=9), st.floats(-50, 50))
def test_aligned_taxicab_ignores_constant_offset(vals, c):
    w = np.array(vals).reshape(3, 3)
    assert offset_aligned_taxicab(w + c, w) == pytest.approx(0.0, abs=1e-9)


def test_decision_examples():
    assert smooth_sign(2.0, "tanh") == pytest.approx(0.964, abs=5e-4)
    assert decide_operation(2.0, "tanh") is Decision.DILATION
    assert smooth_sign(-0.3, "softsign") == pytest.approx(-0.2308, abs=5e-5)
    assert decide_operation(-0.3, "softsign") is Decision.UNDECIDED
    assert decide_operation(0.0, "tanh") is Decision.UNDECIDED
    assert decide_operation(0.0, "softsign") is Decision.UNDECIDED
    assert decide_operation(-5.0, "softsign") is Decision.EROSION


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_decision_undecided_iff_small_magnitude(a):
    for kind in ("tanh", "softsign"):
        v = smooth_sign(a, kind)
        assert (decide_operation(a, kind) is Decision.UNDECIDED) == (abs(v) <= 0.5)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_decision_agrees_across_smooth_signs(a):
    if abs(smooth_sign(a, "tanh")) > 0.5 and abs(smooth_sign(a, "softsign")) > 0.5:
        assert decide_operation(a, "tanh") is decide_operation(a, "softsign")
