import json

import numpy as np
import pytest

from finstress.errors import DataError, NumericError
from finstress.stress import (
    FeatureBounds,
    LinearSurrogate,
    PerturbationSpec,
    checkbounds,
    perturb,
    perturbation_norms,
    results_to_json,
    step_once,
    sweep,
    unperturbed,
)
from finstress.timeseries import FeatureMatrix, SplitSpec, Window, standardize_features

from conftest import check_bounds_and_budget, random_forecaster, random_perturb_run, single_step_sign_matches, small_window


def _surrogate(rng, h=2, k=3, N=3, positive=True):
    w = rng.uniform(0.1, 1.0, size=(3, h, k, N))
    if not positive:
        w *= rng.choice([-1, 1], size=w.shape)
    offset = np.tile([0.0, 50.0, 50.0], (h, 1))
    return LinearSurrogate(w, offset)


def test_checkbounds_closed_interval():
    b = FeatureBounds([0.0], [1.0])
    assert checkbounds(0, 0, 0.5, b)
    assert not checkbounds(0, 0, 1.0 + 1e-9, b)
    assert checkbounds(0, 0, 1.0, b) and checkbounds(0, 0, 0.0, b)


def test_spec_validation():
    assert PerturbationSpec("sigma", "down", 0.1).p == 1
    assert PerturbationSpec("sigma", "down", 0.1).d == -1
    for bad in [dict(epsilon=0.0), dict(epsilon=-1.0), dict(iterations=0)]:
        with pytest.raises(ValueError):
            PerturbationSpec(**{"p": 0, "d": 1, "epsilon": 0.1, **bad})
    with pytest.raises(ValueError):
        PerturbationSpec(0, 0, 0.1)
    with pytest.raises(ValueError):
        FeatureBounds([1.0], [0.0])


def test_bounds_from_stats_uses_training_range_and_skips_constant_features():
    X = np.array([[0.0, 1.0, 2.0, 3.0, 9.0, -9.0], [5.0] * 6])
    fm, stats = standardize_features(FeatureMatrix(("a", "b"), X, tuple(range(6))), SplitSpec((0, 4), (4, 5), (5, 6)))
    b = FeatureBounds.from_stats(stats)
    Z = fm.data[:, :4]
    np.testing.assert_allclose(b.lower[0], Z[0].min())
    np.testing.assert_allclose(b.upper[0], Z[0].max())
    assert list(b.candidates) == [True, False]
    assert list(FeatureBounds.from_stats(stats, (-2.0, 2.0)).upper) == [2.0, 2.0]


def test_linear_surrogate_steps_are_exact():
    rng = np.random.default_rng(0)
    model = _surrogate(rng)
    X = rng.normal(size=(3, 3))
    res = perturb(model, np.zeros(len(X)), X, PerturbationSpec("mu", "up", 0.05), FeatureBounds.unbounded(3))
    assert len(res.log) == 2 * 3
    expected = res.theta.theta[:, 0].copy()
    for e in res.log:
        expected += 0.05 * model.weights[0, :, e.history_step, e.feature]
        assert e.feature == int(np.argmax(model.weights[0, e.horizon_step, e.history_step]))
    np.testing.assert_allclose(res.theta_perturbed.theta[:, 0], expected, rtol=0, atol=1e-12)
    assert np.all(res.theta_perturbed.theta[:, 0] > res.theta.theta[:, 0])


def test_linear_surrogate_up_down_ordering():
    rng = np.random.default_rng(1)
    for _ in range(50):
        model = _surrogate(rng, h=1, positive=False)
        X = rng.normal(size=(3, 3))
        p = int(rng.integers(3))
        b = FeatureBounds(np.full(3, -2.0), np.full(3, 2.0))
        up = perturb(model, np.zeros(len(X)), X, PerturbationSpec(p, "up", 0.2, 2), b)
        down = perturb(model, np.zeros(len(X)), X, PerturbationSpec(p, "down", 0.2, 2), b)
        base = up.theta.theta[:, p]
        assert np.all(up.theta_perturbed.theta[:, p] >= base) and np.all(base >= down.theta_perturbed.theta[:, p])


def test_all_blocked_terminates_early():
    rng = np.random.default_rng(2)
    model = _surrogate(rng)
    X = np.ones((3, 3))
    res = perturb(model, np.zeros(len(X)), X, PerturbationSpec("mu", "up", 0.5, 3), FeatureBounds(np.zeros(3), np.ones(3)))
    assert res.terminated_early and res.log == ()
    np.testing.assert_array_equal(res.x_perturbed, X)


def test_blocked_feature_falls_back_to_next_largest():
    w = np.zeros((3, 1, 1, 3))
    w[0, 0, 0] = [0.2, 0.9, 0.5]
    model = LinearSurrogate(w, np.array([[0.0, 1.0, 3.0]]))
    b = FeatureBounds([-1, -1, -1], [1, 0.05, 1])
    res = perturb(model, np.zeros(1), np.zeros((1, 3)), PerturbationSpec("mu", "up", 0.1), b)
    assert [e.feature for e in res.log] == [2]


def test_zero_gradient_cell_is_skipped():
    model = LinearSurrogate(np.zeros((3, 1, 2, 2)), np.array([[0.0, 1.0, 3.0]]))
    res = perturb(model, np.zeros(2), np.zeros((2, 2)), PerturbationSpec("mu", "up", 0.1), FeatureBounds.unbounded(2))
    assert res.log == () and res.terminated_early


def test_tie_breaks_to_lowest_index():
    w = np.ones((3, 1, 1, 3))
    res = perturb(LinearSurrogate(w, np.array([[0.0, 1.0, 3.0]])), np.zeros(1), np.zeros((1, 3)), PerturbationSpec(0, 1, 0.1), FeatureBounds.unbounded(3))
    assert res.log[0].feature == 0


def test_norms_examples():
    rng = np.random.default_rng(3)
    model = _surrogate(rng, h=1, k=1, N=2)
    X = np.zeros((1, 2))
    assert perturbation_norms(unperturbed(model, np.zeros(len(X)), X)) == (0.0, 0.0, 0)
    one = perturb(model, np.zeros(len(X)), X, PerturbationSpec(0, 1, 0.01), FeatureBounds.unbounded(2))
    assert perturbation_norms(one) == pytest.approx((0.01, 0.01, 1), abs=1e-15)
    two = perturb(model, np.zeros(len(X)), X, PerturbationSpec(0, 1, 0.01, 2), FeatureBounds.unbounded(2))
    assert perturbation_norms(two)[1] == pytest.approx(0.02, abs=1e-15)


def _windows(rng, n, k, N):
    return [Window(i, *small_window(rng, k, N), np.zeros(1)) for i in range(n)]


def test_sweep_sets_and_monotone_l1():
    rng = np.random.default_rng(4)
    model = _surrogate(rng, h=1)
    wins = _windows(rng, 5, 3, 3)
    bounds = FeatureBounds(np.full(3, -3.0), np.full(3, 3.0))
    out = sweep(model, wins, {"p": "mu", "d": "up", "iterations": 2}, [0.01, 0.03, 0.1], bounds)
    assert list(out) == [0.01, 0.03, 0.1]
    l1 = [sum(perturbation_norms(r)[0] for r in out[e]) for e in out]
    assert l1 == sorted(l1)
    zero = sweep(model, wins, PerturbationSpec("mu", "up", 0.1), [0.0], bounds)[0.0]
    for r, w in zip(zero, wins):
        np.testing.assert_array_equal(r.theta_perturbed.theta, model.forecast(w.z_history, w.x_history).theta)
    with pytest.raises(ValueError):
        sweep(model, wins, PerturbationSpec("mu", "up", 0.1), [0.1, 0.01], bounds)


def test_shape_and_numeric_errors():
    rng = np.random.default_rng(5)
    model = _surrogate(rng)
    with pytest.raises(DataError):
        perturb(model, np.zeros(3), np.zeros((3, 2)), PerturbationSpec(0, 1, 0.1), FeatureBounds.unbounded(3))

    class Broken(LinearSurrogate):
        def input_gradient(self, z, X, p, t):
            return np.full(X.shape, np.nan)

    with pytest.raises(NumericError, match="t=0, s=0"):
        perturb(Broken(model.weights, model.offset), np.zeros(3), np.zeros((3, 3)), PerturbationSpec(0, 1, 0.1), FeatureBounds.unbounded(3))


@pytest.mark.parametrize("seed", range(40))
def test_bounds_and_budget_on_random_runs(seed):
    res, bounds = random_perturb_run(seed)
    assert check_bounds_and_budget(res, bounds)


def test_determinism_including_log():
    a, _ = random_perturb_run(11)
    b, _ = random_perturb_run(11)
    assert results_to_json([a]) == results_to_json([b])
    assert json.loads(results_to_json([a]))[0]["norms"]["modified"] == perturbation_norms(a)[2]


def test_single_step_directionality():
    hits = sum(single_step_sign_matches(seed) for seed in range(200))
    assert hits >= 190


def test_ablated_feature_never_selected():
    rng = np.random.default_rng(6)
    for _ in range(20):
        model, N, k = random_forecaster(rng, N=3)
        w_ih = model.params.w_ih.copy()
        w_ih[:, 1 + 1] = 0.0
        model = type(model)(model.params.replace(w_ih=w_ih), k, model.horizon)
        z, X = small_window(rng, k, N)
        res = perturb(model, z, X, PerturbationSpec(int(rng.integers(3)), 1, 0.1, 2), FeatureBounds.unbounded(N))
        assert all(e.feature != 1 for e in res.log)


def test_step_once_leaves_input_untouched():
    rng = np.random.default_rng(7)
    model, N, k = random_forecaster(rng)
    z, X = small_window(rng, k, N)
    before = X.copy()
    step_once(model, z, X, PerturbationSpec(0, 1, 0.1), 0, 0, FeatureBounds.unbounded(N))
    np.testing.assert_array_equal(X, before)


def test_coupled_model_targets_feature_one(coupled):
    _, prep, model, _ = coupled
    bounds = FeatureBounds.from_stats(prep.stats)
    spec = PerturbationSpec("mu", "up", 0.03)
    share = []
    for w in prep.test_windows[:20]:
        delta = np.abs(perturb(model, w.z_history, w.x_history, spec, bounds).delta).sum(axis=0)
        share.append(delta[0] / delta.sum())
    assert np.mean(share) >= 0.7
