import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netcompress.exceptions import SearchError
from netcompress.gp import GPRegressor
from netcompress.metrics import synthetic_curve
from netcompress.search import (BlackBox, LevelSetConfig, TwoStageSearch, candidate_grid,
                                dr_ucb_score, lcb_score, next_sample, stage1_level_set,
                                stage2_optimize, ucb_score)

TOP = 0.93


def dense_crossing(fn, level, lo=0.0, hi=1.0, step=1e-5):
    grid = np.arange(lo, hi, step)
    vals = np.array([fn(s) for s in grid])
    return float(grid[np.argmax(vals < level)])


def check_stage1_invariants(state, blackbox_fn, s_acc):
    feas = [r["s"] for r in state.trace if r["feasible"]]
    assert all(b > a for a, b in zip(feas, feas[1:]))
    assert all(b >= a for a, b in zip(state.domain_history, state.domain_history[1:]))
    assert blackbox_fn(s_acc) >= state.level
    assert s_acc == max(feas)
    assert len(state.trace) <= 10


def test_dr_ucb_endpoints():
    assert dr_ucb_score(0.3, 0.2, 0.5, 0.0) == pytest.approx(0.2)
    assert dr_ucb_score(0.3, 0.2, 0.5, 1.0) == pytest.approx(-0.2)
    assert dr_ucb_score(0.5, 0.1, 0.5, 0.95) == pytest.approx(0.005)


def test_ucb_lcb():
    assert ucb_score(0.5, 0.2, 2) == pytest.approx(0.9)
    assert lcb_score(0.5, 0.2, 2) == pytest.approx(0.1)
    assert ucb_score(0.5, 0.2, 0) == lcb_score(0.5, 0.2, 0) == 0.5
    mu = np.sin(np.linspace(0, 3, 50))
    assert np.argmax(ucb_score(mu, np.full(50, 0.3))) == np.argmax(mu)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(-6400, 6400))
def test_ucb_argmax_shift_invariant(seed, shift):
    # dyadic values keep every sum exact, so argmax comparisons are exact too
    rng = np.random.default_rng(seed)
    mu, sd, c = rng.integers(-640, 640, 64) / 64, rng.integers(0, 64, 64) / 64, shift / 64
    assert np.argmax(ucb_score(mu + c, sd, 2)) == np.argmax(ucb_score(mu, sd, 2))


def test_prior_only_picks_lowest_grid_point():
    s, _ = next_sample(None, (0.0, 1.0), [], lambda m, v: dr_ucb_score(m, v, 0.5, 0.95), 16)
    assert s == candidate_grid(0.0, 1.0, 16)[0]


def test_restricted_domain_respected():
    gp = GPRegressor().fit([0.25, 0.75, 0.8], [0.9, 0.9, 0.92])
    for gamma in (0.0, 0.5, 0.95, 1.0):
        s, _ = next_sample(gp, (0.8, 1.0), [0.25, 0.75, 0.8],
                           lambda m, v: dr_ucb_score(m, v, 0.91, gamma), 1024)
        assert 0.8 < s < 1.0


def test_next_sample_matches_brute_force():
    rng = np.random.default_rng(3)
    X, y = rng.uniform(0, 1, 5), rng.uniform(0.5, 0.95, 5)
    gp = GPRegressor().fit(X, y)
    grid = np.linspace(0, 1, 258)[1:-1]
    keep = [g for g in grid if min(abs(g - x) for x in X) >= 0.5 / 257]
    best_val, best_s = -math.inf, None
    for g in keep:
        mu, sd = gp.predict([g], return_std=True)
        v = float(dr_ucb_score(mu[0], sd[0], 0.8, 0.95))
        if v > best_val:
            best_val, best_s = v, g
    s, val = next_sample(gp, (0, 1), X, lambda m, v: dr_ucb_score(m, v, 0.8, 0.95), 256)
    assert s == best_s and val == pytest.approx(best_val, abs=1e-12)


def test_stage1_flat_curve():
    curve = synthetic_curve("flat")
    s_acc, state = stage1_level_set(BlackBox(curve), TOP, LevelSetConfig(T=10))
    assert s_acc >= 0.99
    check_stage1_invariants(state, curve.value, s_acc)


def test_stage1_step_curve():
    curve = synthetic_curve("step")
    s_acc, state = stage1_level_set(BlackBox(curve), TOP, LevelSetConfig(T=10))
    assert s_acc < 0.5 and curve.value(s_acc) >= TOP - 0.02
    check_stage1_invariants(state, curve.value, s_acc)


def test_stage1_logistic_curve():
    curve = synthetic_curve("logistic")
    crossing = dense_crossing(curve.value, TOP - 0.02)
    assert crossing == pytest.approx(0.7546, abs=1e-4)
    s_acc, state = stage1_level_set(BlackBox(curve), TOP, LevelSetConfig(T=10))
    assert abs(s_acc - crossing) <= 0.02
    check_stage1_invariants(state, curve.value, s_acc)


@pytest.mark.parametrize("name", ["knee", "logistic"])
@pytest.mark.parametrize("noise", [0.0, 0.005])
def test_stage1_invariants_other_curves(name, noise):
    for seed in range(5):
        curve = synthetic_curve(name, seed=seed, noise=noise)
        s_acc, state = stage1_level_set(BlackBox(curve), TOP, LevelSetConfig(T=10))
        check_stage1_invariants(state, curve.value, s_acc)


def test_stage1_infeasible_raises_with_trace():
    with pytest.raises(SearchError) as info:
        stage1_level_set(BlackBox(lambda s: 0.1), TOP, LevelSetConfig(T=4))
    assert len(info.value.trace) == 4


def test_stage1_budget_and_memo():
    box = BlackBox(synthetic_curve("logistic"))
    stage1_level_set(box, TOP, LevelSetConfig(T=10))
    assert box.calls <= 10
    box(0.25)
    assert box.calls <= 10


def test_stage1_determinism():
    runs = [stage1_level_set(BlackBox(synthetic_curve("knee")), TOP)[1].trace for _ in range(2)]
    assert [r["s"] for r in runs[0]] == [r["s"] for r in runs[1]]


def test_stage2_monotone_min_hits_boundary():
    s_star, state = stage2_optimize(BlackBox(lambda s: 100 - 50 * s), 0.8, "min")
    assert s_star == 0.8
    assert max(s for s, _ in state.samples) == 0.8


def test_stage2_constant_returns_first():
    s_star, state = stage2_optimize(BlackBox(lambda s: 1.0), 0.8, "max")
    assert s_star == state.samples[0][0]


def test_stage2_quadratic():
    f = lambda s: -(s - 0.4) ** 2  # noqa: E731
    s_star, state = stage2_optimize(BlackBox(f), 0.8, "max", LevelSetConfig(T=10))
    grid = np.linspace(0, 0.8, 80001)
    assert abs(s_star - grid[np.argmax([f(g) for g in grid])]) <= 0.05
    assert len(state.samples) <= 10
    assert any(abs(s - 0.8) < 1e-12 for s, _ in state.samples)


def test_config_validation():
    for bad in (dict(gamma=1.5), dict(T=1), dict(epsilon=1.5), dict(epsilon=0), dict(grid_size=1)):
        with pytest.raises(ValueError):
            LevelSetConfig(**bad)


def test_two_stage_estimator():
    est = TwoStageSearch(direction="max")
    assert est.get_params()["gamma"] == 0.95
    est.fit(synthetic_curve("logistic"), lambda s: -(s - 0.3) ** 2, baseline_accuracy=TOP)
    assert est.s_acc_ >= est.s_star_ > 0
    stages = [r["stage"] for r in est.trace_]
    assert stages.count(1) <= 10 and stages.count(2) <= 10
    only1 = TwoStageSearch().fit(synthetic_curve("flat"), baseline_accuracy=TOP)
    assert only1.s_star_ == only1.s_acc_
    with pytest.raises(ValueError):
        TwoStageSearch().fit(synthetic_curve("flat"))
