import logging

import numpy as np
import pytest

from thbtopo.mma import MmaError, MmaState, check_convergence, gcmma_step


def optimise(fun, x0, n=30, lower=0.0, upper=1.0, conservative=True):
    st = MmaState.create(len(x0), lower, upper)
    x = np.array(x0, dtype=float)
    trace = []
    for _ in range(n):
        f, df, g, dg = fun(x)
        trace.append((x.copy(), f, g))
        x, st, info = gcmma_step(x, (f, df), (g, dg), st, (lambda y: fun(y)[::2]) if conservative else None)
    return x, st, trace


def quad1(x):
    return (x[0] - 0.3) ** 2, 2 * (x - 0.3), -1.0, np.zeros(1)


def linear_with_cap(x):
    return -x[0], -np.ones(1), x[0] - 0.5, np.ones(1)


def test_quadratic_minimum():
    x, _, _ = optimise(quad1, [0.9])
    assert abs(x[0] - 0.3) < 1e-4


def test_active_constraint():
    x, _, trace = optimise(linear_with_cap, [0.1])
    assert abs(x[0] - 0.5) < 1e-4
    assert trace[-1][2] <= 1e-6


def test_bounds_respected_with_outward_gradient():
    # objective pushes past both bounds; iterates stay inside
    for x0, sign in ((0.0, 1.0), (1.0, -1.0)):
        fun = lambda x, s=sign: (s * x[0], np.array([s]), -1.0, np.zeros(1))
        x, _, trace = optimise(fun, [x0], n=5)
        assert all(0.0 <= t[0][0] <= 1.0 for t in trace) and 0.0 <= x[0] <= 1.0


def test_per_variable_box_and_pinned_variables():
    target = np.array([0.2, 0.8, -1.0])
    fun = lambda x: (np.sum((x - target) ** 2), 2 * (x - target), -1.0, np.zeros(3))
    x, _, trace = optimise(fun, [0.5, 0.5, 0.5], n=40, lower=[0.0, 0.0, 0.5], upper=[1.0, 0.6, 0.5])
    assert np.allclose(x, [0.2, 0.6, 0.5], atol=1e-3)
    assert all(t[0][2] == 0.5 for t in trace)


def test_inner_multipliers_monotone_and_objective_nonincreasing():
    c = np.array([0.2, 0.8, 0.5])
    fun = lambda x: (np.sum((x - c) ** 2) + x[0] ** 4, 2 * (x - c) + 4 * x ** 3 * [1, 0, 0], -1.0, np.zeros(3))
    st = MmaState.create(3)
    x = np.array([0.9, 0.1, 0.9])
    fs = []
    for _ in range(15):
        f, df, g, dg = fun(x)
        fs.append(f)
        x, st, info = gcmma_step(x, (f, df), (g, dg), st, lambda y: fun(y)[::2])
        h = np.array(st.inner_history)
        assert np.all(np.diff(h, axis=0) >= 0)
    assert np.all(np.diff(fs) <= 1e-12)


def test_reset_restores_initial_spread():
    _, st, _ = optimise(quad1, [0.9], n=6)
    st.reset(4, 0.0, 1.0)
    x = np.full(4, 0.4)
    st.update_asymptotes(x)
    assert np.allclose(st.upp - x, 0.05) and np.allclose(x - st.low, 0.05)
    assert st.outer == 0 and st.xmin.shape == (4,)


def test_asymptotes_bracket_iterate():
    _, st, trace = optimise(quad1, [0.9], n=10)
    x = trace[-1][0]
    assert np.all(st.low < x) and np.all(x < st.upp)


def test_non_finite_input_rejected():
    st = MmaState.create(1)
    with pytest.raises(MmaError):
        gcmma_step(np.array([0.5]), (np.nan, np.zeros(1)), (-1.0, np.zeros(1)), st)
    with pytest.raises(MmaError):
        gcmma_step(np.array([0.5]), (1.0, np.zeros(2)), (-1.0, np.zeros(1)), st)


def test_inner_cap_warns(caplog):
    # evaluator that always reports a worse value than any approximation can predict
    st = MmaState.create(1, max_inner=3)
    with caplog.at_level(logging.WARNING, logger="thbtopo.mma"):
        x, st, info = gcmma_step(np.array([0.5]), (0.0, np.ones(1)), (-1.0, np.zeros(1)), st,
                                 lambda y: (1e6, -1.0))
    assert info["inner"] == 3 and not info["conservative"]
    assert "inner loop" in caplog.text
    assert 0.0 <= x[0] <= 1.0


def test_convergence_examples():
    assert check_convergence([2.0] * 6, -0.1)
    osc = [1.0, 1.01, 0.99, 1.01, 0.99, 1.01]
    assert not check_convergence(osc, -0.1)
    dec = [1.0 * (1 - 1e-6) ** k for k in range(8)]
    assert check_convergence(dec, -0.1, tol=1e-5)
    assert not check_convergence(dec, 0.01, tol=1e-5)
    assert not check_convergence([1.0] * 5, -1.0)
