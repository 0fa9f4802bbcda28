import math

import numpy as np
import pytest

from smallcell_pf.duality import DualState, dual_allocation, dual_function, dual_solve, kkt_check
from smallcell_pf.radio import Assignment, throughputs

# each user clearly owns one RB
OWNED = np.array([[[3.0, 0.1]], [[0.1, 2.0]]])


def test_allocation_single_user():
    R = np.random.default_rng(0).exponential(size=(1, 2, 3))
    X = dual_allocation(R, DualState([1.0], [0.0, 0.0]))
    assert np.all(X.user_of == 0)


def test_allocation_reduces_to_max_rate_without_prices():
    R = np.random.default_rng(1).exponential(size=(4, 2, 3))
    X = dual_allocation(R, DualState(np.ones(4), np.zeros(2)))
    assert np.array_equal(X.user_of, np.argmax(R, axis=0))


def test_backhaul_price_steers_to_the_smaller_rate():
    R = np.array([[[2.0]], [[1.0]]])
    X = dual_allocation(R, DualState([1.0, 1.0], [2.0]))
    assert X.user_of[0, 0] == 1


def test_dual_function_examples():
    assert dual_function(np.array([[[1.0]]]), DualState([1.0], [0.0]), 5.0) == pytest.approx(0.0, abs=1e-15)
    lam = np.array([3.0, 2.0])
    ds = DualState(1 / lam, [0.0])
    assert np.array_equal(dual_allocation(OWNED, ds).user_of, [[0, 1]])
    assert dual_function(OWNED, ds, 1.0) == pytest.approx(math.log(6.0), rel=1e-12)
    with pytest.raises(ValueError):
        dual_function(OWNED, DualState([0.0, 1.0], [0.0]), 1.0)


def test_dual_solve_keeps_prices_off_with_huge_backhaul():
    R = np.random.default_rng(2).exponential(size=(3, 2, 3))
    ds, X, trace = dual_solve(R, 1e9, max_iters=50)
    assert np.all(ds.nu <= 1e-9)
    assert trace[-1]["g"] <= trace[0]["g"]
    with pytest.raises(ValueError):
        dual_solve(R, 1.0, max_iters=0)


def test_kkt_satisfied_at_the_global_point():
    X = Assignment([[0, 1]], 2)
    lam = throughputs(X, OWNED)
    rep = kkt_check(OWNED, 1e6, DualState(1 / lam, [0.0]), X)
    assert rep["satisfied"]
    assert rep["ratio_sum"] == pytest.approx(2.0)


def test_kkt_flags_active_price_with_slack():
    X = Assignment([[0, 1]], 2)
    lam = throughputs(X, OWNED)
    rep = kkt_check(OWNED, 10.0, DualState(1 / lam, [0.3]), X)
    assert not rep["satisfied"]
    assert not rep["checks"]["complementary_slackness"]
    assert rep["residuals"]["complementary_slackness"] > 0


def test_kkt_stationarity_residual():
    X = Assignment([[0, 1]], 2)
    rep = kkt_check(OWNED, 1e6, DualState([1.0, 0.5], [0.0]), X)
    # user 0: lambda = 3, 1/mu = 1
    assert rep["dg_dmu"][0] == pytest.approx(2.0)
    assert rep["residuals"]["stationarity"] == pytest.approx(2.0)
    assert not rep["checks"]["stationarity"]


def test_negative_nu_rejected():
    with pytest.raises(ValueError):
        DualState([1.0], [-0.1])
