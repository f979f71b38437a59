import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import log2_ratios
from pa_contracts.agent import compare_deviations, deviation_family, sufficient_condition_check
from pa_contracts.contract import build_optimal_contract, contract_payoff, forward_Y
from pa_contracts.filter import simulate_filter
from pa_contracts.mfg import (ClampingWarning, deterministic_objective, mfg_adjoint_ode_check,
                              mfg_deterministic_oracle, mfg_equilibrium, mfg_fixed_point_residual, mfg_kernels,
                              mfg_mean_path, mfg_optimal_effort, mfg_optimal_effort_midpoints)
from pa_contracts.model import ControlSet, LinearModel, TimeGrid, quadratic_cost
from pa_contracts.numerics import McConfig, Path

unit = quadratic_cost(1.0)
WIDE = ControlSet(0.0, 10.0)
BENCH = LinearModel.constant(eta=0.0, h=1.0, sigma=1.0, m0=1.0, V0=1.0)


def test_kernels_vanish_without_signal():
    g = TimeGrid(1.0, 20)
    for m in (LinearModel.constant(h=0.0, m0=1.0), LinearModel.constant(h=1.0, m0=0.0)):
        k, rho = mfg_kernels(m, g)
        assert np.all(k.values == 0.0) and np.all(rho.values == 0.0)


def test_kernels_closed_form():
    g = TimeGrid(1.0, 100)
    k, rho = mfg_kernels(LinearModel.constant(eta=0.0, h=1.0, m0=2.0), g)
    assert np.all(k.values == 2.0)
    assert abs(rho[0] - (math.e ** 2 - 1)) <= 1e-8
    assert np.max(np.abs(rho.values - np.expm1(2 * (1 - g.nodes)))) <= 1e-8
    assert rho[-1] == 0.0


def test_kernels_with_drift_against_closed_form():
    # k = h m0 e^{eta t}, int_t^T k = (h m0 / eta)(e^{eta T} - e^{eta t})
    g = TimeGrid(1.0, 2000)
    k, rho = mfg_kernels(LinearModel.constant(eta=0.5, h=0.8, m0=1.2), g)
    assert np.max(np.abs(k.values - 0.96 * np.exp(0.5 * g.nodes))) <= 1e-6
    closed = np.expm1(0.96 / 0.5 * (math.exp(0.5) - np.exp(0.5 * g.nodes)))
    assert np.max(np.abs(rho.values - closed)) <= 1e-6


def test_adjoint_check():
    g = TimeGrid(1.0, 50)
    k0, rho0 = mfg_kernels(LinearModel.constant(h=0.0), g)
    assert mfg_adjoint_ode_check(k0, rho0, g) == 0.0
    model = LinearModel.constant(eta=0.2, h=1.0, m0=1.0)
    errs = []
    for N in (25, 50, 100, 200):
        gg = TimeGrid(1.0, N)
        errs.append(mfg_adjoint_ode_check(*mfg_kernels(model, gg), gg))
    assert np.all(log2_ratios(errs) >= 1.8)
    k, rho = mfg_kernels(model, g)
    bumped = mfg_adjoint_ode_check(k, Path(g, rho.values + 0.1), g)
    assert bumped >= 0.1 * np.min(np.abs(k.values)) * (1 - 2 * g.dt)


def test_optimal_effort_reductions():
    g = TimeGrid(1.0, 20)
    zero = Path.constant(g, 0.0)
    b, clamped = mfg_optimal_effort(unit, zero, ControlSet(0, 2), g)
    single, _ = build_optimal_contract(0.0, BENCH, unit, ControlSet(0, 2), g)
    assert np.array_equal(b.values, single.beta.values) and not clamped
    _, rho = mfg_kernels(LinearModel.constant(eta=0.0, h=1.0, m0=2.0), g)
    b1, _ = mfg_optimal_effort(unit, rho, WIDE, g)
    assert b1[0] == pytest.approx(math.e ** 2, abs=1e-8)
    b2, _ = mfg_optimal_effort(quadratic_cost(2.0), rho, WIDE, g)
    assert np.allclose(b2.values, b1.values / 2, rtol=1e-15)
    with pytest.warns(ClampingWarning):
        b3, flag = mfg_optimal_effort(unit, rho, ControlSet(0, 3), g)
    assert flag and b3.values.max() == 3.0


def test_mean_path_examples():
    g = TimeGrid(1.0, 100)
    zero, one = Path.constant(g, 0.0), Path.constant(g, 1.0)
    assert np.allclose(mfg_mean_path(zero, one, g).values, g.nodes, atol=1e-15)
    assert np.all(mfg_mean_path(Path.constant(g, 2.0), zero, g).values == 0.0)
    k0, b0 = 1.3, 0.7
    B = mfg_mean_path(Path.constant(g, k0), Path.constant(g, b0), g)
    assert np.max(np.abs(B.values - b0 / k0 * np.expm1(k0 * g.nodes))) <= 1e-8


def test_equilibrium_collapses_without_gain():
    g = TimeGrid(1.0, 50)
    m = LinearModel.constant(eta=0.3, h=0.0, sigma=1.0, m0=1.0, V0=1.0)
    eq = mfg_equilibrium(m, unit, ControlSet(0, 3), 0.1, g)
    single, _ = build_optimal_contract(0.1, m, unit, ControlSet(0, 3), g)
    assert np.all(eq.P_bar.values == 0.0)
    assert np.array_equal(eq.contract.Z.values, single.Z.values)
    assert np.allclose(eq.B_bar.values, g.nodes, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0, 1.5), st.floats(0, 1.5), st.floats(0.5, 3))
def test_equilibrium_boundary_conditions(eta, h, m0, kappa):
    g = TimeGrid(1.0, 40)
    m = LinearModel.constant(eta=eta, h=h, sigma=0.5, m0=m0, V0=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampingWarning)
        eq = mfg_equilibrium(m, quadratic_cost(kappa), ControlSet(0, 5), 0.0, g)
    assert eq.rho[-1] == 0.0 and eq.B_bar[0] == 0.0 and eq.P_bar[-1] == 0.0
    assert ControlSet(0, 5).contains(eq.beta_star.values)
    assert sufficient_condition_check(eq.fbsde.Q, m, unit, ControlSet(0, 5), g, lambda_path=eq.B_bar).ok


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2), st.floats(0, 1))
def test_effort_monotone_in_prior_mean(m0, extra):
    g = TimeGrid(1.0, 30)
    A = ControlSet(0.0, 50.0)
    lo = mfg_equilibrium(LinearModel.constant(h=1.0, sigma=1.0, m0=m0, V0=1.0), unit, A, 0.0, g)
    hi = mfg_equilibrium(LinearModel.constant(h=1.0, sigma=1.0, m0=m0 + extra, V0=1.0), unit, A, 0.0, g)
    assert np.all(hi.beta_star.values >= lo.beta_star.values)


@pytest.fixture(scope="module")
def eq_bench():
    g = TimeGrid(1.0, 50)
    return g, mfg_equilibrium(BENCH, unit, WIDE, 0.2, g)


def test_equilibrium_pathwise_identity(eq_bench):
    g, eq = eq_bench
    ens = simulate_filter(BENCH, eq.V, eq.beta_star, McConfig(2000, 3), g, lambda_path=eq.B_bar)
    Y = forward_Y(eq.contract, np.diff(ens.I, axis=1))
    assert np.max(np.abs(Y[:, -1] - contract_payoff(eq.contract, ens.B))) <= 1e-10
    assert Y[0, 0] == 0.2


def test_representative_agent_cannot_gain(eq_bench):
    g, eq = eq_bench
    fam = deviation_family(eq.beta_star, WIDE)
    base, devs = compare_deviations(eq.contract, eq.beta_star, fam, BENCH, unit, McConfig(20_000, 8), g)
    assert all(d.significant for d in devs)
    assert abs(base.mean - 0.2) <= 3 * base.std_error


def test_fixed_point_and_broken_feedback(eq_bench):
    g, eq = eq_bench
    mc = McConfig(20_000, 4)
    ok = mfg_fixed_point_residual(eq, BENCH, unit, mc, g)
    assert ok.consistent
    broken = mfg_fixed_point_residual(eq, BENCH, unit, mc, g, lambda_scale=0.5)
    assert broken.sup_residual > 3 * broken.max_std_error


def test_fixed_point_without_feedback():
    g = TimeGrid(1.0, 40)
    m = LinearModel.constant(eta=0.0, h=0.0, sigma=1.0, m0=1.0, V0=1.0)
    eq = mfg_equilibrium(m, unit, ControlSet(0, 3), 0.0, g)
    fp = mfg_fixed_point_residual(eq, m, unit, McConfig(5000, 1), g)
    assert fp.consistent


def test_oracle_examples():
    g = TimeGrid(1.0, 40)
    flat = LinearModel.constant(eta=0.0, h=0.0, m0=1.0)
    o = mfg_deterministic_oracle(flat, unit, ControlSet(0, 3), g)
    assert o.converged and np.max(np.abs(o.beta - 1.0)) <= 1e-6
    o = mfg_deterministic_oracle(BENCH, unit, WIDE, g)
    closed = mfg_optimal_effort_midpoints(BENCH, unit, WIDE, g)
    assert np.max(np.abs(o.beta - closed)) <= 1e-3
    J = deterministic_objective(BENCH, unit, g, np.vstack([o.beta, o.beta + 0.05, o.beta - 0.05]))
    assert J[0] >= J[1] and J[0] >= J[2]


def test_oracle_respects_bounds_and_flags():
    g = TimeGrid(1.0, 20)
    o = mfg_deterministic_oracle(BENCH, unit, ControlSet(0, 1.5), g)
    assert o.converged and o.beta.max() <= 1.5
    assert np.all(o.beta[:5] == 1.5)
    with pytest.warns(RuntimeWarning):
        slow = mfg_deterministic_oracle(BENCH, unit, WIDE, g, max_iter=1, beta0=np.zeros(20))
    assert not slow.converged
    with pytest.raises(ValueError):
        mfg_deterministic_oracle(BENCH, unit, WIDE, TimeGrid(1.0, 201))


def test_equilibrium_json(eq_bench):
    g, eq = eq_bench
    d = json.loads(eq.to_json())
    assert d["format"] == "pa-contracts/mfg-equilibrium" and d["version"] == 1
    for key in ("k", "rho", "beta_star", "B_bar", "V", "P_bar"):
        assert len(d[key]) == g.N + 1
    assert d["contract"]["lambda"] == d["B_bar"]
