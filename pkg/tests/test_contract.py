import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from helpers import benchmark, log2_ratios
from pa_contracts.agent import incentive_residual, sufficient_condition_check
from pa_contracts.contract import (Contract, FbsdeSolution, adjoint_P, build_optimal_contract, contract_payoff,
                                   fbsde_residuals, first_best_toy, forward_Y, make_contract,
                                   optimal_flat_effort, optimal_Z, principal_value_closed_form)
from pa_contracts.filter import FilterCoefficients, simulate_filter, solve_riccati
from pa_contracts.model import ControlSet, LinearModel, TimeGrid, quadratic_cost
from pa_contracts.numerics import McConfig, Path

unit = quadratic_cost(1.0)


def test_flat_effort_examples():
    g = TimeGrid(1.0, 10)
    assert np.all(optimal_flat_effort(unit, ControlSet(0, 2), g).values == 1.0)
    assert np.all(optimal_flat_effort(quadratic_cost(2.0), ControlSet(0, 2), g).values == 0.5)
    got = optimal_flat_effort(unit, ControlSet(0, 0.5), g)
    bs = np.linspace(0, 0.5, 1_000_001)
    oracle = bs[np.argmax(bs - 0.5 * bs ** 2)]
    assert np.all(np.abs(got.values - oracle) <= 1e-6)


def test_optimal_Z_zero_gain():
    g = TimeGrid(1.0, 50)
    beta = Path(g, 0.3 + g.nodes)
    Z = optimal_Z(LinearModel.constant(eta=0.7, h=0.0), unit, beta, g)
    assert np.array_equal(Z.values, beta.values)


@pytest.mark.parametrize("h0", [0.5, 1.0, 2.0])
def test_optimal_Z_constant_gain(h0):
    g = TimeGrid(1.0, 1000)
    beta = optimal_flat_effort(unit, ControlSet(0, 2), g)
    Z = optimal_Z(LinearModel.constant(eta=0.0, h=h0), unit, beta, g)
    assert np.max(np.abs(Z.values - (1 + h0 * (1 - g.nodes)))) <= 1e-8


def test_optimal_Z_with_drift_against_quadrature():
    eta0, h0 = 0.5, 1.0
    g = TimeGrid(1.0, 1000)
    beta = optimal_flat_effort(unit, ControlSet(0, 2), g)
    Z = optimal_Z(LinearModel.constant(eta=eta0, h=h0), unit, beta, g)
    closed = 1 + (h0 / eta0) * np.expm1(eta0 * (1 - g.nodes))
    assert np.max(np.abs(Z.values - closed)) <= 1e-7
    quad = np.array([1 + integrate.quad(lambda s: math.exp(eta0 * (s - t)) * h0, t, 1)[0] for t in g.nodes[::100]])
    assert np.max(np.abs(Z.values[::100] - quad)) <= 1e-7


def test_adjoint_P_examples():
    g = TimeGrid(2.0, 1000)
    beta = optimal_flat_effort(unit, ControlSet(0, 2), g)
    P, Q = adjoint_P(LinearModel.constant(h=0.0, eta=0.3), unit, beta, g)
    assert np.all(P.values == 0.0) and np.all(Q.values == 0.0)
    P, _ = adjoint_P(LinearModel.constant(h=1.5, eta=0.0), unit, beta, g)
    assert P[-1] == 0.0
    assert np.max(np.abs(P.values + 1.5 * (2 - g.nodes))) <= 1e-8


def test_build_contract_structure():
    g, model, cost, A, contract, sol = benchmark(N=200, R=0.35)
    assert np.all(sol.Q.values == 0.0)
    assert sol.Y0 == 0.35 == contract.R
    assert sufficient_condition_check(sol.Q, model, cost, A, g).ok
    assert sol.P[-1] == 0.0


def _general_model():
    return LinearModel(lambda t: 0.3 - 0.2 * t, lambda t: 1.0 + 0.5 * np.sin(t), lambda t: 0.4 + 0 * t,
                       0.8, 2.0)


def test_gain_weighting_matters_when_variance_moves():
    g = TimeGrid(1.0, 400)
    model = _general_model()
    A = ControlSet(0, 3)
    c_w, sol_w = build_optimal_contract(0.1, model, unit, A, g)
    c_u, sol_u = build_optimal_contract(0.1, model, unit, A, g, weight_by_gain=False)
    assert incentive_residual(sol_w, c_w.beta, model, unit, c_w.V, g) <= 1e-12
    assert incentive_residual(sol_u, c_u.beta, model, unit, c_u.V, g) > 1e-2


def test_payoff_trivial_contract():
    g = TimeGrid(1.0, 20)
    model = LinearModel.constant(h=1.0, sigma=1.0, m0=0.5, V0=1.0)
    V = solve_riccati(model, g)
    c = make_contract(0.7, Path.constant(g, 0.0), Path.constant(g, 0.0), V, model, unit, g)
    B = np.random.default_rng(2).normal(size=(5, 21)).cumsum(axis=1)
    assert np.all(contract_payoff(c, B) == 0.7)


def test_pathwise_identity_general_model():
    g = TimeGrid(1.5, 150)
    model = _general_model()
    contract, _ = build_optimal_contract(0.25, model, unit, ControlSet(0, 3), g)
    ens = simulate_filter(model, contract.V, contract.beta, McConfig(500, 12), g)
    Y = forward_Y(contract, np.diff(ens.I, axis=1))
    assert np.max(np.abs(Y[:, -1] - contract_payoff(contract, ens.B))) <= 1e-10


def test_payoff_bump_slope():
    g = TimeGrid(1.0, 60)
    model = _general_model()
    contract, _ = build_optimal_contract(0.0, model, unit, ControlSet(0, 3), g)
    B = simulate_filter(model, contract.V, contract.beta, McConfig(1, 4), g).B[0]
    coef = FilterCoefficients.build(model, contract.V, g)
    Z, gain, load, dt = contract.Z.values, coef.gain, coef.obs_loading, g.dt
    a = 1 + coef.eta * dt - gain * load * dt
    j = 17
    dX = np.zeros(61)
    dX[j] = gain[j - 1]
    dX[j + 1] = a[j] * dX[j] - gain[j]
    for i in range(j + 1, 60):
        dX[i + 1] = a[i] * dX[i]
    slope = Z[j - 1] - Z[j] - np.sum(Z[j:60] * load[j:60] * dX[j:60]) * dt
    e = np.zeros(61)
    e[j] = 1.0
    base = contract_payoff(contract, B)
    for s in (1e-3, 0.1, 1.0):
        assert (contract_payoff(contract, B + s * e) - base) / s == pytest.approx(slope, abs=1e-8)


def test_payoff_shift_invariance_without_gain():
    g = TimeGrid(1.0, 30)
    model = LinearModel.constant(eta=0.2, h=0.0, sigma=1.0, m0=1.0, V0=1.0)
    contract, _ = build_optimal_contract(0.3, model, unit, ControlSet(0, 2), g)
    B = np.random.default_rng(5).normal(size=31).cumsum()
    assert contract_payoff(contract, B + 4.0) == contract_payoff(contract, B)


def test_payoff_grid_mismatch():
    g, model, cost, A, contract, sol = benchmark(N=10)
    with pytest.raises(ValueError):
        contract_payoff(contract, Path.constant(TimeGrid(1.0, 11), 0.0))
    with pytest.raises(ValueError):
        contract_payoff(contract, np.zeros(7))


def test_principal_closed_form_examples():
    A = ControlSet(0, 2)
    assert principal_value_closed_form(0.4, LinearModel.constant(m0=1.0), unit, A, TimeGrid(0.0, 5)) == -0.4
    m = LinearModel.constant(eta=0.0, h=0.0, m0=1.0)
    assert principal_value_closed_form(0.2, m, unit, A, TimeGrid(1.0, 100)) == pytest.approx(0.3, abs=1e-14)
    m = LinearModel.constant(eta=0.0, h=1.0, m0=5.0)
    assert principal_value_closed_form(0.0, m, unit, A, TimeGrid(1.0, 100)) == pytest.approx(5.5, abs=1e-13)


@settings(max_examples=30)
@given(st.floats(-5, 5), st.floats(0.01, 2))
def test_principal_value_slope_in_R(R, dR):
    g, m, A = TimeGrid(1.0, 40), _general_model(), ControlSet(0, 3)
    diff = principal_value_closed_form(R + dR, m, unit, A, g) - principal_value_closed_form(R, m, unit, A, g)
    assert diff / dR == pytest.approx(-1.0, abs=1e-9)


def test_first_best_examples():
    r = first_best_toy(1.0, 0.3, 2.0)
    assert r.second_best == pytest.approx(0.7) and r.first_best == pytest.approx(1.7)
    assert r.linear_contract == (1, pytest.approx(-1.7))
    z = first_best_toy(Fraction(2), Fraction(1, 7), Fraction(0))
    assert z.first_best == z.second_best


@settings(max_examples=50)
@given(st.fractions(-10, 10), st.fractions(-10, 10), st.fractions(0, 10))
def test_first_best_gap_is_half_horizon(m0, R, T):
    r = first_best_toy(m0, R, T)
    assert r.gap == T / 2
    c, d = r.linear_contract
    # effort c makes E[X_T] = m0 + c T; participation binds and the principal keeps the rest
    assert T * c * c / 2 + m0 * c + d == R
    assert m0 + T * c - (c * (m0 + T * c) + d) == r.first_best


def test_fbsde_residual_orders_and_sensitivity():
    model = _general_model()
    A = ControlSet(0, 3)
    errs = []
    for N in (25, 50, 100, 200):
        g = TimeGrid(1.0, N)
        contract, sol = build_optimal_contract(0.0, model, unit, A, g)
        r = fbsde_residuals(model, unit, sol, contract.beta, contract.V, g)
        assert r["terminal"] == 0.0 and r["q_sup"] == 0.0
        errs.append(r["p_equation"])
    assert np.all(log2_ratios(errs) >= 1.8)
    g = TimeGrid(1.0, 100)
    contract, sol = build_optimal_contract(0.0, model, unit, A, g)
    bad = FbsdeSolution(sol.Z, Path(g, sol.P.values + 0.1), sol.Q, sol.Y0)
    r_bad = fbsde_residuals(model, unit, bad, contract.beta, contract.V, g)["p_equation"]
    assert r_bad >= 100 * errs[2]


def test_fbsde_residual_zero_gain_exact():
    g = TimeGrid(1.0, 50)
    model = LinearModel.constant(eta=0.0, h=0.0, sigma=1.0, m0=1.0, V0=1.0)
    contract, sol = build_optimal_contract(0.0, model, unit, ControlSet(0, 2), g)
    assert fbsde_residuals(model, unit, sol, contract.beta, contract.V, g)["p_equation"] == 0.0


def test_contract_json_roundtrip_prices_identically():
    g = TimeGrid(1.0, 40)
    model = _general_model()
    contract, _ = build_optimal_contract(0.3, model, unit, ControlSet(0, 3), g)
    text = contract.to_json()
    back = Contract.from_json(text)
    B = simulate_filter(model, contract.V, contract.beta, McConfig(20, 2), g).B
    assert np.array_equal(contract_payoff(back, B), contract_payoff(contract, B))
    assert json.loads(text)["version"] == 1


def test_contract_json_rejects_unknown_version():
    g, *_, contract, _ = benchmark(N=5)
    d = contract.to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        Contract.from_dict(d)
    d["format"] = "other"
    with pytest.raises(ValueError):
        Contract.from_dict(d)
