"""Shared benchmark setups for the test suite."""

import numpy as np

from pa_contracts.contract import build_optimal_contract
from pa_contracts.model import ControlSet, LinearModel, TimeGrid, quadratic_cost

R_BENCH = 0.2


def benchmark(N=100, T=1.0, R=R_BENCH, hi=3.0):
    """eta=0, h=1, sigma=1, V0=1 (so V=1), m0=1, c=b^2/2, A=[0, hi]."""
    grid = TimeGrid(T, N)
    model = LinearModel.constant(eta=0.0, h=1.0, sigma=1.0, m0=1.0, V0=1.0)
    cost = quadratic_cost(1.0)
    controls = ControlSet(0.0, hi)
    contract, sol = build_optimal_contract(R, model, cost, controls, grid)
    return grid, model, cost, controls, contract, sol


def log2_ratios(errors):
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:])
