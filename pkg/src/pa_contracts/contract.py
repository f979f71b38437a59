"""Closed-form optimal contract for the risk-neutral agent in the linear filtered system.

The contract pays, along an observed path ``B``,

    xi = R + sum_i [c(t_i, beta_i) - Z_i (h_i lam_i Xbar_i + beta_i)] dt + sum_i Z_i dB_i

where ``Xbar`` is the filter the principal rebuilds from ``B`` assuming the
recommended effort ``beta``. Sums are left-point (Ito), the same
discretisation the simulator uses, so ``Y_T = xi`` holds path by path.

The incentive integrand is ``Z = c'(beta) - V h P`` with the adjoint
``P_t = -int_t^T exp(int_t^s eta) h(s) c'(s, beta(s)) ds``. Setting
``weight_by_gain=False`` in :func:`optimal_Z` drops the ``V h`` weight on the
integral term; the two agree only where ``V h = 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .filter import FilterCoefficients, posterior_mean_deterministic, reconstruct_block, solve_riccati
from .model import ControlSet, CostFunction, LinearModel, TimeGrid, sample
from .numerics import Path, cumulative_trapezoid, trapezoid

CONTRACT_FORMAT = "pa-contracts/contract"
CONTRACT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Contract:
    """A terminal payment stored as deterministic sampled integrands.

    Everything needed to price a path is sampled here (no closures), so a
    serialized contract prices bit-identically after a round trip.
    """

    grid: TimeGrid
    R: float
    Z: Path
    beta: Path
    V: Path
    eta: Path
    h: Path
    cost_values: Path
    m0: float
    lambda_path: Path | None = None

    def __post_init__(self):
        for p in (self.Z, self.beta, self.V, self.eta, self.h, self.cost_values, self.lambda_path):
            if p is not None and p.grid != self.grid:
                raise ValueError("all contract paths must share the contract grid")

    @property
    def coefficients(self) -> FilterCoefficients:
        lam = np.ones(self.grid.N + 1) if self.lambda_path is None else np.asarray(self.lambda_path.values)
        return FilterCoefficients(self.grid, np.asarray(self.eta.values), np.asarray(self.h.values),
                                  np.asarray(self.V.values), lam, self.m0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": CONTRACT_FORMAT,
            "version": CONTRACT_VERSION,
            "grid": {"T": self.grid.T, "N": self.grid.N},
            "R": self.R,
            "m0": self.m0,
            "Z": self.Z.to_list(),
            "beta": self.beta.to_list(),
            "V": self.V.to_list(),
            "eta": self.eta.to_list(),
            "h": self.h.to_list(),
            "cost": self.cost_values.to_list(),
            "lambda": None if self.lambda_path is None else self.lambda_path.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Contract":
        if d.get("format") != CONTRACT_FORMAT:
            raise ValueError(f"not a contract document: format={d.get('format')!r}")
        if d.get("version") != CONTRACT_VERSION:
            raise ValueError(f"unsupported contract version {d.get('version')!r}")
        grid = TimeGrid(float(d["grid"]["T"]), int(d["grid"]["N"]))
        lam = d.get("lambda")
        return cls(grid, float(d["R"]), Path(grid, d["Z"]), Path(grid, d["beta"]), Path(grid, d["V"]),
                   Path(grid, d["eta"]), Path(grid, d["h"]), Path(grid, d["cost"]), float(d["m0"]),
                   None if lam is None else Path(grid, lam))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "Contract":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class FbsdeSolution:
    """Deterministic part of the agent's optimality system: ``Z``, adjoint ``(P, Q)``, ``Y0``."""

    Z: Path
    P: Path
    Q: Path
    Y0: float


def optimal_flat_effort(cost: CostFunction, controls: ControlSet, grid: TimeGrid) -> Path:
    """Pointwise maximiser of ``b - c(t, b)`` over A: ``clamp(c'^{-1}(1))``."""
    t = grid.nodes
    return Path(grid, controls.clamp(cost.d1_inverse(t, np.ones_like(t))))


def _discounted_tail(model: LinearModel, grid: TimeGrid, integrand: np.ndarray) -> np.ndarray:
    """``int_{t_i}^T exp(int_{t_i}^s eta) f(s) ds`` by trapezoid, for every node."""
    C = cumulative_trapezoid(sample(model.eta, grid), grid.dt)
    g = np.exp(C) * integrand
    G = cumulative_trapezoid(g, grid.dt)
    return np.exp(-C) * (G[-1] - G)


def adjoint_P(model: LinearModel, cost: CostFunction, beta: Path, grid: TimeGrid) -> tuple[Path, Path]:
    """Adjoint ``P_t = -int_t^T exp(int_t^s eta) h(s) c'(s, beta(s)) ds`` and ``Q = 0``."""
    t = grid.nodes
    h = sample(model.h, grid)
    tail = _discounted_tail(model, grid, h * cost.d1(t, np.asarray(beta.values)))
    P = -tail
    P[-1] = 0.0
    return Path(grid, P), Path(grid, np.zeros(grid.N + 1))


def optimal_Z(model: LinearModel, cost: CostFunction, beta: Path, grid: TimeGrid,
              V: Path | None = None, weight_by_gain: bool = True) -> Path:
    """Incentive integrand of the optimal contract.

    With ``V`` given and ``weight_by_gain`` true this is ``c'(beta) - V h P``,
    which makes ``beta`` satisfy the agent's first-order condition. Without
    ``V`` (or with ``weight_by_gain=False``) the integral term enters
    unweighted: ``c'(beta) + int_t^T exp(int eta) h c' ds``.
    """
    t = grid.nodes
    d1 = cost.d1(t, np.asarray(beta.values))
    P, _ = adjoint_P(model, cost, beta, grid)
    if V is None or not weight_by_gain:
        return Path(grid, d1 - P.values)
    h = sample(model.h, grid)
    return Path(grid, d1 - np.asarray(V.values) * h * P.values)


def make_contract(R: float, Z: Path, beta: Path, V: Path, model: LinearModel, cost: CostFunction,
                  grid: TimeGrid, lambda_path: Path | None = None) -> Contract:
    t = grid.nodes
    return Contract(grid, float(R), Z, beta, V, Path.from_function(grid, model.eta),
                    Path.from_function(grid, model.h),
                    Path(grid, cost(t, np.asarray(beta.values))), model.m0, lambda_path)


def build_optimal_contract(R: float, model: LinearModel, cost: CostFunction, controls: ControlSet,
                           grid: TimeGrid, weight_by_gain: bool = True) -> tuple[Contract, FbsdeSolution]:
    """Optimal contract and its optimality-system solution (``Q = 0``, ``Y0 = R``)."""
    beta = optimal_flat_effort(cost, controls, grid)
    V = solve_riccati(model, grid)
    Z = optimal_Z(model, cost, beta, grid, V=V, weight_by_gain=weight_by_gain)
    P, Q = adjoint_P(model, cost, beta, grid)
    contract = make_contract(R, Z, beta, V, model, cost, grid)
    return contract, FbsdeSolution(Z, P, Q, float(R))


def _as_paths(contract: Contract, observed_B) -> tuple[np.ndarray, bool]:
    if isinstance(observed_B, Path):
        if observed_B.grid != contract.grid:
            raise ValueError("observed path is on a different grid than the contract")
        return np.asarray(observed_B.values)[None, :], True
    B = np.asarray(observed_B, dtype=float)
    if B.shape[-1] != contract.grid.N + 1:
        raise ValueError(f"observed path has {B.shape[-1]} nodes, contract grid has {contract.grid.N + 1}")
    return np.atleast_2d(B), B.ndim == 1


def payoff_block(contract: Contract, B: np.ndarray) -> np.ndarray:
    """Payoffs for a stack of observation paths (rows)."""
    coef = contract.coefficients
    beta = np.asarray(contract.beta.values)
    Xb = reconstruct_block(coef, B, beta)
    Z = np.asarray(contract.Z.values)[:-1]
    dt = contract.grid.dt
    drift = (np.asarray(contract.cost_values.values)[:-1]
             - Z * (coef.obs_loading[:-1] * Xb[:, :-1] + beta[:-1]))
    return contract.R + drift.sum(axis=1) * dt + (Z * np.diff(B, axis=1)).sum(axis=1)


def contract_payoff(contract: Contract, observed_B):
    """Pay the contract on one observed path (float) or a stack of paths (array)."""
    B, single = _as_paths(contract, observed_B)
    out = payoff_block(contract, B)
    return float(out[0]) if single else out


def forward_Y(contract: Contract, dI: np.ndarray, Y0: float | None = None) -> np.ndarray:
    """``Y_{i+1} = Y_i + c_i dt + Z_i dI_i`` from ``Y_0`` (default ``R``), per row of ``dI``."""
    dI = np.atleast_2d(dI)
    dt = contract.grid.dt
    steps = np.asarray(contract.cost_values.values)[:-1] * dt + np.asarray(contract.Z.values)[:-1] * dI
    Y = np.empty((dI.shape[0], dI.shape[1] + 1))
    Y[:, 0] = contract.R if Y0 is None else Y0
    np.cumsum(steps, axis=1, out=Y[:, 1:])
    Y[:, 1:] += Y[:, :1]
    return Y


def principal_value_closed_form(R: float, model: LinearModel, cost: CostFunction,
                                controls: ControlSet, grid: TimeGrid) -> float:
    """``-R + int (beta* - c(beta*)) dt + int h m dt``."""
    beta = optimal_flat_effort(cost, controls, grid)
    surplus = Path(grid, beta.values - cost(grid.nodes, beta.values))
    m = posterior_mean_deterministic(model, grid)
    hm = Path(grid, sample(model.h, grid) * m.values)
    return -R + trapezoid(surplus) + trapezoid(hm)


@dataclass(frozen=True)
class FirstBestComparison:
    second_best: Any
    first_best: Any
    linear_contract: tuple

    @property
    def gap(self):
        return self.first_best - self.second_best


def first_best_toy(m0, R, T) -> FirstBestComparison:
    """Values of the no-observation toy problem with and without moral hazard.

    Arithmetic is generic: ``fractions.Fraction`` inputs give exact results.
    """
    half_T = T / 2
    second = m0 - R
    first = m0 + half_T - R
    return FirstBestComparison(second, first, (1, R - m0 - half_T))


def ode_residual(y: np.ndarray, f: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid residual ``(y_{i+1} - y_i)/dt - (f_i + f_{i+1})/2`` on each step."""
    return np.diff(y) / dt - 0.5 * (f[:-1] + f[1:])


def fbsde_residuals(model: LinearModel, cost: CostFunction, sol: FbsdeSolution, beta: Path,
                    V: Path, grid: TimeGrid, lambda_path: Path | None = None) -> dict[str, float]:
    """Discrete residual of ``dP = (h lam Z - (eta - V h^2 lam^2) P) dt`` (``Q = 0``) and ``|P_T|``."""
    eta, h = sample(model.eta, grid), sample(model.h, grid)
    lam = np.ones(grid.N + 1) if lambda_path is None else np.asarray(lambda_path.values)
    P, Z, Vv = np.asarray(sol.P.values), np.asarray(sol.Z.values), np.asarray(V.values)
    f = h * lam * Z - (eta - Vv * (h * lam) ** 2) * P
    r = ode_residual(P, f, grid.dt)
    return {"p_equation": float(np.max(np.abs(r))), "terminal": float(abs(P[-1])),
            "q_sup": float(np.max(np.abs(np.asarray(sol.Q.values))))}
