"""Mean-field equilibrium of identical agents observing the population mean.

Each agent's observation drift is scaled by the population mean ``lam_t``.
At equilibrium ``lam`` equals the mean observation path ``Bbar``, the
principal's problem reduces to the deterministic control problem

    sup_beta int (k(t) Bbar_t + beta_t - c(t, beta_t)) dt,   Bbar' = k Bbar + beta,

with ``k(t) = h(t) m0 exp(int_0^t eta)``, solved by ``c'(beta) = rho + 1``
where ``rho_t = exp(int_t^T k) - 1``. The contract then uses the integrand
``Z = c'(beta) - V h Bbar Pbar`` with ``Pbar' = h Bbar c'(beta) - eta Pbar``,
``Pbar_T = 0``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .contract import Contract, FbsdeSolution, make_contract, ode_residual
from .filter import FilterCoefficients, solve_riccati, step_filter
from .model import ControlSet, CostFunction, LinearModel, TimeGrid, sample
from .numerics import McConfig, Path, cumulative_trapezoid, increment_block, map_path_chunks, rk4_solve

MFG_FORMAT = "pa-contracts/mfg-equilibrium"
MFG_VERSION = 1


class ClampingWarning(UserWarning):
    """The interior first-order effort left the control set and was clipped."""


@dataclass(frozen=True, eq=False)
class MfgEquilibrium:
    k: Path
    rho: Path
    beta_star: Path
    B_bar: Path
    V: Path
    P_bar: Path
    contract: Contract
    clamped: bool = False

    @property
    def grid(self) -> TimeGrid:
        return self.k.grid

    @property
    def fbsde(self) -> FbsdeSolution:
        return FbsdeSolution(self.contract.Z, self.P_bar, Path.constant(self.grid, 0.0), self.contract.R)

    def to_dict(self) -> dict:
        return {
            "format": MFG_FORMAT,
            "version": MFG_VERSION,
            "grid": {"T": self.grid.T, "N": self.grid.N},
            "clamped": self.clamped,
            "k": self.k.to_list(),
            "rho": self.rho.to_list(),
            "beta_star": self.beta_star.to_list(),
            "B_bar": self.B_bar.to_list(),
            "V": self.V.to_list(),
            "P_bar": self.P_bar.to_list(),
            "contract": self.contract.to_dict(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def mfg_kernels(model: LinearModel, grid: TimeGrid) -> tuple[Path, Path]:
    """Aggregate kernel ``k = h m0 exp(int_0^t eta)`` and ``rho = exp(int_t^T k) - 1``."""
    eta = sample(model.eta, grid)
    k = sample(model.h, grid) * model.m0 * np.exp(cumulative_trapezoid(eta, grid.dt))
    K = cumulative_trapezoid(k, grid.dt)
    rho = np.expm1(K[-1] - K)
    return Path(grid, k), Path(grid, rho)


def mfg_adjoint_ode_check(k: Path, rho: Path, grid: TimeGrid) -> float:
    """Sup-norm trapezoid residual of ``rho' = -k (rho + 1)``."""
    kv, rv = np.asarray(k.values), np.asarray(rho.values)
    return float(np.max(np.abs(ode_residual(rv, -kv * (rv + 1.0), grid.dt))))


def mfg_optimal_effort(cost: CostFunction, rho: Path, controls: ControlSet,
                       grid: TimeGrid) -> tuple[Path, bool]:
    """``clamp(c'^{-1}(rho + 1))`` and whether clipping was needed."""
    t = grid.nodes
    raw = np.asarray(cost.d1_inverse(t, np.asarray(rho.values) + 1.0), dtype=float)
    clipped = controls.clamp(raw)
    clamped = bool(np.any(clipped != raw))
    if clamped:
        warnings.warn("mean-field effort clipped to the control set", ClampingWarning, stacklevel=2)
    return Path(grid, clipped), clamped


def mfg_mean_path(k: Path, beta: Path, grid: TimeGrid) -> Path:
    """RK4 solution of ``Bbar' = k Bbar + beta``, ``Bbar_0 = 0``."""
    kf, bf = k.as_function(), beta.as_function()
    return rk4_solve(lambda t, y: kf(t) * y + bf(t), 0.0, grid)


def mfg_mean_path_residual(k: Path, beta: Path, B_bar: Path, grid: TimeGrid) -> float:
    f = np.asarray(k.values) * np.asarray(B_bar.values) + np.asarray(beta.values)
    return float(np.max(np.abs(ode_residual(np.asarray(B_bar.values), f, grid.dt))))


def _adjoint_forcing(model, cost, beta, B_bar, grid) -> Path:
    return Path(grid, sample(model.h, grid) * np.asarray(B_bar.values)
                * cost.d1(grid.nodes, np.asarray(beta.values)))


def mfg_adjoint_P(model: LinearModel, cost: CostFunction, beta: Path, B_bar: Path, grid: TimeGrid) -> Path:
    """Backward RK4 of ``Pbar' = h Bbar c'(beta) - eta Pbar``, ``Pbar_T = 0``."""
    forcing = _adjoint_forcing(model, cost, beta, B_bar, grid).as_function()
    eta = model.eta
    return rk4_solve(lambda t, p: forcing(t) - eta(t) * p, 0.0, grid, reverse=True)


def mfg_adjoint_P_residual(model, cost, beta, B_bar, P_bar, grid) -> float:
    f = (np.asarray(_adjoint_forcing(model, cost, beta, B_bar, grid).values)
         - sample(model.eta, grid) * np.asarray(P_bar.values))
    return float(np.max(np.abs(ode_residual(np.asarray(P_bar.values), f, grid.dt))))


def mfg_equilibrium(model: LinearModel, cost: CostFunction, controls: ControlSet, R: float,
                    grid: TimeGrid) -> MfgEquilibrium:
    """Closed-form mean-field equilibrium and the contract that sustains it (``Y0 = R``)."""
    k, rho = mfg_kernels(model, grid)
    beta, clamped = mfg_optimal_effort(cost, rho, controls, grid)
    B_bar = mfg_mean_path(k, beta, grid)
    V = solve_riccati(model, grid, lambda_path=B_bar)
    P_bar = mfg_adjoint_P(model, cost, beta, B_bar, grid)
    Z = Path(grid, cost.d1(grid.nodes, np.asarray(beta.values))
             - np.asarray(V.values) * sample(model.h, grid) * np.asarray(B_bar.values) * np.asarray(P_bar.values))
    contract = make_contract(R, Z, beta, V, model, cost, grid, lambda_path=B_bar)
    return MfgEquilibrium(k, rho, beta, B_bar, V, P_bar, contract, clamped)


def mfg_ode_residuals(eq: MfgEquilibrium, model: LinearModel, cost: CostFunction) -> dict[str, float]:
    g = eq.grid
    return {
        "rho": mfg_adjoint_ode_check(eq.k, eq.rho, g),
        "B_bar": mfg_mean_path_residual(eq.k, eq.beta_star, eq.B_bar, g),
        "P_bar": mfg_adjoint_P_residual(model, cost, eq.beta_star, eq.B_bar, eq.P_bar, g),
    }


@dataclass(frozen=True)
class FixedPointResidual:
    sup_residual: float
    max_std_error: float
    mean_B: np.ndarray
    std_error_B: np.ndarray

    @property
    def consistent(self) -> bool:
        return self.sup_residual <= 3 * self.max_std_error


def mfg_fixed_point_residual(eq: MfgEquilibrium, model: LinearModel, cost: CostFunction, mc: McConfig,
                             grid: TimeGrid, lambda_scale: float = 1.0,
                             threads: int | None = None) -> FixedPointResidual:
    """Simulate agents facing ``lam = lambda_scale * Bbar`` and compare ``E[B]`` with ``Bbar``."""
    lam = Path(grid, lambda_scale * np.asarray(eq.B_bar.values))
    V = eq.V if lambda_scale == 1.0 else solve_riccati(model, grid, lambda_path=lam)
    coef = FilterCoefficients.build(model, V, grid, lam)
    beta = np.asarray(eq.beta_star.values)

    def block(start, stop):
        dI = increment_block(grid, mc.master_seed, start, stop)
        return step_filter(coef, dI, beta)[1]

    B = map_path_chunks(block, mc.n_paths, threads=threads)
    mean = B.mean(axis=0)
    se = B.std(axis=0, ddof=1) / np.sqrt(B.shape[0]) if B.shape[0] > 1 else np.zeros_like(mean)
    resid = np.abs(mean - np.asarray(eq.B_bar.values))
    return FixedPointResidual(float(resid.max()), float(se.max()), mean, se)


@dataclass(frozen=True)
class OracleResult:
    """Piecewise-constant effort maximising the discretised deterministic problem."""

    midpoints: np.ndarray
    beta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    grad_norm: float


def deterministic_objective(model: LinearModel, cost: CostFunction, grid: TimeGrid, betas: np.ndarray,
                            substeps: int = 8) -> np.ndarray:
    """``int (k Bbar + beta - c(beta)) dt`` for piecewise-constant efforts (rows of ``betas``).

    Integrates ``E' = eta E`` (so ``k = h m0 E``), the mean path and the
    running objective together with RK4 sub-steps; no sampled kernel is used.
    """
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    n = betas.shape[0]
    E = np.ones(n)
    Bb = np.zeros(n)
    J = np.zeros(n)
    h_sub = grid.dt / substeps
    m0 = model.m0

    def rhs(t, E, Bb, b):
        k = model.h(t) * m0 * E
        drift = k * Bb + b
        return model.eta(t) * E, drift, drift - cost(t, b)

    for j in range(grid.N):
        b = betas[:, j]
        for s in range(substeps):
            t = j * grid.dt + s * h_sub
            k1 = rhs(t, E, Bb, b)
            k2 = rhs(t + h_sub / 2, E + h_sub / 2 * k1[0], Bb + h_sub / 2 * k1[1], b)
            k3 = rhs(t + h_sub / 2, E + h_sub / 2 * k2[0], Bb + h_sub / 2 * k2[1], b)
            k4 = rhs(t + h_sub, E + h_sub * k3[0], Bb + h_sub * k3[1], b)
            E = E + h_sub / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            Bb = Bb + h_sub / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            J = J + h_sub / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return J


def mfg_deterministic_oracle(model: LinearModel, cost: CostFunction, controls: ControlSet, grid: TimeGrid,
                             max_iter: int = 10_000, tol: float = 1e-8, fd_step: float = 1e-4,
                             beta0: np.ndarray | None = None) -> OracleResult:
    """Brute-force maximiser of the deterministic problem by projected gradient ascent.

    Gradients are central finite differences of :func:`deterministic_objective`
    scaled by ``1/dt``; steps start at 1 and are halved until the objective
    increases. Stops when the projected-gradient sup-norm is ``<= tol``.
    """
    if grid.N > 200:
        raise ValueError("the oracle is meant for small grids (N <= 200)")
    N, dt = grid.N, grid.dt
    beta = controls.clamp(np.full(N, 0.5 * (controls.lo + controls.hi)) if beta0 is None
                          else np.asarray(beta0, dtype=float))
    eye = np.eye(N) * fd_step

    def value_and_grad(b):
        batch = np.vstack([b[None, :], b + eye, b - eye])
        J = deterministic_objective(model, cost, grid, batch)
        return J[0], (J[1:N + 1] - J[N + 1:]) / (2 * fd_step * dt)

    J, g = value_and_grad(beta)
    step = 1.0
    it = 0
    pg = np.inf
    for it in range(1, max_iter + 1):
        pg = float(np.max(np.abs(controls.clamp(beta + g) - beta)))
        if pg <= tol:
            break
        while True:
            trial = controls.clamp(beta + step * g)
            J_trial = deterministic_objective(model, cost, grid, trial)[0]
            if J_trial >= J or step < 1e-12:
                break
            step *= 0.5
        if step < 1e-12:
            break
        beta = trial
        J, g = value_and_grad(beta)
        step = min(1.0, 2.0 * step)
    else:
        it = max_iter
    converged = pg <= tol
    if not converged:
        warnings.warn(f"oracle stopped after {it} iterations with gradient {pg:.3g}", RuntimeWarning, stacklevel=2)
    mid = (np.arange(N) + 0.5) * dt
    return OracleResult(mid, beta, float(J), it, converged, pg)


def mfg_optimal_effort_midpoints(model: LinearModel, cost: CostFunction, controls: ControlSet,
                                 grid: TimeGrid) -> np.ndarray:
    """Closed-form effort at the interval midpoints of ``grid`` (odd nodes of the doubled grid)."""
    fine = grid.refined(2)
    _, rho = mfg_kernels(model, fine)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampingWarning)
        beta, _ = mfg_optimal_effort(cost, rho, controls, fine)
    return np.asarray(beta.values)[1::2]
