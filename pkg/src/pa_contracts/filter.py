"""Kalman-Bucy filter for the linear system: variance ODE, simulation, reconstruction.

Simulation is done directly under the agent's measure: the innovation ``I``
is drawn as a Brownian motion, the filtered mean ``X`` is Euler-stepped
from it, and the observation ``B`` is assembled from the discrete identity

    B_{i+1} - B_i = (h_i lam_i X_i + beta_i) dt + (I_{i+1} - I_i).

Keeping everything on one Euler scheme makes the principal-side
reconstruction from ``B`` reproduce the agent's filter exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .model import LinearModel, TimeGrid, sample
from .numerics import (IntegrationError, McConfig, Path, cumulative_trapezoid,
                       increment_block, map_path_chunks, rk4_solve)


def solve_riccati(model: LinearModel, grid: TimeGrid, lambda_path: Path | None = None) -> Path:
    """Posterior variance ``V' = 2 eta V - h^2 lam^2 V^2 + sigma``, ``V(0) = V0``.

    ``lam = 1`` without ``lambda_path`` (single agent); with it, the
    population-mean scaling of the mean-field filter.
    """
    eta, h, sigma = model.eta, model.h, model.sigma
    lam = lambda_path.as_function() if lambda_path is not None else (lambda t: 1.0)

    def rhs(t, v):
        hl = h(t) * lam(t)
        return 2.0 * eta(t) * v - hl * hl * v * v + sigma(t)

    V = rk4_solve(rhs, model.V0, grid)
    if np.all(sample(sigma, grid) >= 0) and np.min(V.values) < -1e-12:
        raise IntegrationError("posterior variance became negative",
                               int(np.argmax(V.values < -1e-12)))
    return V


def posterior_mean_deterministic(model: LinearModel, grid: TimeGrid) -> Path:
    """``m(t) = m0 exp(int_0^t eta)``, the mean of the filter under zero effort."""
    eta = Path.from_function(grid, model.eta)
    return Path(grid, model.m0 * np.exp(cumulative_trapezoid(eta)))


@dataclass(frozen=True)
class FilterCoefficients:
    """Sampled inputs shared by every path of a filter simulation."""

    grid: TimeGrid
    eta: np.ndarray
    h: np.ndarray
    V: np.ndarray
    lam: np.ndarray
    m0: float

    @classmethod
    def build(cls, model: LinearModel, V: Path, grid: TimeGrid,
              lambda_path: Path | None = None) -> "FilterCoefficients":
        if V.grid != grid or (lambda_path is not None and lambda_path.grid != grid):
            raise ValueError("V and lambda_path must live on the simulation grid")
        lam = np.ones(grid.N + 1) if lambda_path is None else np.asarray(lambda_path.values)
        return cls(grid, sample(model.eta, grid), sample(model.h, grid),
                   np.asarray(V.values), lam, model.m0)

    @property
    def gain(self) -> np.ndarray:
        """Diffusion of the filter, ``h V lam``."""
        return self.h * self.V * self.lam

    @property
    def obs_loading(self) -> np.ndarray:
        """Loading of ``X`` in the observation drift, ``h lam``."""
        return self.h * self.lam


def _effort_at(beta, i, X, B):
    if callable(beta):
        return beta(i, X, B)
    return beta[..., i]


def step_filter(coef: FilterCoefficients, dI: np.ndarray, beta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Euler-step ``X`` and ``B`` from innovation increments ``dI`` (shape ``(n, N)``).

    ``beta`` is an effort array broadcastable to ``(n, N+1)`` or a feedback
    policy ``beta(i, X_i, B_i)``. Returns ``(X, B, beta_used)``.
    """
    n, N = dI.shape
    dt = coef.grid.dt
    gain, load = coef.gain, coef.obs_loading
    X = np.empty((n, N + 1))
    B = np.empty((n, N + 1))
    used = np.empty((n, N + 1))
    X[:, 0] = coef.m0
    B[:, 0] = 0.0
    if not callable(beta):
        used[:] = np.broadcast_to(np.asarray(beta, dtype=float), (n, N + 1))
    for i in range(N):
        xi = X[:, i]
        bi = _effort_at(beta, i, xi, B[:, i]) if callable(beta) else used[:, i]
        if callable(beta):
            used[:, i] = bi
        X[:, i + 1] = xi + coef.eta[i] * xi * dt + gain[i] * dI[:, i]
        B[:, i + 1] = B[:, i] + (load[i] * xi + bi) * dt + dI[:, i]
        if not np.all(np.isfinite(X[:, i + 1])):
            raise IntegrationError("filter state became non-finite", i + 1)
    if callable(beta):
        used[:, N] = _effort_at(beta, N, X[:, N], B[:, N])
    return X, B, used


def reconstruct_block(coef: FilterCoefficients, B: np.ndarray, beta_ref: np.ndarray) -> np.ndarray:
    """Principal-side filter from observations only, assuming effort ``beta_ref``."""
    B = np.atleast_2d(B)
    dt = coef.grid.dt
    gain, load = coef.gain, coef.obs_loading
    dB = np.diff(B, axis=1)
    Xb = np.empty_like(B, dtype=float)
    Xb[:, 0] = coef.m0
    for i in range(coef.grid.N):
        xi = Xb[:, i]
        Xb[:, i + 1] = xi + coef.eta[i] * xi * dt + gain[i] * (dB[:, i] - (load[i] * xi + beta_ref[i]) * dt)
    return Xb


@dataclass(frozen=True, eq=False)
class FilterEnsemble:
    """Simulated filter paths, one row per Monte Carlo path."""

    grid: TimeGrid
    X: np.ndarray
    B: np.ndarray
    I: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("X", "B", "I", "beta"):
            getattr(self, name).flags.writeable = False

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def to_csv(self, path, Y: np.ndarray | None = None, header: Iterable[str] = ()) -> None:
        """One row per (node, path): ``t, path_id, X, B, I`` (+ ``Y``)."""
        write_paths_csv(path, self.grid, self.X, self.B, self.I, Y, header)


def format_paths_csv(grid: TimeGrid, X, B, I, Y=None, header: Iterable[str] = ()) -> str:
    """Paths table as text: ``# `` header lines, then ``t,path_id,X,B,I[,Y]``."""
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "path_id", "X", "B", "I"] + (["Y"] if Y is not None else []))
    cols = [X, B, I] + ([Y] if Y is not None else [])
    t = grid.nodes
    for i in range(grid.N + 1):
        for p in range(X.shape[0]):
            w.writerow([f"{t[i]:.17g}", p] + [f"{c[p, i]:.17g}" for c in cols])
    return buf.getvalue()


def write_paths_csv(path, grid: TimeGrid, X, B, I, Y=None, header: Iterable[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_paths_csv(grid, X, B, I, Y, header))


def simulate_filter(model: LinearModel, V: Path, beta: Path | np.ndarray | Callable,
                    mc: McConfig, grid: TimeGrid, lambda_path: Path | None = None,
                    threads: int | None = None) -> FilterEnsemble:
    """Simulate ``mc.n_paths`` filter paths under effort ``beta``.

    Path ``i`` is driven by the random stream ``(mc.master_seed, i)``.
    """
    coef = FilterCoefficients.build(model, V, grid, lambda_path)
    b = beta if callable(beta) and not isinstance(beta, Path) else np.asarray(beta, dtype=float)

    def block(start, stop):
        dI = increment_block(grid, mc.master_seed, start, stop)
        X, B, used = step_filter(coef, dI, b)
        I = np.zeros_like(X)
        np.cumsum(dI, axis=1, out=I[:, 1:])
        return np.stack([X, B, I, used], axis=1)

    out = map_path_chunks(block, mc.n_paths, threads=threads)
    return FilterEnsemble(grid, out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(), out[:, 3].copy())


def reconstruct_filter(model: LinearModel, V: Path, beta_ref: Path, observed_B,
                       grid: TimeGrid, lambda_path: Path | None = None):
    """Recover the filtered mean from an observed ``B`` path (or a stack of paths).

    Uses only ``B`` and the effort the principal expects, ``beta_ref``.
    """
    coef = FilterCoefficients.build(model, V, grid, lambda_path)
    B = np.asarray(observed_B.values if isinstance(observed_B, Path) else observed_B, dtype=float)
    if B.shape[-1] != grid.N + 1:
        raise ValueError("observed B is not on the grid")
    Xb = reconstruct_block(coef, B, np.asarray(beta_ref, dtype=float))
    return Path(grid, Xb[0]) if B.ndim == 1 else Xb
