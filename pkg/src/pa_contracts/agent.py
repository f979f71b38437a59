"""Monte Carlo valuation and optimality checks for a given contract.

All comparisons between efforts reuse the same innovation draws (common
random numbers): path ``i`` of every effort is driven by stream
``(master_seed, i)``. Since the filtered mean does not depend on effort, the
paired difference of two agent values is nearly deterministic, which is what
makes small incentive gaps resolvable.

The agent's running cost is summed left-point, like the contract's own
integrals, so the discrete game is internally consistent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .contract import Contract, FbsdeSolution, forward_Y, payoff_block
from .filter import FilterCoefficients, step_filter
from .model import CaraParams, ControlSet, CostFunction, LinearModel, TimeGrid, sample
from .numerics import McConfig, Path, increment_block, map_path_chunks

DEVIATION_FAMILY_VERSION = 1


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "McEstimate":
        x = np.asarray(x, dtype=float)
        n = len(x)
        # shifting by the minimum keeps constant samples exact; fsum makes the mean order-free
        lo = float(np.min(x))
        d = x - lo
        mean = lo + math.fsum(d) / n
        se = float(np.std(d, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, se, n)

    def to_dict(self) -> dict:
        return asdict(self)


def _effort_array(beta, grid: TimeGrid):
    if isinstance(beta, Path):
        return np.asarray(beta.values)
    if callable(beta):
        return beta
    arr = np.broadcast_to(np.asarray(beta, dtype=float), (grid.N + 1,))
    return np.array(arr)


def agent_value_samples(contract: Contract, efforts: Sequence, model: LinearModel, cost: CostFunction,
                        mc: McConfig, grid: TimeGrid, threads: int | None = None) -> np.ndarray:
    """Per-path realised agent utility ``xi - sum c(t_i, beta_i) dt`` for several efforts.

    Returns an array of shape ``(n_paths, len(efforts))``; column ``k`` uses
    ``efforts[k]`` and every column shares the same innovations.
    """
    if grid != contract.grid:
        raise ValueError("simulation grid differs from the contract grid")
    coef = FilterCoefficients.build(model, contract.V, grid, contract.lambda_path)
    efforts = [_effort_array(b, grid) for b in efforts]
    t = grid.nodes
    dt = grid.dt

    def block(start, stop):
        dI = increment_block(grid, mc.master_seed, start, stop)
        out = np.empty((stop - start, len(efforts)))
        for k, b in enumerate(efforts):
            _, B, used = step_filter(coef, dI, b)
            running = cost(t[None, :-1], used[:, :-1]).sum(axis=1) * dt
            out[:, k] = payoff_block(contract, B) - running
        return out

    return map_path_chunks(block, mc.n_paths, threads=threads)


def agent_value_mc(contract: Contract, beta, model: LinearModel, cost: CostFunction, mc: McConfig,
                   grid: TimeGrid, threads: int | None = None) -> McEstimate:
    """Estimate the agent's expected utility ``E^beta[xi - int c(beta) dt]``."""
    return McEstimate.from_samples(agent_value_samples(contract, [beta], model, cost, mc, grid, threads)[:, 0])


def principal_value_mc(contract: Contract, beta, model: LinearModel, cost: CostFunction, mc: McConfig,
                       grid: TimeGrid, threads: int | None = None) -> McEstimate:
    """Estimate ``E^beta[B_T - xi]``."""
    coef = FilterCoefficients.build(model, contract.V, grid, contract.lambda_path)
    b = _effort_array(beta, grid)

    def block(start, stop):
        dI = increment_block(grid, mc.master_seed, start, stop)
        _, B, _ = step_filter(coef, dI, b)
        return B[:, -1] - payoff_block(contract, B)

    return McEstimate.from_samples(map_path_chunks(block, mc.n_paths, threads=threads))


@dataclass(frozen=True)
class DeviationResult:
    name: str
    gap: float
    std_error: float
    deviation_value: float

    @property
    def significant(self) -> bool:
        return self.gap > 3 * self.std_error

    @property
    def reversed(self) -> bool:
        return self.gap < -3 * self.std_error

    def to_dict(self) -> dict:
        return {**asdict(self), "significant": self.significant, "reversed": self.reversed}


def deviation_family(beta: Path, controls: ControlSet) -> dict[str, np.ndarray]:
    """Fixed test family of efforts around ``beta``, clamped to A.

    Constant shifts of +-0.1 and +-0.2, and linear ramps of amplitude 0.2
    rising from 0 (``*_late``) or fading to 0 (``*_early``).
    """
    grid = beta.grid
    s = grid.nodes / grid.T if grid.T > 0 else np.zeros(grid.N + 1)
    b = np.asarray(beta.values)
    bumps = {
        "shift+0.1": 0.1, "shift-0.1": -0.1, "shift+0.2": 0.2, "shift-0.2": -0.2,
        "ramp+0.2_late": 0.2 * s, "ramp-0.2_late": -0.2 * s,
        "ramp+0.2_early": 0.2 * (1 - s), "ramp-0.2_early": -0.2 * (1 - s),
    }
    return {name: controls.clamp(b + bump) for name, bump in bumps.items()}


def compare_deviations(contract: Contract, beta_star: Path, deviations: dict[str, np.ndarray],
                       model: LinearModel, cost: CostFunction, mc: McConfig, grid: TimeGrid,
                       threads: int | None = None) -> tuple[McEstimate, list[DeviationResult]]:
    """Agent value at ``beta_star`` and its paired gap over each deviation."""
    names = list(deviations)
    vals = agent_value_samples(contract, [beta_star] + [deviations[n] for n in names],
                               model, cost, mc, grid, threads)
    base = McEstimate.from_samples(vals[:, 0])
    out = []
    for k, name in enumerate(names, start=1):
        gap = McEstimate.from_samples(vals[:, 0] - vals[:, k])
        out.append(DeviationResult(name, gap.mean, gap.std_error, float(vals[:, k].mean())))
    return base, out


@dataclass(frozen=True)
class StationarityPoint:
    eps: float
    derivative: float
    std_error: float
    clamped: bool

    def to_dict(self) -> dict:
        return asdict(self)


def stationarity_check(contract: Contract, beta_star, direction, epsilons: Sequence[float],
                       model: LinearModel, cost: CostFunction, mc: McConfig, grid: TimeGrid,
                       controls: ControlSet | None = None, threads: int | None = None) -> list[StationarityPoint]:
    """Directional difference quotients ``(J(beta* + eps d) - J(beta*)) / eps`` with common randomness.

    Perturbed efforts leaving A are clamped and the point is flagged.
    """
    b = _effort_array(beta_star, grid)
    d = _effort_array(direction, grid)
    efforts, flags = [b], []
    for eps in epsilons:
        raw = b + eps * d
        clipped = controls.clamp(raw) if controls is not None else raw
        flags.append(bool(np.any(clipped != raw)))
        efforts.append(clipped)
    vals = agent_value_samples(contract, efforts, model, cost, mc, grid, threads)
    out = []
    for k, eps in enumerate(epsilons, start=1):
        q = McEstimate.from_samples((vals[:, k] - vals[:, 0]) / eps)
        out.append(StationarityPoint(float(eps), q.mean, q.std_error, flags[k - 1]))
    return out


@dataclass(frozen=True)
class BandCheck:
    ok: bool
    worst_margin: float
    worst_node: int


def sufficient_condition_check(Q: Path, model: LinearModel, cost: CostFunction, controls: ControlSet,
                               grid: TimeGrid, lambda_path: Path | None = None,
                               d2_min: float | None = None) -> BandCheck:
    """Band ``0 <= Q / (2 h lam) <= inf_A c''`` at every node.

    Where ``h lam = 0`` the band is read in the limit: the node passes only
    if ``Q = 0`` (margin ``-|Q|``). ``d2_min`` overrides the band's upper
    edge.
    """
    q = np.asarray(Q.values)
    scale = 2.0 * sample(model.h, grid)
    if lambda_path is not None:
        scale = scale * np.asarray(lambda_path.values)
    t = grid.nodes
    upper = (np.full_like(t, d2_min) if d2_min is not None
             else np.array([cost.d2_inf(ti, controls) for ti in t]))
    margin = np.empty_like(q)
    zero = scale == 0
    ratio = np.divide(q, scale, out=np.zeros_like(q), where=~zero)
    margin[~zero] = np.minimum(ratio, upper - ratio)[~zero]
    margin[zero] = 0.0 - np.abs(q[zero])
    worst = int(np.argmin(margin))
    return BandCheck(bool(margin[worst] >= 0), float(margin[worst]), worst)


def incentive_residuals(sol: FbsdeSolution, beta: Path, model: LinearModel, cost: CostFunction, V: Path,
                        grid: TimeGrid, lambda_path: Path | None = None,
                        controls: ControlSet | None = None) -> dict[str, float]:
    """Both forms of the incentive constraint.

    ``first_order``: ``sup |c'(beta) - (Z + V h lam P)|``. ``literal``:
    ``sup_t max_{b in {lo, hi}} ((Z + V h lam P - beta)(b - beta))^+``, the
    variational-inequality form that presumes ``c'(b) = b``.
    """
    t = grid.nodes
    b = np.asarray(beta.values)
    lam = np.ones(grid.N + 1) if lambda_path is None else np.asarray(lambda_path.values)
    marginal = np.asarray(sol.Z.values) + np.asarray(V.values) * sample(model.h, grid) * lam * np.asarray(sol.P.values)
    out = {"first_order": float(np.max(np.abs(cost.d1(t, b) - marginal)))}
    if controls is not None:
        lit = np.maximum.reduce([np.maximum((marginal - b) * (edge - b), 0.0)
                                 for edge in (controls.lo, controls.hi)])
        out["literal"] = float(np.max(lit))
    return out


def incentive_residual(sol: FbsdeSolution, beta: Path, model: LinearModel, cost: CostFunction, V: Path,
                       grid: TimeGrid, lambda_path: Path | None = None,
                       controls: ControlSet | None = None) -> float:
    """Single agent: ``sup |Z - c'(beta) + V h P|``.

    With ``lambda_path`` (mean-field mode) the literal variational-inequality
    residual is returned instead; it needs ``controls``.
    """
    if lambda_path is None:
        return incentive_residuals(sol, beta, model, cost, V, grid)["first_order"]
    if controls is None:
        raise ValueError("mean-field incentive residual needs the control set")
    return incentive_residuals(sol, beta, model, cost, V, grid, lambda_path, controls)["literal"]


_EXP_LIMIT = 700.0


def cara_value_check(Z: Path, Y0: float, cost: CostFunction, beta, cara: CaraParams, model: LinearModel,
                     V: Path, mc: McConfig, grid: TimeGrid, threads: int | None = None) -> McEstimate:
    """Defect ``|Y0 + ln(-V_A) / lam|`` of the exponential-utility value identity.

    The payment is built by stepping ``dY = (c + lam Z^2 / 2) dt + Z dI`` from
    ``Y0`` and ``V_A = E[-exp(-lam (xi - int c))]`` is estimated by Monte Carlo.
    The returned standard error is the delta-method error of the defect.
    """
    lam = cara.risk_aversion
    z = np.asarray(Z.values)[:-1]
    dt = grid.dt
    if callable(_effort_array(beta, grid)):
        raise ValueError("cara_value_check needs an open-loop effort")

    def block(start, stop):
        dI = increment_block(grid, mc.master_seed, start, stop)
        # xi - int c: the cost drift of Y cancels against the running cost
        net = Y0 + (0.5 * lam * z * z * dt + z * dI).sum(axis=1)
        expo = -lam * net
        worst = float(np.max(np.abs(expo))) if expo.size else 0.0
        if worst > _EXP_LIMIT:
            raise OverflowError(f"exponent magnitude {worst:.1f} exceeds {_EXP_LIMIT}; "
                                "rescale payments (smaller Y0 or Z) or lower the risk aversion")
        return -np.exp(expo)

    va = McEstimate.from_samples(map_path_chunks(block, mc.n_paths, threads=threads))
    defect = abs(Y0 + math.log(-va.mean) / lam)
    return McEstimate(defect, va.std_error / (lam * abs(va.mean)), va.n_paths)


def cara_payment_paths(Z: Path, Y0: float, cost: CostFunction, beta: Path, cara: CaraParams,
                       dI: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Forward ``Y`` under exponential utility for given innovations (rows)."""
    z = np.asarray(Z.values)[:-1]
    c = np.asarray(cost(grid.nodes[:-1], np.asarray(beta.values)[:-1]))
    steps = (c + 0.5 * cara.risk_aversion * z * z) * grid.dt + z * np.atleast_2d(dI)
    Y = np.empty((steps.shape[0], grid.N + 1))
    Y[:, 0] = Y0
    Y[:, 1:] = Y0 + np.cumsum(steps, axis=1)
    return Y


__all__ = [
    "McEstimate", "DeviationResult", "StationarityPoint", "BandCheck", "DEVIATION_FAMILY_VERSION",
    "agent_value_samples", "agent_value_mc", "principal_value_mc", "deviation_family",
    "compare_deviations", "stationarity_check", "sufficient_condition_check", "incentive_residual",
    "incentive_residuals", "cara_value_check", "cara_payment_paths", "forward_Y",
]
