"""Model primitives: time grid, linear filtered system, controls, costs, Hamiltonians.

Everything is scalar (one observable, one filtered state). Coefficient
functions are plain callables of time; they are sampled onto a
:class:`TimeGrid` once and downstream code works on the sampled arrays.

Two Hamiltonian sign conventions coexist in this problem. The linear-system
Hamiltonian :func:`hamiltonian_linear` carries ``+c`` and the agent's effort
minimises it; :func:`agent_hamiltonian` is its negation, maximised by the
same effort. :func:`hamiltonian_general` keeps the ``-c`` / argmax form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Coefficient = Callable[[float], float]


class DomainError(ValueError):
    """An argument lies outside the domain of the model."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i*T/N`` on ``[0, T]``.

    ``T = 0`` is accepted as a degenerate grid (every integral is empty).
    """

    T: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T < 0:
            raise DomainError(f"horizon must be finite and >= 0, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"steps must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.N * factor)

    def check_time(self, t: float) -> None:
        if not (-1e-12 <= t <= self.T * (1 + 1e-12) + 1e-12):
            raise DomainError(f"time {t} outside [0, {self.T}]")


def constant(value: float) -> Coefficient:
    """Constant coefficient usable both on scalars and on arrays of times."""
    value = float(value)

    def f(t):
        return np.full(np.shape(t), value) if np.ndim(t) else value

    f.__name__ = f"constant({value!r})"
    return f


def sample(f: Coefficient, grid: TimeGrid) -> np.ndarray:
    """Evaluate ``f`` at every grid node, as a float array of length N+1."""
    nodes = grid.nodes
    try:
        out = np.asarray(f(nodes), dtype=float)
        if out.shape != nodes.shape:
            raise ValueError
    except Exception:
        out = np.array([float(f(t)) for t in nodes])
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.isfinite(out)))
        raise DomainError(f"coefficient {getattr(f, '__name__', f)} not finite at node {bad}")
    return out


@dataclass(frozen=True)
class LinearModel:
    """Partially observed linear system.

    Hidden state ``dX^ = eta X^ dt + noise``, observation
    ``dB = (h X^ + beta) dt + dW``, Gaussian prior ``N(m0, V0)``. ``sigma`` is
    the additive forcing of the posterior-variance ODE
    ``V' = 2 eta V - h^2 V^2 + sigma`` (a variance, not a volatility).
    """

    eta: Coefficient
    h: Coefficient
    sigma: Coefficient
    m0: float = 0.0
    V0: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.m0):
            raise DomainError("prior mean must be finite")
        if not np.isfinite(self.V0) or self.V0 < 0:
            raise DomainError(f"prior variance must be >= 0, got {self.V0}")

    @classmethod
    def constant(cls, eta: float = 0.0, h: float = 1.0, sigma: float = 0.0,
                 m0: float = 0.0, V0: float = 0.0) -> "LinearModel":
        return cls(constant(eta), constant(h), constant(sigma), float(m0), float(V0))

    def sampled(self, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return sample(self.eta, grid), sample(self.h, grid), sample(self.sigma, grid)


@dataclass(frozen=True)
class ControlSet:
    """Compact interval ``[lo, hi]`` of admissible efforts."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.lo > self.hi:
            raise DomainError(f"invalid control set [{self.lo}, {self.hi}]")

    def clamp(self, b):
        return np.clip(b, self.lo, self.hi)

    def contains(self, b, tol: float = 0.0) -> bool:
        b = np.asarray(b)
        return bool(np.all((b >= self.lo - tol) & (b <= self.hi + tol)))

    def check(self, b) -> None:
        if not self.contains(b, tol=1e-12):
            raise DomainError(f"control {b} outside [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class CostFunction:
    """Agent effort cost ``c(t, b)`` with its first two b-derivatives.

    All callables take ``(t, b)`` (``d1_inverse`` takes ``(t, y)``) and should
    accept numpy arrays. ``kind``/``params`` describe the cost for
    serialization; custom costs use ``kind="custom"``.
    """

    eval: Callable
    d1: Callable
    d2: Callable
    d1_inverse: Callable
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t, b):
        return self.eval(t, b)

    def d2_inf(self, t, controls: ControlSet, n: int = 1001) -> float:
        """``inf_{b in A} d2(t, b)``; exact for quadratic costs, sampled otherwise."""
        if self.kind == "quadratic":
            return float(self.params["kappa"])
        bs = np.linspace(controls.lo, controls.hi, n)
        return float(np.min(self.d2(np.full_like(bs, t), bs)))


def quadratic_cost(kappa: float = 1.0) -> CostFunction:
    """``c(t, b) = kappa b^2 / 2``."""
    if not kappa > 0:
        raise DomainError(f"kappa must be > 0, got {kappa}")
    kappa = float(kappa)
    return CostFunction(
        eval=lambda t, b: 0.5 * kappa * np.square(b),
        d1=lambda t, b: kappa * np.asarray(b, dtype=float),
        d2=lambda t, b: np.full(np.shape(b), kappa) if np.ndim(b) else kappa,
        d1_inverse=lambda t, y: np.asarray(y, dtype=float) / kappa,
        kind="quadratic",
        params={"kappa": kappa},
    )


@dataclass(frozen=True)
class CaraParams:
    risk_aversion: float

    def __post_init__(self):
        if not self.risk_aversion > 0:
            raise DomainError(f"risk aversion must be > 0, got {self.risk_aversion}")


@dataclass(frozen=True)
class GeneralCoefficients:
    """State coefficients ``b_t(x, a)``, ``eta_t(x, a)``, ``sigma_t(x, a)``."""

    b: Callable
    eta: Callable
    sigma: Callable


def _check_domain(t, controls, horizon, *actions):
    if horizon is not None and not (0.0 <= t <= horizon):
        raise DomainError(f"time {t} outside [0, {horizon}]")
    if controls is not None:
        for a in actions:
            controls.check(a)


def hamiltonian_general(t, x, x_prime, a, a_prime, p, q, z, coeffs: GeneralCoefficients,
                        cost: CostFunction, controls: ControlSet | None = None,
                        horizon: float | None = None) -> float:
    """Scalar general Hamiltonian (``-c`` form, maximised by the agent)::

        p (eta(x,a) + sigma(x,a) b(x',a')) + q sigma(x,a) + z b(x,a) - c(a)
    """
    _check_domain(t, controls, horizon, a, a_prime)
    sig = coeffs.sigma(t, x, a)
    return (p * (coeffs.eta(t, x, a) + sig * coeffs.b(t, x_prime, a_prime))
            + q * sig + z * coeffs.b(t, x, a) - cost(t, a))


def hamiltonian_linear(t, x, b, p, q, z, model: LinearModel, V_t: float, cost: CostFunction,
                       controls: ControlSet | None = None) -> float:
    """``(eta x - h V (h x + b)) p - (h x + b) z + c(t, b)``; ``q`` does not enter."""
    if controls is not None:
        controls.check(b)
    if V_t < 0:
        raise DomainError(f"variance must be >= 0, got {V_t}")
    eta, h = model.eta(t), model.h(t)
    return (eta * x - h * V_t * (h * x + b)) * p - (h * x + b) * z + cost(t, b)


def agent_hamiltonian(t, x, b, p, q, z, model, V_t, cost, controls=None) -> float:
    """Negated :func:`hamiltonian_linear`; its argmax over A is :func:`best_response`."""
    return -hamiltonian_linear(t, x, b, p, q, z, model, V_t, cost, controls)


def hamiltonian_cara(t, x, a, b, p, q, z, model: LinearModel, V_t: float, cost: Callable,
                     cara: CaraParams | float, controls: ControlSet | None = None) -> float:
    """Exponential-utility Hamiltonian with hidden-drift control ``a``.

    ``cost`` is called as ``cost(t, a, b)`` when it accepts three arguments;
    a :class:`CostFunction` is charged on ``b`` only.
    """
    lam = cara.risk_aversion if isinstance(cara, CaraParams) else float(cara)
    if controls is not None:
        controls.check(b)
    eta, h = model.eta(t), model.h(t)
    c = cost(t, b) if isinstance(cost, CostFunction) else cost(t, a, b)
    return ((eta * x + a - h * V_t * (h * x + b)) * p - (h * x + b) * z + c
            + lam * x * q * z)


def best_response(t, x, p, q, z, model: LinearModel, V_t: float, cost: CostFunction,
                  controls: ControlSet) -> float:
    """Minimiser over A of ``b -> -(h V p + z) b + c(t, b)``.

    Strict convexity makes the clamped first-order point the unique minimiser,
    so corner solutions come from clipping. ``x`` and ``q`` do not enter.
    """
    y = z + model.h(t) * V_t * p
    return float(controls.clamp(cost.d1_inverse(t, y)))
