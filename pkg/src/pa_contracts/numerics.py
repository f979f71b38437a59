"""ODE/SDE integration, quadrature and reproducible random streams.

Random numbers
--------------
Each Monte Carlo path ``i`` owns the stream ``(master_seed, i)``. The stream
is a Philox4x64-10 counter-based generator whose 128-bit key is
``master_seed * 2**64 + i`` and whose counter starts at zero. Raw 64-bit
outputs ``r`` become uniforms ``u = ((r >> 11) + 1) * 2**-53`` in ``(0, 1]``
and consecutive pairs ``(u1, u2)`` become normals by Box-Muller
(``sqrt(-2 ln u1) cos(2 pi u2)``, then the ``sin`` partner). Because a path's
draws depend only on its key, results do not depend on chunking or on the
number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import TimeGrid

THREADS_ENV = "PA_CONTRACTS_THREADS"
_MASK64 = (1 << 64) - 1


class IntegrationError(ArithmeticError):
    """A non-finite value appeared while stepping a scheme."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (first bad node {node})")
        self.node = node


@dataclass(frozen=True, eq=False)
class Path:
    """Values of a deterministic function sampled at every grid node."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.N + 1,):
            raise ValueError(f"path needs {self.grid.N + 1} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise IntegrationError("non-finite path value", int(np.argmax(~np.isfinite(v))))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> "Path":
        return cls(grid, np.full(grid.N + 1, float(value)))

    @classmethod
    def from_function(cls, grid: TimeGrid, f: Callable) -> "Path":
        from .model import sample
        return cls(grid, sample(f, grid))

    def midpoints(self) -> np.ndarray:
        """Values at ``t_i + dt/2`` by 4-point Lagrange interpolation (O(dt^4)).

        Constant data is reproduced exactly. Grids with fewer than three
        steps fall back to linear interpolation.
        """
        v = self.values
        n = len(v) - 1
        if n < 3:
            return 0.5 * (v[:-1] + v[1:])
        mid = np.empty(n)
        mid[1:-1] = (-v[:-3] + 9.0 * v[1:-2] + 9.0 * v[2:-1] - v[3:]) / 16.0
        mid[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
        mid[-1] = (v[-4] - 5.0 * v[-3] + 15.0 * v[-2] + 5.0 * v[-1]) / 16.0
        return mid

    def as_function(self) -> Callable[[float], float]:
        """Callable exact at nodes and interpolated at half-steps, for RK4 stages."""
        dt = self.grid.dt
        nodes, mids = self.values, self.midpoints()

        def f(t):
            if dt == 0:
                return float(nodes[0])
            k = int(round(2.0 * t / dt))
            k = min(max(k, 0), 2 * self.grid.N)
            return float(nodes[k // 2] if k % 2 == 0 else mids[k // 2])

        return f

    def to_list(self) -> list[float]:
        return [float(x) for x in self.values]


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_index: int

    def __post_init__(self):
        if not 0 <= self.master_seed <= _MASK64:
            raise ValueError("master_seed must fit in 64 bits")
        if not 0 <= self.stream_index <= _MASK64:
            raise ValueError("stream_index must be a nonnegative 64-bit integer")

    def normals(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0)
        m = n + (n & 1)
        raw = np.random.Philox(key=(self.master_seed << 64) | self.stream_index).random_raw(m)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    master_seed: int = 0

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if not 0 <= self.master_seed <= _MASK64:
            raise ValueError("master_seed must fit in 64 bits")


def worker_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def brownian_increments(grid: TimeGrid, stream: RngStream) -> np.ndarray:
    """N i.i.d. ``Normal(0, dt)`` increments for one stream."""
    return math.sqrt(grid.dt) * stream.normals(grid.N)


def increment_block(grid: TimeGrid, master_seed: int, start: int, stop: int) -> np.ndarray:
    """Increments for paths ``start..stop-1`` stacked as rows."""
    out = np.empty((stop - start, grid.N))
    for row, i in enumerate(range(start, stop)):
        out[row] = brownian_increments(grid, RngStream(master_seed, i))
    return out


def map_path_chunks(fn: Callable[[int, int], np.ndarray], n_paths: int,
                    chunk: int = 4096, threads: int | None = None) -> np.ndarray:
    """Apply ``fn(start, stop)`` over path chunks and concatenate in path order."""
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]
    threads = worker_threads() if threads is None else max(1, threads)
    if threads == 1 or len(bounds) == 1:
        parts = [fn(s, e) for s, e in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    return np.concatenate(parts, axis=0)


def rk4_solve(f: Callable[[float, float], float], y0: float, grid: TimeGrid,
              reverse: bool = False) -> Path:
    """Classical RK4 on the grid.

    With ``reverse=True`` ``y0`` is the terminal value at ``T`` and the
    equation ``y' = f(t, y)`` is integrated backwards to 0.
    """
    n, dt = grid.N, grid.dt
    t = grid.nodes
    y = np.empty(n + 1)
    if reverse:
        order, h = range(n, 0, -1), -dt
        y[n] = y0
    else:
        order, h = range(0, n), dt
        y[0] = y0
    # overflow surfaces as a non-finite node below
    with np.errstate(over="ignore", invalid="ignore"):
        for i in order:
            j = i - 1 if reverse else i + 1
            ti, yi = t[i], y[i]
            k1 = f(ti, yi)
            k2 = f(ti + h / 2, yi + h / 2 * k1)
            k3 = f(ti + h / 2, yi + h / 2 * k2)
            k4 = f(ti + h, yi + h * k3)
            y[j] = yi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not math.isfinite(y[j]):
                raise IntegrationError("RK4 produced a non-finite value", j)
    return Path(grid, y)


def trapezoid(values: Path) -> float:
    """Composite trapezoid integral over the whole grid."""
    v = np.asarray(values.values)
    if len(v) == 1:
        return 0.0
    return values.grid.dt * (math.fsum(v[1:-1]) + 0.5 * (v[0] + v[-1]))


def cumulative_trapezoid(values: Path | np.ndarray, dt: float | None = None) -> np.ndarray:
    """Running trapezoid integral from node 0, with a leading 0."""
    if isinstance(values, Path):
        dt, v = values.grid.dt, values.values
    else:
        v = np.asarray(values, dtype=float)
    out = np.zeros(len(v))
    np.cumsum(0.5 * dt * (v[1:] + v[:-1]), out=out[1:])
    return out


def exp_integral(g: Path, t_index: int, s_index: int) -> float:
    """``exp`` of the trapezoid integral of ``g`` between nodes t and s."""
    if t_index > s_index:
        raise ValueError(f"t_index {t_index} must not exceed s_index {s_index}")
    c = cumulative_trapezoid(g)
    return math.exp(c[s_index] - c[t_index])


def exp_integral_matrix(g: Path) -> np.ndarray:
    """``E[i, j] = exp(int_{t_i}^{t_j} g)`` for ``j >= i``, zero below the diagonal."""
    c = cumulative_trapezoid(g)
    upper = np.triu(c[None, :] - c[:, None])
    return np.triu(np.exp(upper))


def euler_path(drift: Callable, diffusion: Callable, x0, increments: np.ndarray,
               grid: TimeGrid):
    """Euler-Maruyama ``x_{i+1} = x_i + drift(i, x_i) dt + diffusion(i, x_i) dW_i``.

    ``drift``/``diffusion`` receive the node index and the current state
    (an array when several paths are stepped at once). ``increments`` has
    shape ``(..., N)``; a single path returns a :class:`Path`, a batch
    returns an array of shape ``(..., N+1)``.
    """
    dw = np.asarray(increments, dtype=float)
    if dw.shape[-1] != grid.N:
        raise ValueError(f"expected {grid.N} increments, got {dw.shape[-1]}")
    x = np.empty(dw.shape[:-1] + (grid.N + 1,))
    x[..., 0] = x0
    dt = grid.dt
    for i in range(grid.N):
        xi = x[..., i]
        x[..., i + 1] = xi + drift(i, xi) * dt + diffusion(i, xi) * dw[..., i]
        if not np.all(np.isfinite(x[..., i + 1])):
            raise IntegrationError("Euler step produced a non-finite state", i + 1)
    return Path(grid, x) if x.ndim == 1 else x
