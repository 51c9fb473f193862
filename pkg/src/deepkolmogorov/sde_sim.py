"""Time grids, initial-point sampling, one-step maps and terminal-value simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

StepMap = Callable[[float, float, np.ndarray, np.ndarray], np.ndarray]


class CholeskyError(ValueError):
    """Raised when a matrix is not (numerically) positive definite."""


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    step_count: int
    nodes: np.ndarray

    @property
    def step_sizes(self) -> np.ndarray:
        return np.diff(self.nodes)


def make_grid(T: float, N: int) -> TimeGrid:
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"step count must be a positive integer, got {N!r}")
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T!r}")
    nodes = np.arange(N + 1, dtype=np.float64) * T / N
    nodes[-1] = T
    return TimeGrid(float(T), int(N), nodes)


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box; ``lower[i] < upper[i]`` for every coordinate."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if not np.all(lo < hi):
            raise ValueError("every interval needs lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, a: float, b: float, d: int) -> "Domain":
        return cls(np.full(d, float(a)), np.full(d, float(b)))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)


def sample_initial(domain: Domain, count: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Draw ``count`` i.i.d. points uniformly from ``domain`` (shape ``count x d``)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    u = rng.random((count, domain.dim))
    return (domain.lower + (domain.upper - domain.lower) * u).astype(dtype, copy=False)


def brownian_increments(rng: np.random.Generator, shape, dt: float, dtype=np.float64) -> np.ndarray:
    # numpy's ziggurat normal sampler is exact; fixed for the build.
    return (math.sqrt(dt) * rng.standard_normal(shape)).astype(dtype, copy=False)


def euler_maruyama_step(drift, diffusion, x, dt: float, dw) -> np.ndarray:
    """One Euler-Maruyama step ``x + drift(x) dt + diffusion(x) dw``.

    ``diffusion(x)`` may return a full matrix per state (``... x d x d``) or a
    vector of the same shape as ``x``, which is read as a diagonal matrix.
    """
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    dw = np.asarray(dw, dtype=x.dtype)
    mu = np.asarray(drift(x))
    sig = np.asarray(diffusion(x))
    if mu.shape != x.shape:
        raise ValueError(f"drift has shape {mu.shape}, state has {x.shape}")
    if dw.shape != x.shape:
        raise ValueError(f"increment has shape {dw.shape}, state has {x.shape}")
    if sig.shape == x.shape:
        noise = sig * dw
    elif sig.shape == x.shape + x.shape[-1:]:
        noise = np.einsum("...ij,...j->...i", sig, dw)
    elif sig.shape == (x.shape[-1], x.shape[-1]):
        noise = dw @ sig.T
    else:
        raise ValueError(f"diffusion has shape {sig.shape}, incompatible with state {x.shape}")
    return x + mu * dt + noise


# --- one-step maps ---------------------------------------------------------


def step_heat(s, t, x, w):
    return x + math.sqrt(2.0) * w


def step_gbm(mu, sigma, s, t, x, w):
    """Exact lognormal step for independent geometric Brownian motions."""
    mu = np.asarray(mu, dtype=x.dtype)
    sigma = np.asarray(sigma, dtype=x.dtype)
    return x * np.exp((mu - 0.5 * sigma**2) * (t - s) + sigma * w)


def step_bs_correlated(mu, beta, chol, s, t, x, w):
    """Lognormal step with noise ``beta_k <chol_k, w>`` for coordinate ``k``.

    ``chol`` is the lower-triangular factor of the correlation matrix; its rows
    are the vectors ``chol_k``.
    """
    chol = np.asarray(chol, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    row_sq = np.sum(chol**2, axis=1)
    correction = 0.5 * beta**2 * row_sq
    return x * np.exp((mu - correction) * (t - s) + beta * (w @ chol.T))


def lorenz_drift(x, alpha=(10.0, 14.0, 8.0 / 3.0)):
    a1, a2, a3 = alpha
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([a1 * (x2 - x1), a2 * x1 - x2 - x1 * x3, x1 * x2 - a3 * x3], axis=-1)


def step_lorenz_tamed(alpha, beta, threshold, s, t, x, w):
    """Euler step that drops the drift wherever ``|drift(x)| > threshold``."""
    mu = lorenz_drift(x, alpha)
    keep = np.linalg.norm(mu, axis=-1, keepdims=True) <= threshold
    return x + np.where(keep, mu * (t - s), 0.0) + beta * w


def step_heston(alpha, kappa, theta, beta, rho, s, t, x, w):
    """Heston step on interleaved (price, variance) pairs.

    The variance recursion is the clipped square-root scheme, with both nested
    maxima and the outer clip at zero.
    """
    price, var = x[..., 0::2], x[..., 1::2]
    if np.any(var < 0):
        raise ValueError("variance coordinates must be non-negative")
    w1, w2 = w[..., 0::2], w[..., 1::2]
    dt = t - s
    sqrt_v = np.sqrt(var)
    floor = 0.5 * beta * math.sqrt(dt)
    new_price = price * np.exp((alpha - 0.5 * var) * dt + w1 * sqrt_v)
    level = np.maximum(floor, np.maximum(floor, sqrt_v) + 0.5 * beta * (rho * w1 + math.sqrt(1.0 - rho**2) * w2))
    new_var = np.maximum(level**2 + (kappa * theta - 0.25 * beta**2 - kappa * var) * dt, 0.0)
    out = np.empty_like(x)
    out[..., 0::2] = new_price
    out[..., 1::2] = new_var
    return out


def cholesky_factor(Q, rel_tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with positive diagonal and ``L @ L.T == Q``.

    A pivot at or below ``rel_tol * max(diag(Q))`` counts as failure.
    """
    Q = np.array(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise CholeskyError("matrix must be square")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-14 * max(1.0, np.abs(Q).max())):
        raise CholeskyError("matrix must be symmetric")
    n = Q.shape[0]
    tol = rel_tol * max(np.max(np.diag(Q)), 0.0)
    L = np.zeros_like(Q)
    for j in range(n):
        pivot = Q[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > tol:
            raise CholeskyError(f"non-positive pivot {pivot:.3e} at column {j}")
        L[j, j] = math.sqrt(pivot)
        L[j + 1 :, j] = (Q[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


# --- problems --------------------------------------------------------------


@dataclass
class SdeProblem:
    """A Kolmogorov problem: SDE one-step map, payoff, horizon, grid and box.

    ``drift``/``diffusion`` and ``exact`` are optional; they are used only by
    the strong-convergence study, which needs the coefficients for
    Euler-Maruyama and an exact one-step map to couple against.
    """

    name: str
    d: int
    T: float
    N: int
    domain: Domain
    step_map: StepMap
    payoff: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    drift: Callable | None = None
    diffusion: Callable | None = None
    exact: bool = False

    @property
    def grid(self) -> TimeGrid:
        return make_grid(self.T, self.N)


@dataclass(frozen=True)
class PathBatch:
    initial: np.ndarray
    terminal: np.ndarray

    def __post_init__(self):
        if self.initial.shape[0] != self.terminal.shape[0]:
            raise ValueError("initial and terminal batches differ in row count")


def simulate_terminal(problem: SdeProblem, xi, rng: np.random.Generator, increments=None) -> PathBatch:
    """Apply the problem's one-step map ``N`` times starting from ``xi``.

    Fresh increments ``sqrt(dt) * z`` are drawn per step unless ``increments``
    (shape ``N x J x d``) is given.
    """
    xi = np.atleast_2d(xi)
    grid = problem.grid
    x = xi
    for n in range(grid.step_count):
        s, t = grid.nodes[n], grid.nodes[n + 1]
        if increments is None:
            w = brownian_increments(rng, x.shape, t - s, x.dtype)
        else:
            w = np.asarray(increments[n], dtype=x.dtype)
        x = problem.step_map(s, t, x, w)
    return PathBatch(xi, x)
