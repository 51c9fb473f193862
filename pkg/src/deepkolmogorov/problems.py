"""Registry of the five benchmark problems with their default constants.

Every constant can be overridden by keyword, e.g.
``make_problem("gbm", d=1, sigma=[0.2])``.
"""

from __future__ import annotations

import math
from functools import partial

import numpy as np

from .sde_sim import (
    Domain,
    SdeProblem,
    cholesky_factor,
    lorenz_drift,
    step_bs_correlated,
    step_gbm,
    step_heat,
    step_heston,
    step_lorenz_tamed,
)

PROBLEM_NAMES = ("heat", "gbm", "blackscholes-corr", "lorenz", "heston")


def _squared_norm(x):
    return np.sum(x * x, axis=-1)


def _linear_vol(d: int) -> np.ndarray:
    # 1/10 + i/200 for i = 1..d
    return 0.1 + np.arange(1, d + 1) / 200.0


def heat(d: int = 100, T: float = 1.0, N: int = 1, domain: Domain | None = None) -> SdeProblem:
    return SdeProblem(
        name="heat",
        d=d,
        T=T,
        N=N,
        domain=domain or Domain.cube(0.0, 1.0, d),
        step_map=step_heat,
        payoff=_squared_norm,
        params={},
        drift=np.zeros_like,
        diffusion=lambda x: np.full_like(x, math.sqrt(2.0)),
        exact=True,
    )


def gbm(d: int = 100, T: float = 1.0, N: int = 1, r: float = 1 / 20, mu=None, sigma=None,
        strike: float = 100.0, domain: Domain | None = None) -> SdeProblem:
    mu = np.broadcast_to(np.asarray(r - 0.1 if mu is None else mu, dtype=np.float64), (d,)).copy()
    sigma = _linear_vol(d) if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=np.float64), (d,)).copy()
    discount = math.exp(-r * T)

    def payoff(x):
        return discount * np.maximum(np.max(x, axis=-1) - strike, 0.0)

    return SdeProblem(
        name="gbm",
        d=d,
        T=T,
        N=N,
        domain=domain or Domain.cube(90.0, 110.0, d),
        step_map=partial(step_gbm, mu, sigma),
        payoff=payoff,
        params={"r": r, "mu": mu, "sigma": sigma, "strike": strike},
        drift=lambda x: mu * x,
        diffusion=lambda x: sigma * x,
        exact=True,
    )


def correlation_matrix(d: int, rho: float = 0.5) -> np.ndarray:
    Q = np.full((d, d), rho)
    np.fill_diagonal(Q, 1.0)
    return Q


def blackscholes_corr(d: int = 100, T: float = 1.0, N: int = 1, r: float = 1 / 20, mu: float | None = None,
                      beta=None, Q=None, strike: float = 110.0, domain: Domain | None = None) -> SdeProblem:
    mu = r - 0.1 if mu is None else float(mu)
    beta = _linear_vol(d) if beta is None else np.broadcast_to(np.asarray(beta, dtype=np.float64), (d,)).copy()
    Q = correlation_matrix(d) if Q is None else np.asarray(Q, dtype=np.float64)
    chol = cholesky_factor(Q)
    # discounting by exp(-mu T) as stated for this example (mu < 0)
    discount = math.exp(-mu * T)

    def payoff(x):
        return discount * np.maximum(strike - np.min(x, axis=-1), 0.0)

    return SdeProblem(
        name="blackscholes-corr",
        d=d,
        T=T,
        N=N,
        domain=domain or Domain.cube(90.0, 110.0, d),
        step_map=partial(step_bs_correlated, mu, beta, chol),
        payoff=payoff,
        params={"r": r, "mu": mu, "beta": beta, "Q": Q, "chol": chol, "strike": strike},
        drift=lambda x: mu * x,
        diffusion=lambda x: (beta * x)[..., :, None] * chol,
        exact=True,
    )


def lorenz(d: int = 3, T: float = 1.0, N: int = 100, alpha=(10.0, 14.0, 8.0 / 3.0), beta: float = 3 / 20,
           domain: Domain | None = None) -> SdeProblem:
    if d != 3:
        raise ValueError("the Lorenz problem is three-dimensional")
    alpha = tuple(float(a) for a in alpha)
    threshold = N / T
    return SdeProblem(
        name="lorenz",
        d=3,
        T=T,
        N=N,
        domain=domain or Domain(np.array([0.5, 8.0, 10.0]), np.array([1.5, 10.0, 12.0])),
        step_map=partial(step_lorenz_tamed, alpha, beta, threshold),
        payoff=_squared_norm,
        params={"alpha": alpha, "beta": beta, "threshold": threshold},
        drift=partial(lorenz_drift, alpha=alpha),
        diffusion=lambda x: np.full_like(x, beta),
        exact=False,
    )


def heston(d: int = 50, T: float = 1.0, N: int = 100, alpha: float = 1 / 20, kappa: float = 6 / 10,
           theta: float = 1 / 25, beta: float = 1 / 5, rho: float = -4 / 5, strike: float = 110.0,
           domain: Domain | None = None) -> SdeProblem:
    if d % 2:
        raise ValueError("the Heston problem needs an even dimension (price, variance pairs)")
    pairs = d // 2
    discount = math.exp(-alpha * T)

    def payoff(x):
        return discount * np.maximum(strike - np.mean(x[..., 0::2], axis=-1), 0.0)

    if domain is None:
        domain = Domain(np.tile([90.0, 0.02], pairs), np.tile([110.0, 0.2], pairs))
    return SdeProblem(
        name="heston",
        d=d,
        T=T,
        N=N,
        domain=domain,
        step_map=partial(step_heston, alpha, kappa, theta, beta, rho),
        payoff=payoff,
        params={"alpha": alpha, "kappa": kappa, "theta": theta, "beta": beta, "rho": rho, "strike": strike},
        exact=False,
    )


_BUILDERS = {
    "heat": heat,
    "gbm": gbm,
    "blackscholes-corr": blackscholes_corr,
    "lorenz": lorenz,
    "heston": heston,
}

_DEFAULT_DIM = {"heat": 100, "gbm": 100, "blackscholes-corr": 100, "lorenz": 3, "heston": 50}


def make_problem(name: str, **overrides) -> SdeProblem:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {', '.join(PROBLEM_NAMES)}") from None
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return builder(**overrides)


def default_dimension(name: str) -> int:
    return _DEFAULT_DIM[name]


def default_widths(name: str, d: int) -> tuple[int, int]:
    """Hidden widths used in the experiments: 2d, d+20 (Lorenz) or d+50 (Heston)."""
    if name == "lorenz":
        w = d + 20
    elif name == "heston":
        w = d + 50
    else:
        w = 2 * d
    return (w, w)
