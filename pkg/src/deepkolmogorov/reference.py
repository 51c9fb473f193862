"""Reference values u(T, x): analytic heat solution and Monte Carlo estimators."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .sde_sim import SdeProblem, simulate_terminal


@dataclass(frozen=True)
class ReferenceEstimate:
    value: float
    stderr: float
    samples: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("standard error must be non-negative")


def _estimate(values: np.ndarray) -> ReferenceEstimate:
    n = values.size
    mean = float(np.mean(values, dtype=np.float64))
    stderr = float(np.std(values, ddof=1, dtype=np.float64) / math.sqrt(n))
    return ReferenceEstimate(mean, stderr, n)


def heat_exact(t: float, x, d: int | None = None, diffusion_trace: float | None = None):
    """``|x|^2 + t Trace(sigma sigma^T)`` for one point or a batch of points.

    The heat problem steps ``x + sqrt(2) w`` (generator = Laplacian), so the
    trace defaults to ``2 d``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    trace = 2.0 * d if diffusion_trace is None else diffusion_trace
    return np.sum(x * x, axis=-1) + t * trace


def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def lognormal_option_closed_form(s0: float, drift: float, vol: float, T: float, strike: float,
                                 discount: float = 1.0, kind: str = "call") -> float:
    """``discount * E[max(S_T - K, 0)]`` with ``S_T = s0 exp((drift - vol^2/2) T + vol W_T)``."""
    if s0 <= 0 or vol < 0 or T <= 0:
        raise ValueError("need s0 > 0, vol >= 0, T > 0")
    forward = s0 * math.exp(drift * T)
    if vol == 0 or strike <= 0:
        call = max(forward - strike, 0.0) if vol == 0 else forward - strike
    else:
        sd = vol * math.sqrt(T)
        d1 = (math.log(forward / strike) + 0.5 * sd * sd) / sd
        call = forward * _norm_cdf(d1) - strike * _norm_cdf(d1 - sd)
    if kind == "call":
        return discount * call
    if kind == "put":
        return discount * (call - (forward - strike))
    raise ValueError("kind must be 'call' or 'put'")


def _point(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != d:
        raise ValueError(f"point has {x.size} coordinates, problem has {d}")
    return x


def _check_samples(samples: int):
    if samples < 2:
        raise ValueError("need at least 2 samples for a standard error")


def generic_feynman_kac_mc(problem: SdeProblem, x, samples: int, rng, chunk: int = 65536) -> ReferenceEstimate:
    """Average of ``payoff(X_N)`` over paths of the problem's own scheme started at ``x``."""
    _check_samples(samples)
    x = _point(x, problem.d)

    def draw(n, gen):
        paths = simulate_terminal(problem, np.broadcast_to(x, (n, problem.d)), gen)
        return problem.payoff(paths.terminal)

    return _estimate(rngmod.sharded(draw, samples, rng, chunk))


def gbm_representation_mc(x, problem: SdeProblem, samples: int, rng, chunk: int = 65536) -> ReferenceEstimate:
    """Monte Carlo over the exact lognormal law of independent GBMs at time ``T``."""
    _check_samples(samples)
    x = _point(x, problem.d)
    mu, sigma, T = problem.params["mu"], problem.params["sigma"], problem.T

    def draw(n, gen):
        w = math.sqrt(T) * gen.standard_normal((n, problem.d))
        return problem.payoff(x * np.exp(sigma * w + (mu - 0.5 * sigma**2) * T))

    return _estimate(rngmod.sharded(draw, samples, rng, chunk))


def bs_correlated_representation_mc(x, problem: SdeProblem, samples: int, rng, chunk: int = 65536) -> ReferenceEstimate:
    """Monte Carlo over the correlated lognormal law, one shared d-dim Brownian draw per sample."""
    _check_samples(samples)
    x = _point(x, problem.d)
    p = problem.params
    mu, beta, chol, T = p["mu"], p["beta"], p["chol"], problem.T
    correction = 0.5 * beta**2 * np.sum(chol**2, axis=1)

    def draw(n, gen):
        w = math.sqrt(T) * gen.standard_normal((n, problem.d))
        return problem.payoff(x * np.exp(beta * (w @ chol.T) + (mu - correction) * T))

    return _estimate(rngmod.sharded(draw, samples, rng, chunk))


def reference_estimate(problem: SdeProblem, x, samples: int, rng) -> ReferenceEstimate:
    """Best available reference: exact for heat, model representation where known, else scheme MC."""
    if problem.name == "heat":
        return ReferenceEstimate(float(heat_exact(problem.T, _point(x, problem.d))), 0.0, 0)
    if problem.name == "gbm":
        return gbm_representation_mc(x, problem, samples, rng)
    if problem.name == "blackscholes-corr":
        return bs_correlated_representation_mc(x, problem, samples, rng)
    return generic_feynman_kac_mc(problem, x, samples, rng)


# --- on-disk cache ---------------------------------------------------------

CACHE_FORMAT = "deepkolmogorov-reference-cache"
CACHE_VERSION = 1


def _problem_fingerprint(problem: SdeProblem) -> str:
    parts = [problem.name, str(problem.d), repr(problem.T), str(problem.N)]
    for key in sorted(problem.params):
        val = problem.params[key]
        parts.append(f"{key}={np.asarray(val).tobytes().hex() if isinstance(val, np.ndarray) else repr(val)}")
    return "|".join(parts)


def cache_key(problem: SdeProblem, x, samples: int, seed: int) -> str:
    h = hashlib.sha256()
    h.update(_problem_fingerprint(problem).encode())
    h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
    h.update(f"|{samples}|{seed}".encode())
    return h.hexdigest()


class ReferenceCache:
    """JSON key-value store: ``{"format", "version", "entries": {key: [value, stderr, samples]}}``.

    Writes go to a temporary file that is renamed over the original.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.entries: dict[str, list] = {}
        if self.path.exists():
            data = json.loads(self.path.read_text())
            if data.get("format") != CACHE_FORMAT or data.get("version") != CACHE_VERSION:
                raise ValueError(f"{self.path} is not a version-{CACHE_VERSION} reference cache")
            self.entries = data["entries"]

    def get(self, key: str) -> ReferenceEstimate | None:
        hit = self.entries.get(key)
        return None if hit is None else ReferenceEstimate(hit[0], hit[1], int(hit[2]))

    def put(self, key: str, est: ReferenceEstimate):
        self.entries[key] = [est.value, est.stderr, est.samples]

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        body = json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION, "entries": self.entries}, sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".refcache-")
        with os.fdopen(fd, "w") as fh:
            fh.write(body)
        os.replace(tmp, self.path)


def reference_values(problem: SdeProblem, points, samples: int, seed: int, cache: ReferenceCache | None = None):
    """Reference value and standard error at each row of ``points``.

    Each point's Monte Carlo stream is derived from ``seed`` and the point's
    bytes, so a cached value is reproducible independently of its neighbours.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if problem.name == "heat":
        return heat_exact(problem.T, points), np.zeros(points.shape[0])
    values = np.empty(points.shape[0])
    errs = np.empty(points.shape[0])
    dirty = False
    for i, x in enumerate(points):
        key = cache_key(problem, x, samples, seed)
        est = cache.get(key) if cache is not None else None
        if est is None:
            digest = int.from_bytes(hashlib.sha256(x.astype("<f8").tobytes()).digest()[:8], "little")
            est = reference_estimate(problem, x, samples, rngmod.substream(seed, rngmod.REFERENCE, digest))
            if cache is not None:
                cache.put(key, est)
                dirty = True
        values[i], errs[i] = est.value, est.stderr
    if dirty:
        cache.save()
    return values, errs
