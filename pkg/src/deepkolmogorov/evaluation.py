"""Relative error metrics, run aggregation and the strong-convergence study."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .network import forward_infer
from .reference import reference_values
from .sde_sim import Domain, SdeProblem, euler_maruyama_step, sample_initial

ERROR_COLUMNS = ("step", "rel_l1", "rel_l2", "rel_linf", "runtime_seconds")


class DivisionHazard(ArithmeticError):
    """A reference value is too close to zero for a relative error."""


class UnsupportedProblem(ValueError):
    pass


@dataclass(frozen=True)
class ErrorTriple:
    l1: float
    l2: float
    linf: float


@dataclass(frozen=True)
class ErrorReport:
    step: int
    l1: float
    l2: float
    linf: float
    spatial_samples: int
    reference_samples: int
    runtime_seconds: float
    reference_stderr: float = 0.0  # largest relative reference standard error over the points

    def row(self):
        return (self.step, self.l1, self.l2, self.linf, self.runtime_seconds)


def relative_errors_from_values(approx, reference, floor: float = 1e-12) -> ErrorTriple:
    approx = np.asarray(approx, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if approx.shape != reference.shape:
        raise ValueError("approximation and reference differ in length")
    bad = np.abs(reference) < floor
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DivisionHazard(f"reference value {reference[i]:.3e} at sample {i} is below the floor {floor:.1e}")
    rel = np.abs((approx - reference) / reference)
    return ErrorTriple(float(np.mean(rel)), float(np.sqrt(np.mean(rel * rel))), float(np.max(rel)))


def relative_errors(approx, reference, domain: Domain, K: int, rng, floor: float = 1e-12) -> ErrorTriple:
    """Relative L1, L2 and sup errors over ``K`` uniform points of ``domain``.

    ``approx`` and ``reference`` map a ``(K, d)`` batch to ``K`` values; the
    reference may also return ``(values, stderrs)``.
    """
    if K < 1:
        raise ValueError("need K >= 1")
    points = sample_initial(domain, K, rng)
    ref = reference(points)
    if isinstance(ref, tuple):
        ref = ref[0]
    return relative_errors_from_values(approx(points), ref, floor)


def sup_estimate(f, domain: Domain, K: int, rng) -> float:
    """Maximum of ``f`` over ``K`` i.i.d. uniform points, a consistent estimate of the supremum."""
    return float(np.max(f(sample_initial(domain, K, rng))))


@dataclass(frozen=True)
class AggregateReport:
    l1_l1: float
    l2_l2: float
    l2_linf: float
    runs: int


def aggregate_over_runs(triples) -> AggregateReport:
    """Mean of L1; root-mean-square of L2 and of L-infinity over independent runs."""
    arr = np.array([(t.l1, t.l2, t.linf) for t in triples], dtype=np.float64)
    if arr.shape[0] < 1:
        raise ValueError("need at least one run")
    return AggregateReport(
        float(np.mean(arr[:, 0])),
        float(np.sqrt(np.mean(arr[:, 1] ** 2))),
        float(np.sqrt(np.mean(arr[:, 2] ** 2))),
        arr.shape[0],
    )


def mean_square_decomposition(sample, y: float):
    """Return ``(mean |X - y|^2, variance, (mean - y)^2)``; the first equals the sum of the others."""
    sample = np.asarray(sample, dtype=np.float64)
    mean = np.mean(sample)
    return float(np.mean((sample - y) ** 2)), float(np.mean((sample - mean) ** 2)), float((mean - y) ** 2)


@dataclass(frozen=True)
class ConvergenceResult:
    levels: tuple[int, ...]
    step_sizes: np.ndarray
    errors: np.ndarray
    slope: float


def strong_convergence(problem: SdeProblem, levels, paths: int, rng, scheme: str = "euler") -> ConvergenceResult:
    """Strong L2 error at ``T`` of Euler-Maruyama on ``T / 2**k`` steps against the exact endpoint.

    Both sides are driven by the same Brownian path, sampled on the finest
    level and summed up for coarser ones. ``scheme="exact"`` replaces Euler by
    the exact one-step map (a self-coupling check).
    """
    levels = tuple(int(k) for k in levels)
    if len(levels) < 2:
        raise ValueError("need at least two levels to fit a slope")
    if not problem.exact or problem.drift is None or problem.diffusion is None:
        raise UnsupportedProblem(f"problem {problem.name!r} has no exact one-step map to couple against")
    T, d = problem.T, problem.d
    finest = 2 ** max(levels)
    xi = sample_initial(problem.domain, paths, rng)
    dw = math.sqrt(T / finest) * rng.standard_normal((finest, paths, d))
    exact = problem.step_map(0.0, T, xi, dw.sum(axis=0))
    errors = []
    for k in levels:
        n = 2**k
        h = T / n
        coarse = dw.reshape(n, finest // n, paths, d).sum(axis=1)
        x = xi
        for i in range(n):
            if scheme == "euler":
                x = euler_maruyama_step(problem.drift, problem.diffusion, x, h, coarse[i])
            else:
                x = problem.step_map(i * h, (i + 1) * h, x, coarse[i])
        errors.append(math.sqrt(np.mean(np.sum((x - exact) ** 2, axis=-1))))
    step_sizes = T / 2.0 ** np.array(levels)
    errors = np.array(errors)
    with np.errstate(divide="ignore"):
        slope = float(np.polyfit(np.log2(step_sizes), np.log2(errors), 1)[0]) if np.all(errors > 0) else float("nan")
    return ConvergenceResult(levels, step_sizes, errors, slope)


class Evaluator:
    """Fixed evaluation points with precomputed references, reused at every checkpoint.

    Runs the network in inference mode; never touches running statistics.
    """

    def __init__(self, points, reference, reference_stderr=None, reference_samples: int = 0, floor: float = 1e-12):
        self.points = np.asarray(points)
        self.reference = np.asarray(reference, dtype=np.float64)
        self.reference_stderr = np.zeros_like(self.reference) if reference_stderr is None else np.asarray(reference_stderr)
        self.reference_samples = reference_samples
        self.floor = floor

    def __call__(self, params, stats, step: int, runtime: float = 0.0) -> ErrorReport:
        approx = np.concatenate([
            forward_infer(params, stats, chunk) for chunk in np.array_split(self.points, max(1, len(self.points) // 65536))
        ])
        e = relative_errors_from_values(approx, self.reference, self.floor)
        budget = float(np.max(self.reference_stderr / np.abs(self.reference))) if self.reference.size else 0.0
        return ErrorReport(step, e.l1, e.l2, e.linf, len(self.points), self.reference_samples, runtime, budget)


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def write_error_csv(path_or_file, reports, preamble=()):
    """CSV with columns step,rel_l1,rel_l2,rel_linf,runtime_seconds at 6 significant digits."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        for line in preamble:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ERROR_COLUMNS)
        for r in reports:
            w.writerow([fmt(v) for v in r.row()])
    finally:
        if own:
            fh.close()


class ProblemEvaluator:
    """Streams ``K`` evaluation points in seeded chunks; reference values are computed once.

    Chunk ``i`` is regenerated from substream ``(seed, EVAL, i)`` on every call,
    so only the reference values are held in memory.
    """

    def __init__(self, problem: SdeProblem, domain: Domain, K: int, seed: int, reference_samples: int,
                 cache=None, floor: float = 1e-12, chunk: int = 65536):
        if K < 1:
            raise ValueError("need K >= 1")
        self.problem = problem
        self.domain = domain
        self.K = K
        self.seed = seed
        self.reference_samples = 0 if problem.name == "heat" else reference_samples
        self.cache = cache
        self.floor = floor
        self.sizes = [chunk] * (K // chunk) + ([K % chunk] if K % chunk else [])
        self._refs: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def points(self, i: int, dtype=np.float64) -> np.ndarray:
        return sample_initial(self.domain, self.sizes[i], rngmod.substream(self.seed, rngmod.EVAL, i), dtype)

    def reference(self, i: int):
        if i not in self._refs:
            self._refs[i] = reference_values(self.problem, self.points(i), self.reference_samples, self.seed, self.cache)
        return self._refs[i]

    def __call__(self, params, stats, step: int, runtime: float = 0.0) -> ErrorReport:
        total = total_sq = 0.0
        worst = 0.0
        budget = 0.0
        for i in range(len(self.sizes)):
            ref, err = self.reference(i)
            bad = np.abs(ref) < self.floor
            if np.any(bad):
                raise DivisionHazard(f"reference value {ref[np.argmax(bad)]:.3e} is below the floor {self.floor:.1e}")
            approx = forward_infer(params, stats, self.points(i, params.spec.dtype)).astype(np.float64)
            rel = np.abs((approx - ref) / ref)
            total += float(np.sum(rel))
            total_sq += float(np.sum(rel * rel))
            worst = max(worst, float(np.max(rel)))
            budget = max(budget, float(np.max(err / np.abs(ref))))
        return ErrorReport(step, total / self.K, math.sqrt(total_sq / self.K), worst, self.K,
                           self.reference_samples, runtime, budget)
