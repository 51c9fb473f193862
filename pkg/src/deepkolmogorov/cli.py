"""Command-line entry point: ``deepkolmogorov {train,eval,reference,convergence,list-problems}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .config import ConfigError, RunConfig, parse_config
from .evaluation import (
    ProblemEvaluator,
    UnsupportedProblem,
    aggregate_over_runs,
    fmt,
    strong_convergence,
    write_error_csv,
)
from .network import NetworkSpec
from .optimizer import Schedule
from .problems import PROBLEM_NAMES, default_dimension, default_widths, make_problem
from .reference import ReferenceCache, reference_estimate
from .sde_sim import Domain
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_UNSUPPORTED = 4
EXIT_LOCKED = 5

CONFIG_NAME = "config.resolved.ini"
RUNLOG_NAME = "runlog.csv"
ERRORS_NAME = "errors.csv"
CHECKPOINT_NAME = "checkpoint.bin"
REASON_NAME = "reason.json"
CACHE_NAME = "reference-cache.json"


class LockHeld(RuntimeError):
    pass


@contextmanager
def output_lock(directory: Path):
    """Exclusive ownership of an output directory for one invocation."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{directory} is in use (remove {lock} if no other run is active)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# --- building blocks from a config -----------------------------------------


def build_problem(cfg: RunConfig):
    return make_problem(cfg.problem, d=cfg["problem.dim"], N=cfg["problem.time_steps"], T=cfg["problem.horizon"])


def build_spec(cfg: RunConfig) -> NetworkSpec:
    return NetworkSpec(
        cfg["problem.dim"],
        cfg["network.widths"],
        cfg["network.activation"],
        cfg["network.bn_epsilon"],
        cfg["network.bn_momentum"],
        cfg["train.precision"],
    )


def build_train_config(cfg: RunConfig, seed_offset: int = 0) -> TrainConfig:
    rate = cfg["train.learning_rate"]
    return TrainConfig(
        steps=cfg["train.steps"],
        batch_size=cfg["train.batch"],
        seed=cfg["train.seed"] + seed_offset,
        precision=cfg["train.precision"],
        eval_every=cfg["train.eval_every"],
        checkpoint_every=cfg["train.checkpoint_every"],
        widths=cfg["network.widths"],
        activation=cfg["network.activation"],
        schedule=Schedule() if rate is None else Schedule.constant(rate),
        clock=cfg["train.clock"],
    )


def build_evaluator(cfg: RunConfig, problem, cache_dir: Path | None):
    domain = problem.domain if cfg["eval.domain"] == "train" else Domain.cube(0.0, 1.0, problem.d)
    cache = ReferenceCache(cache_dir / CACHE_NAME) if cache_dir is not None and cfg["eval.cache"] else None
    return ProblemEvaluator(problem, domain, cfg["eval.points"], cfg["eval.seed"], cfg["eval.reference_samples"],
                            cache, cfg["eval.floor"])


def preamble(cfg: RunConfig):
    return (f"deepkolmogorov {__version__}", f"config sha256 {cfg.digest()}")


def _read_rows(path: Path, keep) -> list[str]:
    """Data rows of an existing CSV whose first column passes ``keep``."""
    if not path.exists():
        return []
    rows = []
    for line in path.read_text().splitlines()[1:]:
        if line.startswith("#") or not line or not line[0].isdigit():
            continue
        if keep(int(line.split(",", 1)[0])):
            rows.append(line)
    return rows


def _write_with_prefix(path: Path, writer, prefix_rows):
    buf = io.StringIO()
    writer(buf)
    lines = buf.getvalue().splitlines(keepends=True)
    head = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if not ln.startswith("#")]
    text = "".join(head + body[:1] + [r + "\n" for r in prefix_rows] + body[1:])
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _train_one(cfg: RunConfig, out: Path, seed_offset: int, resume: bool, stream=None):
    problem = build_problem(cfg)
    spec = build_spec(cfg)
    tcfg = build_train_config(cfg, seed_offset)
    evaluator = build_evaluator(cfg, problem, out) if cfg["train.eval_every"] else None

    start_ckpt = None
    kept_log: list[str] = []
    kept_err: list[str] = []
    if resume:
        start_ckpt = load_checkpoint(out / CHECKPOINT_NAME)
        kept_log = _read_rows(out / RUNLOG_NAME, lambda s: s < start_ckpt.step)
        kept_err = _read_rows(out / ERRORS_NAME, lambda s: s <= start_ckpt.step)
    pre = preamble(cfg)

    def dump(ckpt, runlog):
        save_checkpoint(out / CHECKPOINT_NAME, ckpt)
        _write_with_prefix(out / RUNLOG_NAME, lambda fh: runlog.write_csv(fh, pre), kept_log)
        if evaluator is not None:
            _write_with_prefix(out / ERRORS_NAME, lambda fh: write_error_csv(fh, runlog.evaluations, pre), kept_err)

    try:
        ckpt, runlog = train(problem, spec, tcfg, resume=start_ckpt, evaluate=evaluator, on_checkpoint=dump)
    except TrainingDiverged as exc:
        _write_with_prefix(out / RUNLOG_NAME, lambda fh: exc.runlog.write_csv(fh, pre), kept_log)
        (out / REASON_NAME).write_text(json.dumps({"reason": "divergence", "step": exc.step, "loss": repr(exc.loss)}) + "\n")
        print(f"training diverged: {exc}", file=stream or sys.stderr)
        return None
    dump(ckpt, runlog)
    return runlog.evaluations


def run_train(cfg: RunConfig, resume: bool = False, stream=None) -> int:
    out = Path(cfg["output.dir"])
    with output_lock(out):
        (out / CONFIG_NAME).write_text(f"# deepkolmogorov {__version__}\n" + cfg.render())
        runs = cfg["train.runs"]
        all_reports = []
        for r in range(runs):
            run_dir = out if runs == 1 else out / f"run-{r}"
            run_dir.mkdir(parents=True, exist_ok=True)
            reports = _train_one(cfg, run_dir, r, resume, stream)
            if reports is None:
                if run_dir != out:
                    (out / REASON_NAME).write_text((run_dir / REASON_NAME).read_text())
                return EXIT_DIVERGED
            all_reports.append(reports)
        if runs > 1 and all_reports[0]:
            write_aggregate(out / "aggregate.csv", all_reports, preamble(cfg))
    return EXIT_OK


def write_aggregate(path: Path, per_run_reports, pre=()):
    """Per-step L1(P;L1), L2(P;L2), L2(P;Linf) over runs; steps common to all runs only."""
    by_step = [{r.step: r for r in reports} for reports in per_run_reports]
    steps = sorted(set.intersection(*(set(b) for b in by_step)))
    with open(path, "w", newline="") as fh:
        for line in pre:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "l1_l1", "l2_l2", "l2_linf", "runs"))
        for s in steps:
            agg = aggregate_over_runs([b[s] for b in by_step])
            w.writerow((s, fmt(agg.l1_l1), fmt(agg.l2_l2), fmt(agg.l2_linf), agg.runs))


def run_eval(cfg: RunConfig, checkpoint: Path, out=None) -> int:
    out = out or sys.stdout
    ckpt = load_checkpoint(checkpoint)
    problem = build_problem(cfg)
    if ckpt.problem != problem.name or ckpt.spec.d != problem.d:
        raise ConfigError(f"checkpoint is for {ckpt.problem} with d={ckpt.spec.d}, config asks for "
                          f"{problem.name} with d={problem.d}")
    evaluator = build_evaluator(cfg, problem, checkpoint.parent)
    report = evaluator(ckpt.params, ckpt.stats, ckpt.step, ckpt.elapsed)
    write_error_csv(out, [report], preamble(cfg))
    return EXIT_OK


def run_reference(cfg: RunConfig, points, samples: int, seed: int, out=None) -> int:
    out = out or sys.stdout
    problem = build_problem(cfg)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("point", "value", "stderr", "samples"))
    for i, p in enumerate(points):
        est = reference_estimate(problem, p, samples, rngmod.substream(seed, rngmod.REFERENCE, i))
        w.writerow((" ".join(fmt(float(v)) for v in p), fmt(est.value), fmt(est.stderr), est.samples))
    return EXIT_OK


def run_convergence(cfg: RunConfig, seed: int = 0, out=None):
    """Per-level strong errors and the fitted slope, as two CSV tables."""
    out = out or sys.stdout
    problem = build_problem(cfg)
    levels = cfg["convergence.levels"]
    if len(levels) < 2:
        raise ConfigError("convergence needs at least two levels")
    result = strong_convergence(problem, levels, cfg["convergence.paths"], rngmod.substream(seed, rngmod.CONVERGENCE))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("level", "step_size", "strong_error"))
    for k, h, e in zip(result.levels, result.step_sizes, result.errors):
        w.writerow((k, fmt(h), fmt(e)))
    out.write("\n")
    w.writerow(("slope", "levels", "paths"))
    w.writerow((fmt(result.slope), len(levels), cfg["convergence.paths"]))
    return result


def run_list_problems(out=None) -> int:
    out = out or sys.stdout
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("name", "dim", "time_steps", "horizon", "widths", "domain"))
    for name in PROBLEM_NAMES:
        p = make_problem(name)
        box = " x ".join(f"[{fmt(a)},{fmt(b)}]" for a, b in zip(p.domain.lower[:2], p.domain.upper[:2]))
        if p.d > 2:
            box += " x ..."
        w.writerow((name, p.d, p.N, fmt(p.T), "x".join(map(str, default_widths(name, p.d))), box))
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

FLAG_KEYS = {
    "problem": "problem.name",
    "dim": "problem.dim",
    "time_steps": "problem.time_steps",
    "widths": "network.widths",
    "activation": "network.activation",
    "steps": "train.steps",
    "batch": "train.batch",
    "seed": "train.seed",
    "runs": "train.runs",
    "precision": "train.precision",
    "learning_rate": "train.learning_rate",
    "eval_every": "train.eval_every",
    "figure_cadence": "train.eval_every",
    "checkpoint_every": "train.checkpoint_every",
    "clock": "train.clock",
    "eval_points": "eval.points",
    "reference_samples": "eval.reference_samples",
    "eval_seed": "eval.seed",
    "eval_domain": "eval.domain",
    "levels": "convergence.levels",
    "paths": "convergence.paths",
    "out": "output.dir",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="config file ([section] / key = value)")
    p.add_argument("--problem", choices=PROBLEM_NAMES)
    p.add_argument("--dim")
    p.add_argument("--time-steps")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key")


def _eval_flags(p):
    p.add_argument("--eval-points")
    p.add_argument("--reference-samples")
    p.add_argument("--eval-seed")
    p.add_argument("--eval-domain", choices=("train", "unit"))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepkolmogorov", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write run log, error table and checkpoints")
    _common(t)
    _eval_flags(t)
    for flag in ("--widths", "--steps", "--batch", "--seed", "--runs", "--learning-rate", "--eval-every",
                 "--checkpoint-every"):
        t.add_argument(flag)
    t.add_argument("--figure-cadence", help="evaluate every C steps (plot data for error curves)")
    t.add_argument("--activation", choices=("tanh", "logistic", "identity"))
    t.add_argument("--precision", choices=("float64", "float32"))
    t.add_argument("--clock", choices=("wall", "none"), help="'none' writes 0 runtimes for byte-stable logs")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.bin")

    e = sub.add_parser("eval", help="relative errors of a saved checkpoint")
    _common(e)
    _eval_flags(e)
    e.add_argument("--checkpoint", type=Path)

    r = sub.add_parser("reference", help="Monte Carlo / analytic reference values as CSV")
    _common(r)
    r.add_argument("--point", action="append", required=True, help="comma-separated coordinates (repeatable)")
    r.add_argument("--samples", type=int, default=1_048_576)
    r.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("convergence", help="empirical strong order of Euler-Maruyama")
    _common(c)
    c.add_argument("--levels", help="e.g. 2-7 or 2,3,4")
    c.add_argument("--paths")
    c.add_argument("--seed", type=int, default=0)

    sub.add_parser("list-problems", help="list the built-in problems")
    return parser


def resolve_config(args) -> RunConfig:
    text, source = "", "<config>"
    if getattr(args, "config", None) is not None:
        text, source = args.config.read_text(), str(args.config)
    overrides = {}
    for name, key in FLAG_KEYS.items():
        value = getattr(args, name, None)
        if value is not None and not (args.command in ("reference", "convergence") and name == "seed"):
            overrides[key] = str(value)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}", None, "<flags>")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return parse_config(text, overrides, source)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list-problems":
            return run_list_problems()
        cfg = resolve_config(args)
        if args.command == "train":
            return run_train(cfg, resume=args.resume)
        if args.command == "eval":
            return run_eval(cfg, args.checkpoint or Path(cfg["output.dir"]) / CHECKPOINT_NAME)
        if args.command == "reference":
            points = [np.array([float(v) for v in p.split(",")]) for p in args.point]
            return run_reference(cfg, points, args.samples, args.seed)
        if args.command == "convergence":
            if args.out:
                out = Path(args.out)
                with output_lock(out):
                    (out / CONFIG_NAME).write_text(f"# deepkolmogorov {__version__}\n" + cfg.render())
                    with open(out / "convergence.csv", "w", newline="") as fh:
                        run_convergence(cfg, args.seed, fh)
            else:
                run_convergence(cfg, args.seed)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedProblem as exc:
        print(f"unsupported problem: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except LockHeld as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_LOCKED
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
