"""The training loop, checkpoints and the run log."""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import network as nn
from . import rng as rngmod
from .optimizer import AdamState, Schedule, adam_step
from .sde_sim import SdeProblem, sample_initial, simulate_terminal

RUNLOG_COLUMNS = ("step", "loss", "runtime_seconds")


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, loss: float, runlog: "RunLog"):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
        self.runlog = runlog


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic bytes)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Header or payload fails its checksum or cannot be decoded."""


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 8192
    seed: int = 0
    precision: str = "float64"
    eval_every: int | None = None
    checkpoint_every: int | None = None
    widths: tuple[int, int] | None = None
    activation: str | None = None
    schedule: Schedule = field(default_factory=Schedule)
    # (first_step, batch_size) pairs overriding batch_size from first_step on
    batch_schedule: tuple[tuple[int, int], ...] = ()
    clock: str = "wall"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one training step")
        if self.batch_size < 2 or any(j < 2 for _, j in self.batch_schedule):
            raise ValueError("batch size must be at least 2")
        if self.clock not in ("wall", "none"):
            raise ValueError("clock must be 'wall' or 'none'")

    def batch_size_at(self, m: int) -> int:
        size = self.batch_size
        for start, j in sorted(self.batch_schedule):
            if m >= start:
                size = j
        return size


@dataclass
class RunRecord:
    step: int
    loss: float
    runtime_seconds: float


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)
    evaluations: list = field(default_factory=list)

    def append(self, step: int, loss: float, runtime: float):
        if self.records and step <= self.records[-1].step:
            raise ValueError("run log steps must increase")
        self.records.append(RunRecord(step, loss, runtime))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def write_csv(self, path_or_file, preamble=()):
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            for line in preamble:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step, f"{r.loss:.6g}", f"{r.runtime_seconds:.6g}"])
        finally:
            if own:
                fh.close()


@dataclass
class Checkpoint:
    problem: str
    step: int  # number of completed optimizer updates
    params: nn.ParameterSet
    stats: nn.BatchNormRunningStats
    adam: AdamState
    seed: int  # with ``step`` this is the RNG cursor: next draw uses substream (seed, TRAIN, step)
    elapsed: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def spec(self) -> nn.NetworkSpec:
        return self.params.spec


def loss(params: nn.ParameterSet, stats, xi, targets) -> float:
    """Mean squared residual of the train-mode network against ``targets``."""
    out, _, _ = nn.forward_train(params, stats, xi)
    r = out[:, 0] - np.asarray(targets).reshape(-1)
    return float(np.mean(r * r))


def initial_checkpoint(problem: SdeProblem, spec: nn.NetworkSpec, config: TrainConfig) -> Checkpoint:
    params, stats = nn.xavier_init(spec, rngmod.substream(config.seed, rngmod.INIT))
    adam = AdamState.zeros_like(params.theta, schedule=config.schedule)
    return Checkpoint(problem.name, 0, params, stats, adam, config.seed, 0.0, config_dict(config))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["schedule"] = {"breakpoints": list(config.schedule.breakpoints), "rates": list(config.schedule.rates)}
    # normalized through JSON so it compares equal after a checkpoint round trip
    return json.loads(json.dumps(d))


def train(problem: SdeProblem, spec: nn.NetworkSpec, config: TrainConfig, resume: Checkpoint | None = None,
          evaluate=None, on_checkpoint=None):
    """Run optimizer updates until ``config.steps`` have been applied in total.

    Per step ``m``: draw fresh initial points and increments from substream
    ``(seed, TRAIN, m)``, simulate terminal states, take a train-mode forward
    pass, fold the batch statistics into the running statistics, and apply
    one Adam update with the gradient of the empirical squared loss.

    ``evaluate(params, stats, step, runtime)`` is called at step 0 (fresh
    runs), every ``eval_every`` updates and after the last one; its results
    are kept in ``runlog.evaluations``. ``on_checkpoint(ckpt, runlog)`` fires every
    ``checkpoint_every`` updates.

    Returns ``(checkpoint, runlog)``; raises ``TrainingDiverged`` on a
    non-finite loss.
    """
    ckpt = resume if resume is not None else initial_checkpoint(problem, spec, config)
    if ckpt.params.spec != spec:
        raise ValueError("checkpoint network does not match the requested spec")
    params, stats, adam = ckpt.params.copy(), ckpt.stats.copy(), ckpt.adam.copy()
    dtype = spec.dtype
    runlog = RunLog()
    clock = time.perf_counter if config.clock == "wall" else (lambda: 0.0)
    start = clock() - ckpt.elapsed
    elapsed = ckpt.elapsed

    def snapshot(m):
        return Checkpoint(problem.name, m, params.copy(), stats.copy(), adam.copy(), config.seed, elapsed,
                          config_dict(config))

    if evaluate is not None and ckpt.step == 0:
        runlog.evaluations.append(evaluate(params, stats, 0, 0.0))

    for m in range(ckpt.step, config.steps):
        gen = rngmod.substream(config.seed, rngmod.TRAIN, m)
        xi = sample_initial(problem.domain, config.batch_size_at(m), gen, dtype)
        terminal = simulate_terminal(problem, xi, gen).terminal
        targets = problem.payoff(terminal).astype(dtype, copy=False)

        out, tape, site_stats = nn.forward_train(params, stats, xi)
        resid = out[:, 0] - targets
        value = float(np.mean(resid * resid, dtype=np.float64))
        elapsed = clock() - start
        if not math.isfinite(value):
            raise TrainingDiverged(m, value, runlog)
        runlog.append(m, value, elapsed)

        stats = stats.updated(site_stats, spec.bn_momentum)
        grad = nn.backward(tape, params, resid)
        adam, theta = adam_step(adam, params.theta, grad)
        params = nn.ParameterSet(spec, theta)

        done = m + 1
        elapsed = clock() - start
        if evaluate is not None and (done == config.steps or (config.eval_every and done % config.eval_every == 0)):
            runlog.evaluations.append(evaluate(params, stats, done, elapsed))
        if on_checkpoint is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            on_checkpoint(snapshot(done), runlog)

    return snapshot(config.steps), runlog


# --- checkpoint files ------------------------------------------------------
#
# layout (all integers little-endian):
#   8 bytes   magic b"DKCKPT\x00\x01"
#   u32       format version
#   u32       header length H
#   H bytes   UTF-8 JSON header
#   u32       CRC32 of the header
#   u64       payload length P
#   P bytes   payload: u64 network blob length, network blob, Adam first moment, Adam second moment
#   u32       CRC32 of the payload

CKPT_MAGIC = b"DKCKPT\x00\x01"
CKPT_VERSION = 1


def _encode(ckpt: Checkpoint) -> bytes:
    spec = ckpt.params.spec
    le = spec.dtype.newbyteorder("<")
    blob = nn.dumps(ckpt.params, ckpt.stats)
    payload = b"".join([
        struct.pack("<Q", len(blob)),
        blob,
        ckpt.adam.first.astype(le).tobytes(),
        ckpt.adam.second.astype(le).tobytes(),
    ])
    header = json.dumps({
        "package_version": __version__,
        "problem": ckpt.problem,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "elapsed": ckpt.elapsed,
        "adam": {
            "step": ckpt.adam.step,
            "eps": ckpt.adam.eps,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "breakpoints": list(ckpt.adam.schedule.breakpoints),
            "rates": list(ckpt.adam.schedule.rates),
        },
        "config": ckpt.config,
    }, sort_keys=True).encode()
    return b"".join([
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(header)),
        header,
        struct.pack("<I", zlib.crc32(header)),
        struct.pack("<Q", len(payload)),
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def _decode(data: bytes) -> Checkpoint:
    if len(data) < len(CKPT_MAGIC):
        raise CheckpointTruncatedError("file shorter than the magic bytes")
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    pos = len(CKPT_MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointTruncatedError(f"file ends inside the {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, hlen = struct.unpack("<II", take(8, "preamble"))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    header = take(hlen, "header")
    (hcrc,) = struct.unpack("<I", take(4, "header checksum"))
    if zlib.crc32(header) != hcrc:
        raise CheckpointCorruptError("header checksum mismatch")
    (plen,) = struct.unpack("<Q", take(8, "payload length"))
    payload = take(plen, "payload")
    (pcrc,) = struct.unpack("<I", take(4, "payload checksum"))
    if zlib.crc32(payload) != pcrc:
        raise CheckpointCorruptError("payload checksum mismatch")
    if pos != len(data):
        raise CheckpointCorruptError("trailing bytes after the payload")
    try:
        meta = json.loads(header)
        (blen,) = struct.unpack_from("<Q", payload)
        params, stats = nn.loads(payload[8 : 8 + blen])
    except (ValueError, struct.error) as exc:
        raise CheckpointCorruptError(f"cannot decode checkpoint: {exc}") from exc
    le = params.spec.dtype.newbyteorder("<")
    n = params.spec.size
    rest = payload[8 + blen :]
    if len(rest) != 2 * n * le.itemsize:
        raise CheckpointCorruptError("optimizer state has the wrong size")
    first = np.frombuffer(rest, dtype=le, count=n).astype(params.spec.dtype)
    second = np.frombuffer(rest, dtype=le, count=n, offset=n * le.itemsize).astype(params.spec.dtype)
    a = meta["adam"]
    adam = AdamState(first, second, a["step"], a["eps"], a["beta1"], a["beta2"],
                     Schedule(tuple(a["breakpoints"]), tuple(a["rates"])))
    return Checkpoint(meta["problem"], meta["step"], params, stats, adam, meta["seed"], meta["elapsed"], meta["config"])


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return _decode(Path(path).read_bytes())


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bit-exact comparison of two checkpoints."""
    return (
        a.problem == b.problem
        and a.step == b.step
        and a.seed == b.seed
        and a.elapsed == b.elapsed
        and a.config == b.config
        and a.params.spec == b.params.spec
        and a.params.theta.tobytes() == b.params.theta.tobytes()
        and a.stats.count == b.stats.count
        and all(x.tobytes() == y.tobytes() for x, y in zip(a.stats.means, b.stats.means))
        and all(x.tobytes() == y.tobytes() for x, y in zip(a.stats.variances, b.stats.variances))
        and a.adam.first.tobytes() == b.adam.first.tobytes()
        and a.adam.second.tobytes() == b.adam.second.tobytes()
        and (a.adam.step, a.adam.eps, a.adam.beta1, a.adam.beta2, a.adam.schedule)
        == (b.adam.step, b.adam.eps, b.adam.beta1, b.adam.beta2, b.adam.schedule)
    )
