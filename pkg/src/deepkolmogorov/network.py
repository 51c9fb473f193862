"""Two-hidden-layer network with batch normalization and hand-written backprop.

Composition (train mode uses batch statistics at every BN site)::

    x -> BN0 -> W1 -> BN1 -> act -> W2 -> BN2 -> act -> W3 -> BN3 -> output

Linear layers have no bias; shifts come from the BN sites. All trainable
numbers live in one flat vector ``theta`` laid out as

    W1 (d x w1, row-major), W2 (w1 x w2), W3 (w2 x 1),
    then per site 0..3: scale, shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ACTIVATIONS = ("tanh", "logistic", "identity")
PRECISIONS = ("float64", "float32")

_MAGIC = b"DKNT"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIIBBddQ")


class SerializationError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    d: int
    widths: tuple[int, int]
    activation: str = "tanh"
    bn_epsilon: float = 1e-6
    bn_momentum: float = 0.99
    precision: str = "float64"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if self.d < 1 or len(widths) != 2 or min(widths) < 1:
            raise ValueError(f"need d >= 1 and two hidden widths >= 1, got d={self.d}, widths={widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")
        if not self.bn_epsilon > 0:
            raise ValueError("bn_epsilon must be positive")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def site_widths(self) -> tuple[int, ...]:
        return (self.d, self.widths[0], self.widths[1], 1)

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        d, (w1, w2) = self.d, self.widths
        return ((d, w1), (w1, w2), (w2, 1))

    @property
    def weight_count(self) -> int:
        return sum(a * b for a, b in self.layer_shapes)

    @property
    def size(self) -> int:
        return self.weight_count + 2 * sum(self.site_widths)

    def slices(self):
        """Offsets of every block inside ``theta``."""
        return _layout(self.d, self.widths)


@lru_cache(maxsize=64)
def _layout(d: int, widths: tuple[int, int]):
    out = {"W": [], "scale": [], "shift": []}
    pos = 0
    for a, b in ((d, widths[0]), (widths[0], widths[1]), (widths[1], 1)):
        out["W"].append((slice(pos, pos + a * b), (a, b)))
        pos += a * b
    for w in (d, widths[0], widths[1], 1):
        out["scale"].append(slice(pos, pos + w))
        pos += w
        out["shift"].append(slice(pos, pos + w))
        pos += w
    return out


@dataclass
class ParameterSet:
    spec: NetworkSpec
    theta: np.ndarray

    def __post_init__(self):
        if self.theta.shape != (self.spec.size,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({self.spec.size},)")

    def weight(self, i: int) -> np.ndarray:
        sl, shape = self.spec.slices()["W"][i]
        return self.theta[sl].reshape(shape)

    def scale(self, i: int) -> np.ndarray:
        return self.theta[self.spec.slices()["scale"][i]]

    def shift(self, i: int) -> np.ndarray:
        return self.theta[self.spec.slices()["shift"][i]]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.spec, self.theta.copy())


@dataclass
class BatchNormRunningStats:
    means: list[np.ndarray]
    variances: list[np.ndarray]
    count: int = 0

    @classmethod
    def fresh(cls, spec: NetworkSpec) -> "BatchNormRunningStats":
        dt = spec.dtype
        return cls([np.zeros(w, dt) for w in spec.site_widths], [np.ones(w, dt) for w in spec.site_widths], 0)

    def copy(self) -> "BatchNormRunningStats":
        return BatchNormRunningStats([m.copy() for m in self.means], [v.copy() for v in self.variances], self.count)

    def updated(self, site_stats, momentum: float) -> "BatchNormRunningStats":
        """Exponential moving average toward the batch statistics of one step."""
        means = [momentum * m + (1.0 - momentum) * bm for m, (bm, _) in zip(self.means, site_stats)]
        variances = [momentum * v + (1.0 - momentum) * bv for v, (_, bv) in zip(self.variances, site_stats)]
        return BatchNormRunningStats(means, variances, self.count + 1)


@dataclass
class ForwardTape:
    spec: NetworkSpec
    batch_size: int
    normalized: list[np.ndarray] = field(default_factory=list)  # xhat per site
    inv_std: list[np.ndarray] = field(default_factory=list)
    layer_inputs: list[np.ndarray] = field(default_factory=list)  # inputs of W1, W2, W3
    hidden: list[np.ndarray] = field(default_factory=list)  # activation outputs
    frozen: bool = False  # normalized with running statistics, treated as constants


def xavier_init(spec: NetworkSpec, rng: np.random.Generator):
    """Glorot-uniform weights, unit BN scales, zero shifts, fresh running stats."""
    theta = np.zeros(spec.size, dtype=np.float64)
    sl = spec.slices()
    for (s, (fan_in, fan_out)) in sl["W"]:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        theta[s] = rng.uniform(-bound, bound, fan_in * fan_out)
    for s in sl["scale"]:
        theta[s] = 1.0
    return ParameterSet(spec, theta.astype(spec.dtype)), BatchNormRunningStats.fresh(spec)


def logistic_map(x):
    x = np.asarray(x)
    # exp(x) / (exp(x) + 1) written to avoid overflow on either side
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _activate(kind: str, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "logistic":
        return logistic_map(z).astype(z.dtype, copy=False)
    return z


def _activation_grad(kind: str, h):
    # derivative expressed through the activation output h
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "logistic":
        return h * (1.0 - h)
    return np.ones_like(h)


def _check_batch(spec: NetworkSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=spec.dtype)
    if x.ndim != 2 or x.shape[1] != spec.d:
        raise ValueError(f"batch must have shape (J, {spec.d}), got {x.shape}")
    return x


def forward_train(params: ParameterSet, stats: BatchNormRunningStats | None, batch, frozen: bool = False):
    """Train-mode forward pass.

    Returns ``(outputs, tape, site_stats)`` where ``outputs`` has shape
    ``(J, 1)`` and ``site_stats`` lists the batch ``(mean, variance)`` of each
    BN site, to be folded into the running statistics by the caller.

    With ``frozen=True`` every site normalizes with the running statistics in
    ``stats`` instead, and ``backward`` treats them as constants.
    """
    spec = params.spec
    x = _check_batch(spec, batch)
    J = x.shape[0]
    if J < 2:
        raise ValueError("train-mode forward needs at least 2 rows for batch statistics")
    eps = spec.bn_epsilon
    if frozen and stats is None:
        raise ValueError("frozen normalization needs running statistics")
    tape = ForwardTape(spec, J, frozen=frozen)
    site_stats = []

    def bn(z, i):
        mean = z.mean(axis=0)
        centered = z - mean
        var = np.mean(centered * centered, axis=0)
        if frozen:
            inv = 1.0 / np.sqrt(stats.variances[i] + eps)
            xhat = (z - stats.means[i]) * inv
        else:
            inv = 1.0 / np.sqrt(var + eps)
            xhat = centered * inv
        tape.normalized.append(xhat)
        tape.inv_std.append(inv)
        site_stats.append((mean, var))
        return xhat * params.scale(i) + params.shift(i)

    h = bn(x, 0)
    for layer in range(2):
        tape.layer_inputs.append(h)
        h = _activate(spec.activation, bn(h @ params.weight(layer), layer + 1))
        tape.hidden.append(h)
    tape.layer_inputs.append(h)
    out = bn(h @ params.weight(2), 3)
    return out, tape, site_stats


def forward_infer(params: ParameterSet, stats: BatchNormRunningStats, x):
    """Inference-mode forward pass using the running statistics.

    A single point (1-D input) yields a scalar; a batch yields shape ``(J,)``.
    """
    spec = params.spec
    single = np.ndim(x) == 1
    x = _check_batch(spec, np.atleast_2d(x))
    eps = spec.bn_epsilon

    def bn(z, i):
        return (z - stats.means[i]) / np.sqrt(stats.variances[i] + eps) * params.scale(i) + params.shift(i)

    h = bn(x, 0)
    for layer in range(2):
        h = _activate(spec.activation, bn(h @ params.weight(layer), layer + 1))
    out = bn(h @ params.weight(2), 3)[:, 0]
    return out[0] if single else out


def _bn_backward(g, xhat, inv, scale, frozen=False):
    # full gradient through the batch mean and variance unless the statistics are frozen
    J = g.shape[0]
    dgamma = np.sum(g * xhat, axis=0)
    dbeta = np.sum(g, axis=0)
    gx = g * scale
    if frozen:
        return gx * inv, dgamma, dbeta
    dx = (inv / J) * (J * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))
    return dx, dgamma, dbeta


def backward_outputs(tape: ForwardTape, params: ParameterSet, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * outputs)`` with respect to ``theta``."""
    spec = params.spec
    if tape.spec != spec or len(tape.normalized) != 4:
        raise ValueError("tape does not belong to this network")
    g = np.asarray(upstream, dtype=spec.dtype).reshape(tape.batch_size, 1)
    grad = np.zeros(spec.size, dtype=spec.dtype)
    sl = spec.slices()

    def site(g, i):
        dx, dgamma, dbeta = _bn_backward(g, tape.normalized[i], tape.inv_std[i], params.scale(i), tape.frozen)
        grad[sl["scale"][i]] = dgamma
        grad[sl["shift"][i]] = dbeta
        return dx

    g = site(g, 3)
    for layer in (2, 1, 0):
        W = params.weight(layer)
        grad[sl["W"][layer][0]] = (tape.layer_inputs[layer].T @ g).reshape(-1)
        g = g @ W.T
        if layer > 0:
            g = g * _activation_grad(spec.activation, tape.hidden[layer - 1])
            g = site(g, layer)
    site(g, 0)
    return grad


def backward(tape: ForwardTape, params: ParameterSet, residuals) -> np.ndarray:
    """Gradient of the mean squared residual ``mean(r**2)`` where ``r = U - target``.

    Linear in ``residuals``; the residuals must come from the forward pass
    that produced ``tape``.
    """
    r = np.asarray(residuals, dtype=params.spec.dtype).reshape(-1)
    if r.size != tape.batch_size:
        raise ValueError(f"got {r.size} residuals for a batch of {tape.batch_size}")
    return backward_outputs(tape, params, (2.0 / tape.batch_size) * r)


# --- serialization ---------------------------------------------------------


def dumps(params: ParameterSet, stats: BatchNormRunningStats) -> bytes:
    """Header, then little-endian theta, then running means/variances site by site."""
    spec = params.spec
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        spec.d,
        spec.widths[0],
        spec.widths[1],
        ACTIVATIONS.index(spec.activation),
        PRECISIONS.index(spec.precision),
        spec.bn_epsilon,
        spec.bn_momentum,
        stats.count,
    )
    le = spec.dtype.newbyteorder("<")
    chunks = [header, params.theta.astype(le).tobytes()]
    for m, v in zip(stats.means, stats.variances):
        chunks.append(m.astype(le).tobytes())
        chunks.append(v.astype(le).tobytes())
    return b"".join(chunks)


def loads(blob: bytes):
    if len(blob) < _HEADER.size:
        raise SerializationError("truncated network blob (header)")
    magic, version, d, w1, w2, act, prec, eps, momentum, count = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise SerializationError("bad magic bytes in network blob")
    if version != _VERSION:
        raise SerializationError(f"unsupported network format version {version}")
    if act >= len(ACTIVATIONS) or prec >= len(PRECISIONS):
        raise SerializationError("corrupt network header (activation/precision id)")
    spec = NetworkSpec(d, (w1, w2), ACTIVATIONS[act], eps, momentum, PRECISIONS[prec])
    le = spec.dtype.newbyteorder("<")
    expected = _HEADER.size + le.itemsize * (spec.size + 2 * sum(spec.site_widths))
    if len(blob) != expected:
        raise SerializationError(f"network blob has {len(blob)} bytes, expected {expected}")
    pos = _HEADER.size

    def take(n):
        nonlocal pos
        arr = np.frombuffer(blob, dtype=le, count=n, offset=pos).astype(spec.dtype)
        pos += n * le.itemsize
        return arr

    theta = take(spec.size)
    means, variances = [], []
    for w in spec.site_widths:
        means.append(take(w))
        variances.append(take(w))
    return ParameterSet(spec, theta), BatchNormRunningStats(means, variances, int(count))
