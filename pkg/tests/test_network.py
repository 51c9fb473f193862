import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import fd_gradient

from deepkolmogorov.network import (
    BatchNormRunningStats,
    NetworkSpec,
    ParameterSet,
    SerializationError,
    backward,
    dumps,
    forward_infer,
    forward_train,
    loads,
    logistic_map,
    xavier_init,
)
from deepkolmogorov.problems import default_widths
from deepkolmogorov.rng import substream


def spec_and_params(d=3, widths=(4, 4), activation="tanh", seed=0):
    spec = NetworkSpec(d, widths, activation)
    params, stats = xavier_init(spec, substream(seed, 0))
    return spec, params, stats


def test_xavier_bounds_and_bn_defaults():
    spec, params, stats = spec_and_params(5, (7, 3))
    for i, (a, b) in enumerate(spec.layer_shapes):
        assert np.all(np.abs(params.weight(i)) <= math.sqrt(6 / (a + b)))
    for i in range(4):
        assert np.all(params.scale(i) == 1) and np.all(params.shift(i) == 0)
        assert np.all(stats.means[i] == 0) and np.all(stats.variances[i] == 1)
    assert stats.count == 0


def test_xavier_variance():
    spec, params, _ = spec_and_params(1000, (1000, 1), seed=3)
    w = params.weight(0)
    target = 2 / (1000 + 1000)
    assert abs(w.var() - target) < 0.05 * target


def test_zero_weights_give_zero():
    spec, params, stats = spec_and_params()
    params.theta[: spec.weight_count] = 0
    assert forward_infer(params, stats, np.zeros(3)) == 0
    assert np.all(forward_infer(params, stats, substream(1, 0).normal(size=(10, 3))) == 0)
    out, _, _ = forward_train(params, stats, substream(1, 1).normal(size=(10, 3)))
    assert np.all(out == 0)


def test_logistic_values():
    assert logistic_map(0.0) == 0.5
    with np.errstate(over="raise"):
        assert logistic_map(1000.0) == 1.0
        assert logistic_map(-1000.0) == 0.0
    assert logistic_map(1.0) == pytest.approx(float(1 / (1 + mpmath.exp(-1))), rel=1e-15)
    assert abs(logistic_map(1.0) - 0.7310585786) < 1e-10


def test_identical_rows_stay_finite():
    spec, params, stats = spec_and_params()
    out, tape, site_stats = forward_train(params, stats, np.ones((6, 3)))
    assert np.all(np.isfinite(out))
    assert np.all(site_stats[0][1] == 0)


def test_train_rejects_single_row():
    spec, params, stats = spec_and_params()
    with pytest.raises(ValueError):
        forward_train(params, stats, np.ones((1, 3)))


def test_miniature_chain_by_hand():
    # d=1, one unit per layer: with J=2 every BN site maps its two rows to -1/+1 (up to eps)
    spec = NetworkSpec(1, (1, 1), "tanh", bn_epsilon=1e-6)
    theta = np.zeros(spec.size)
    sl = spec.slices()
    theta[sl["W"][0][0]] = 2.0
    theta[sl["W"][1][0]] = -1.5
    theta[sl["W"][2][0]] = 0.5
    for i, (g, b) in enumerate([(1.0, 0.0), (0.7, 0.1), (1.3, -0.2), (2.0, 3.0)]):
        theta[sl["scale"][i]] = g
        theta[sl["shift"][i]] = b
    params = ParameterSet(spec, theta)
    x = np.array([[0.0], [1.0]])

    def bn_pair(a, b, g, s):
        m, v = (a + b) / 2, ((a - b) / 2) ** 2
        inv = 1 / math.sqrt(v + 1e-6)
        return (a - m) * inv * g + s, (b - m) * inv * g + s

    a, b = bn_pair(0.0, 1.0, 1.0, 0.0)
    a, b = bn_pair(2 * a, 2 * b, 0.7, 0.1)
    a, b = math.tanh(a), math.tanh(b)
    a, b = bn_pair(-1.5 * a, -1.5 * b, 1.3, -0.2)
    a, b = math.tanh(a), math.tanh(b)
    a, b = bn_pair(0.5 * a, 0.5 * b, 2.0, 3.0)
    out, _, _ = forward_train(params, None, x)
    np.testing.assert_allclose(out[:, 0], [a, b], rtol=1e-13)


def test_train_and_infer_agree_on_frozen_stats():
    spec, params, _ = spec_and_params(3, (5, 4))
    rng = substream(4, 0)
    params.theta[:] += rng.normal(scale=0.1, size=spec.size)
    x = rng.normal(size=(32, 3))
    out, _, site_stats = forward_train(params, None, x)
    frozen = BatchNormRunningStats([m for m, _ in site_stats], [v for _, v in site_stats], 1)
    np.testing.assert_allclose(forward_infer(params, frozen, x), out[:, 0], rtol=0, atol=1e-12)


def test_identity_activation_infer_is_affine():
    spec, params, _ = spec_and_params(3, (4, 4), "identity")
    rng = substream(5, 0)
    stats = BatchNormRunningStats([rng.normal(size=w) for w in spec.site_widths],
                                  [rng.uniform(0.5, 2, size=w) for w in spec.site_widths], 1)
    x0 = rng.normal(size=3)
    e = np.zeros(3)
    e[1] = 1.0
    vals = [forward_infer(params, stats, x0 + t * e) for t in (0.0, 1.0, 2.0, -3.5)]
    slope = vals[1] - vals[0]
    np.testing.assert_allclose([vals[2] - vals[0], vals[3] - vals[0]], [2 * slope, -3.5 * slope], atol=1e-12)


def test_zero_residuals_zero_gradient():
    spec, params, stats = spec_and_params()
    _, tape, _ = forward_train(params, stats, substream(6, 0).normal(size=(8, 3)))
    assert np.all(backward(tape, params, np.zeros(8)) == 0)


def test_gradient_is_linear_in_residuals():
    spec, params, stats = spec_and_params()
    _, tape, _ = forward_train(params, stats, substream(7, 0).normal(size=(8, 3)))
    r = substream(7, 1).normal(size=8)
    np.testing.assert_allclose(backward(tape, params, 2 * r), 2 * backward(tape, params, r), rtol=1e-14)


def test_gradient_matches_finite_differences():
    spec, params, _ = spec_and_params(3, (4, 4), seed=8)
    rng = substream(8, 1)
    theta = params.theta + rng.normal(scale=0.2, size=spec.size)
    batch, targets = rng.normal(size=(16, 3)), rng.normal(size=16)
    p = ParameterSet(spec, theta)
    out, tape, _ = forward_train(p, None, batch)
    analytic = backward(tape, p, out[:, 0] - targets)
    numeric = fd_gradient(spec, theta, batch, targets)
    significant = np.abs(numeric) > 1e-6
    assert np.max(np.abs(analytic - numeric)[significant] / np.abs(numeric[significant])) < 1e-5
    assert np.max(np.abs(analytic - numeric)[~significant]) < 1e-9


def test_backward_rejects_foreign_tape():
    _, params, stats = spec_and_params()
    _, other, _ = spec_and_params(2, (3, 3))
    _, tape, _ = forward_train(other, None, np.eye(2))
    with pytest.raises(ValueError):
        backward(tape, params, np.zeros(2))


@pytest.mark.parametrize("d", [1, 5, 100])
def test_heat_weight_count(d):
    spec = NetworkSpec(d, default_widths("heat", d))
    assert spec.weight_count == 2 * d * (3 * d + 1)


def test_lorenz_and_heston_weight_counts():
    d = 3
    w = d + 20
    assert NetworkSpec(d, default_widths("lorenz", d)).weight_count == w * d + w * w + w
    d = 50
    w = d + 50
    assert NetworkSpec(d, default_widths("heston", d)).weight_count == w * d + w * w + w


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(4, 40), st.integers(0, 10_000))
def test_bn_sites_normalize(d, w1, w2, J, seed):
    spec = NetworkSpec(d, (w1, w2))
    params, _ = xavier_init(spec, substream(seed, 0))
    x = substream(seed, 1).normal(scale=3, size=(J, d))
    _, tape, site_stats = forward_train(params, None, x)
    for xhat, (_, var) in zip(tape.normalized, site_stats):
        ok = var >= 10 * spec.bn_epsilon
        assert np.all(np.abs(xhat.mean(axis=0)[ok]) < 1e-8)
        assert np.all(np.abs(xhat.var(axis=0)[ok] - 1) < 1e-6 + spec.bn_epsilon / var[ok])


def test_final_path_sign_flip_is_odd():
    # without shifts and with the output BN bypassed by frozen stats, negating W3 negates the output
    spec, params, _ = spec_and_params(2, (3, 3), "tanh", seed=9)
    stats = BatchNormRunningStats.fresh(spec)
    x = substream(9, 1).normal(size=(5, 2))
    flipped = params.copy()
    sl, _ = spec.slices()["W"][2]
    flipped.theta[sl] *= -1
    np.testing.assert_allclose(forward_infer(flipped, stats, x), -forward_infer(params, stats, x), rtol=1e-14)


def test_running_stats_ema():
    spec, _, stats = spec_and_params(1, (1, 1))
    site = [(np.array([2.0]), np.array([4.0])), (np.ones(1), np.ones(1)), (np.ones(1), np.ones(1)), (np.ones(1), np.ones(1))]
    new = stats.updated(site, 0.99)
    assert new.means[0][0] == pytest.approx(0.02) and new.variances[0][0] == pytest.approx(0.99 + 0.04)
    assert new.count == 1 and stats.count == 0


def test_serialization_round_trip():
    spec, params, stats = spec_and_params(3, (4, 5), "logistic")
    stats = stats.updated([(np.full(w, 0.5), np.full(w, 2.0)) for w in spec.site_widths], 0.9)
    p2, s2 = loads(dumps(params, stats))
    assert p2.spec == spec and np.array_equal(p2.theta, params.theta)
    assert all(np.array_equal(a, b) for a, b in zip(s2.means, stats.means))
    assert s2.count == stats.count


def test_serialization_errors():
    _, params, stats = spec_and_params()
    blob = dumps(params, stats)
    with pytest.raises(SerializationError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(SerializationError):
        loads(blob[:-3])


def test_float32_forward():
    spec = NetworkSpec(3, (4, 4), precision="float32")
    params, stats = xavier_init(spec, substream(0, 0))
    out, _, _ = forward_train(params, stats, np.ones((4, 3)) * np.arange(4)[:, None])
    assert out.dtype == np.float32
