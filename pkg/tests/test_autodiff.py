import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instcal import autodiff as ad
from instcal.autodiff import Tensor


def direct_conv(x, w, b, stride, pad):
    """Nested-loop cross-correlation used as the reference."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ic, r * stride + a, q * stride + bb] * w[oc, ic, a, bb]
                    out[i, oc, r, q] = acc
    return out


# -- conv2d ----------------------------------------------------------------

def test_conv_sum_of_ones():
    out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = ad.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ramp_average_matches_direct_sum():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.full((1, 1, 3, 3), 1 / 9)
    out = ad.conv2d(x, w, np.zeros(1), stride=1, padding=1).data
    assert out[0, 0, 1, 1] == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(out, direct_conv(x, w, np.zeros(1), 1, 1), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_random_matches_direct_sum(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(x, w, b, stride, pad).data
    np.testing.assert_allclose(got, direct_conv(x, w, b, stride, pad), atol=1e-12)
    h_out = (7 + 2 * pad - 3) // stride + 1
    assert got.shape[2] == h_out


def test_conv_channel_mismatch_names_axes():
    with pytest.raises(ad.DimensionError, match="axis 1"):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_conv_bad_stride():
    with pytest.raises(ValueError):
        ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)


def test_conv_is_batch_invariant_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3, 9, 9))
    w = rng.normal(size=(6, 3, 3, 3))
    full = ad.conv2d(x, w, stride=2, padding=1).data
    for i in range(5):
        one = ad.conv2d(x[i:i + 1], w, stride=2, padding=1).data
        assert one.tobytes() == full[i:i + 1].tobytes()


# -- reduce_stats ----------------------------------------------------------

def test_reduce_stats_two_points():
    mu, var = ad.reduce_stats(np.array([1.0, 3.0]), axes=(0,))
    assert mu.item() == 2.0 and var.item() == 1.0


def test_reduce_stats_constant():
    mu, var = ad.reduce_stats(np.full((2, 3, 4), 7.5), axes=(0, 1, 2))
    assert mu.item() == 7.5 and var.item() == 0.0


def test_reduce_stats_rows():
    mu, var = ad.reduce_stats(np.array([[1.0, 2, 3], [4, 5, 6]]), axes=(0,), keepdims=False)
    np.testing.assert_allclose(mu.data, [2.5, 3.5, 4.5])
    np.testing.assert_allclose(var.data, [2.25, 2.25, 2.25])


def test_reduce_stats_zero_extent():
    with pytest.raises(ad.DimensionError):
        ad.reduce_stats(np.ones((2, 0, 3)), axes=(1,))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_variance_nonnegative(seed, scale):
    x = np.random.default_rng(seed).normal(size=(3, 4, 5)) * scale + 1e3
    _, var = ad.reduce_stats(x, axes=(0, 2))
    assert (var.data >= 0).all()


# -- softmax / cross entropy ----------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(7)).data, np.full(7, 1 / 7), rtol=1e-15)


def test_softmax_exact_exponentials():
    np.testing.assert_allclose(ad.softmax(np.log([1.0, 3.0])).data, [0.25, 0.75], rtol=1e-14)


def test_softmax_high_precision_reference():
    mpmath.mp.dps = 50
    z = [mpmath.mpf(2), mpmath.mpf(1), mpmath.mpf("0.1")]
    den = sum(mpmath.e ** v for v in z)
    ref = [float(mpmath.e ** v / den) for v in z]
    np.testing.assert_allclose(ad.softmax(np.array([2.0, 1.0, 0.1])).data, ref, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).normal(size=(6, 9)) * 30
    s = ad.softmax(x, axis=1).data
    assert (s > 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_confident_limit():
    logits = np.zeros((1, 3, 2, 2))
    logits[:, 1] = 60.0
    loss = ad.cross_entropy_seg(logits, np.ones((1, 2, 2), dtype=int))
    assert loss.item() < 1e-20


def test_cross_entropy_uniform():
    loss = ad.cross_entropy_seg(np.zeros((2, 5, 3, 3)), np.zeros((2, 3, 3), dtype=int))
    assert loss.item() == pytest.approx(math.log(5), rel=1e-14)


def test_cross_entropy_reference_pixels():
    logits = np.zeros((1, 2, 1, 2))
    logits[0, :, 0, 0] = [2.0, 0.0]
    logits[0, :, 0, 1] = [0.0, 1.0]
    labels = np.zeros((1, 1, 2), dtype=int)
    # -ln sigmoid(d) = ln(1 + e^-d) with d the margin of class 0
    expected = (math.log1p(math.exp(-2.0)) + math.log1p(math.exp(1.0))) / 2
    assert ad.cross_entropy_seg(logits, labels).item() == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_ignore_index():
    logits = np.random.default_rng(0).normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 255], [255, 255]]])
    only = ad.cross_entropy_seg(logits[..., :1, :1], labels[..., :1, :1])
    assert ad.cross_entropy_seg(logits, labels).item() == pytest.approx(only.item(), rel=1e-14)
    with pytest.raises(ValueError):
        ad.cross_entropy_seg(logits, np.full((1, 2, 2), 255))


# -- graph mechanics -------------------------------------------------------

def test_backward_visits_ops_in_reverse_execution_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = a * 3.0
    c = ad.exp(b)
    d = c.sum()
    record = ad.ComputationRecord.from_root(d)
    assert record.ops == ["mul", "exp", "sum"]
    seqs = [n.seq for n in record.nodes]
    assert seqs == sorted(seqs)
    record.backward()
    np.testing.assert_allclose(a.grad, 3 * np.exp([3.0, 6.0]))


def test_second_backward_is_an_error():
    a = Tensor([1.0, 2.0], requires_grad=True)
    loss = (a * a).sum()
    loss.backward()
    with pytest.raises(ad.BackwardError):
        loss.backward()


def test_reusing_consumed_intermediate_is_an_error():
    a = Tensor([1.0, 2.0], requires_grad=True)
    y = a * a
    y.sum().backward()
    with pytest.raises(ad.BackwardError):
        (y * 2.0).sum().backward()


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))


def test_no_grad_builds_no_graph():
    a = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        b = a * 2.0
    assert b._node is None and not b.requires_grad


def test_forward_bitwise_reproducible():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))

    def run():
        y = ad.relu(ad.conv2d(x, w, padding=1))
        mu, var = ad.reduce_stats(y, (0, 2, 3))
        return ((y - mu) / ad.sqrt(var + 1e-5)).data

    assert run().tobytes() == run().tobytes()


def test_float32_switch():
    with ad.precision(np.float32):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32
        assert ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


# -- gradient checks -------------------------------------------------------

def test_grad_check_quadratic():
    p = Tensor([1.0, 2.0], requires_grad=True)
    err = ad.grad_check(lambda: (p * p).sum(), [p])
    np.testing.assert_allclose(p.grad, [2.0, 4.0])
    assert err < 1e-8


def test_grad_check_one_layer_conv_net():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 6))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    labels = rng.integers(0, 4, size=(2, 6, 6))
    err = ad.grad_check(lambda: ad.cross_entropy_seg(ad.conv2d(x, w, b, 1, 1), labels), [w, b], eps=1e-4)
    assert err < 1e-4


def test_grad_check_rejects_nonfinite():
    p = Tensor([0.0], requires_grad=True)
    with pytest.raises(ad.NonFiniteError):
        ad.grad_check(lambda: (p * np.inf).sum(), [p])


def _projection(shape, rng):
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1, 1], size=shape)


def _primitive_cases(rng):
    """(name, leaves, f) for every primitive with a backward rule."""
    def leaf(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    def away_from_zero(*shape):
        v = rng.uniform(0.3, 1.0, size=shape) * rng.choice([-1, 1], size=shape)
        return Tensor(v, requires_grad=True)

    a, b = leaf(3, 4), leaf(1, 4)
    pos = leaf(3, 4, lo=0.5, hi=2.0)
    nz = away_from_zero(3, 4)
    x4 = leaf(2, 3, 5, 5)
    w4 = leaf(4, 3, 3, 3)
    bias = leaf(4)
    m1, m2 = leaf(3, 5), leaf(5, 2)
    logits = leaf(2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    r34 = _projection((3, 4), rng)
    cases = [
        ("add", [a, b], lambda: ((a + b) * r34).sum()),
        ("sub", [a, b], lambda: ((a - b) * r34).sum()),
        ("mul", [a, b], lambda: ((a * b) * r34).sum()),
        ("div", [a, pos], lambda: ((a / pos) * r34).sum()),
        ("neg", [a], lambda: ((-a) * r34).sum()),
        ("power", [pos], lambda: ((pos ** 2.5) * r34).sum()),
        ("exp", [a], lambda: (ad.exp(a) * r34).sum()),
        ("log", [pos], lambda: (ad.log(pos) * r34).sum()),
        ("sqrt", [pos], lambda: (ad.sqrt(pos) * r34).sum()),
        ("relu", [nz], lambda: (ad.relu(nz) * r34).sum()),
        ("clamp_min", [nz], lambda: (ad.clamp_min(nz, 0.0) * r34).sum()),
        ("sum", [a], lambda: (a.sum(axis=1) * np.arange(1.0, 4.0)).sum()),
        ("mean", [a], lambda: (a.mean(axis=0, keepdims=True) * r34[:1]).sum()),
        ("reshape", [a], lambda: (a.reshape((4, 3)) * r34.reshape(4, 3)).sum()),
        ("take", [a], lambda: (a[1:, ::2] * r34[1:, ::2]).sum() + (ad.take(a, (0, 3)) * 2.0).sum()),
        ("matmul", [m1, m2], lambda: ((m1 @ m2) * _fixed(3, 2)).sum()),
        ("concat", [a, b], lambda: (ad.concat([a, b], axis=0) * _fixed(4, 4)).sum()),
        ("reduce_stats", [x4], lambda: _stats_fn(x4)),
        ("conv2d", [x4, w4, bias], lambda: (ad.conv2d(x4, w4, bias, 2, 1) * _fixed(2, 4, 3, 3)).sum()),
        ("upsample_nearest", [x4], lambda: (ad.upsample_nearest(x4, 2) * _fixed(2, 3, 10, 10)).sum()),
        ("softmax", [a], lambda: (ad.softmax(a, axis=1) * r34).sum()),
        ("log_softmax", [a], lambda: (ad.log_softmax(a, axis=0) * r34).sum()),
        ("cross_entropy_seg", [logits], lambda: ad.cross_entropy_seg(logits, labels)),
    ]
    return cases


_FIXED = {}


def _fixed(*shape):
    if shape not in _FIXED:
        _FIXED[shape] = _projection(shape, np.random.default_rng(len(_FIXED) + 100))
    return _FIXED[shape]


def _stats_fn(x):
    mu, var = ad.reduce_stats(x, (0, 2, 3))
    mi, vi = ad.reduce_stats(x, (2, 3))
    return (mu * _fixed(1, 3, 1, 1)).sum() + (var * _fixed(1, 3, 1, 1)).sum() + (vi * _fixed(2, 3, 1, 1)).sum()


PRIMITIVES = [c[0] for c in _primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_every_primitive_passes_grad_check_over_20_seeds(name):
    worst = 0.0
    for seed in range(20):
        case = {c[0]: c for c in _primitive_cases(np.random.default_rng(seed))}[name]
        _, leaves, f = case
        worst = max(worst, ad.grad_check(f, leaves, eps=1e-4))
    assert worst < 1e-4, f"{name}: max relative error {worst:.2e}"
