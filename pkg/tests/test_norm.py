import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instcal import autodiff as ad
from instcal import norm as N
from instcal.autodiff import Tensor
from instcal.segnet import SegNetConfig, build

EPS = N.DEFAULT_EPS


def state_from(mu, var, gamma, beta, mode=N.EVAL, **kw):
    return N.NormLayerState(Tensor(np.asarray(mu, float)), Tensor(np.asarray(var, float)),
                            Tensor(np.asarray(gamma, float)), Tensor(np.asarray(beta, float)),
                            mode=mode, **kw)


def random_state(rng, c, mode=N.EVAL):
    return state_from(rng.normal(size=c), rng.uniform(0.2, 3.0, c), rng.uniform(0.5, 2.0, c),
                      rng.normal(size=c), mode=mode)


def scalar_oracle(x, mu_pop, var_pop, gamma, beta, m_mu, m_sigma, eps=EPS):
    """Element-by-element reference for the calibrated transform.

    ``m_mu``/``m_sigma`` are indexed [b][c] (or [c] when shared).
    """
    b_, c_, h_, w_ = x.shape
    out = np.zeros_like(x)
    for b in range(b_):
        for c in range(c_):
            vals = [float(x[b, c, i, j]) for i in range(h_) for j in range(w_)]
            mean = math.fsum(vals) / len(vals)
            var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
            mm = m_mu[b][c] if np.ndim(m_mu) == 2 else m_mu[c]
            ms = m_sigma[b][c] if np.ndim(m_sigma) == 2 else m_sigma[c]
            mu = (1 - mm) * mu_pop[c] + mm * mean
            sv = max((1 - ms) * var_pop[c] + ms * var, 0.0)
            for i in range(h_):
                for j in range(w_):
                    out[b, c, i, j] = (x[b, c, i, j] - mu) / math.sqrt(sv + eps) * gamma[c] + beta[c]
    return out


# -- mix -------------------------------------------------------------------

def test_mix_endpoints_and_midpoint():
    a, b = np.array([1.0, -2.0]), np.array([5.0, 7.0])
    np.testing.assert_array_equal(N.mix(a, b, 0.0), a)
    np.testing.assert_array_equal(N.mix(a, b, 1.0), b)
    assert N.mix(2.0, 4.0, 0.25) == pytest.approx(2.5)
    np.testing.assert_allclose(N.mix([1, 1, 1], [3, 3, 3], [0, 0.5, 1]), [1, 2, 3])


def test_mix_extrapolates_without_clamping():
    assert N.mix(0.0, 1.0, 1.5) == pytest.approx(1.5)
    assert N.mix(0.0, 1.0, -0.5) == pytest.approx(-0.5)


def test_mix_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        N.mix(np.ones(3), np.ones(4), 0.5)


# -- state -----------------------------------------------------------------

@pytest.mark.parametrize("kw,err", [
    (dict(var=[-1.0, 1.0]), ValueError),
    (dict(epsilon=0.0), ValueError),
    (dict(momentum=1.0), ValueError),
    (dict(momentum=0.0), ValueError),
    (dict(gamma=[1.0, 1.0, 1.0]), ad.DimensionError),
])
def test_state_validation(kw, err):
    base = dict(mu=[0.0, 0.0], var=[1.0, 1.0], gamma=[1.0, 1.0], beta=[0.0, 0.0])
    extra = {k: kw.pop(k) for k in list(kw) if k in ("epsilon", "momentum")}
    base.update(kw)
    with pytest.raises(err):
        state_from(**base, **extra)


# -- BatchNorm train / eval ------------------------------------------------

def test_train_ema_example():
    st_ = state_from([0.0], [1.0], [1.0], [0.0], mode=N.TRAIN)
    x = np.ones((2, 1, 2, 2))
    _, new = N.bn_forward_train(x, st_)
    assert new.mu_pop.data[0] == pytest.approx(0.1, abs=1e-15)
    # the input state is left alone
    assert st_.mu_pop.data[0] == 0.0


def test_train_constant_input_gives_beta():
    st_ = state_from([0.0, 0.0], [1.0, 1.0], [2.0, 3.0], [0.5, -1.5], mode=N.TRAIN)
    y, _ = N.bn_forward_train(np.full((3, 2, 4, 4), 7.0), st_)
    np.testing.assert_array_equal(y.data[:, 0], 0.5)
    np.testing.assert_array_equal(y.data[:, 1], -1.5)


def test_train_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 4))
    st_ = random_state(rng, 3, N.TRAIN)
    y, new = N.bn_forward_train(x, st_)
    ref = np.zeros_like(x)
    for c in range(3):
        vals = x[:, c].ravel().tolist()
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        ref[:, c] = (x[:, c] - mean) / math.sqrt(var + EPS) * st_.gamma.data[c] + st_.beta.data[c]
        assert new.mu_pop.data[c] == pytest.approx(0.9 * st_.mu_pop.data[c] + 0.1 * mean, abs=1e-12)
        assert new.var_pop.data[c] == pytest.approx(0.9 * st_.var_pop.data[c] + 0.1 * var, abs=1e-12)
    np.testing.assert_allclose(y.data, ref, atol=1e-10)


def test_train_requires_train_mode():
    with pytest.raises(ValueError):
        N.bn_forward_train(np.ones((1, 1, 2, 2)), state_from([0.0], [1.0], [1.0], [0.0]))


def test_zero_spatial_extent_rejected():
    st_ = state_from([0.0], [1.0], [1.0], [0.0], mode=N.TRAIN)
    with pytest.raises(ad.DimensionError):
        N.bn_forward_train(np.ones((1, 1, 0, 3)), st_)


@pytest.mark.parametrize("alpha", [0.1, 0.01, 0.5])
@pytest.mark.parametrize("t", [1, 5, 40])
def test_ema_closed_form(alpha, t):
    st_ = state_from([2.0], [4.0], [1.0], [0.0], mode=N.TRAIN, momentum=alpha)
    x = np.array([[[[1.0, 5.0]]]])  # mean 3, variance 4
    for _ in range(t):
        _, st_ = N.bn_forward_train(x, st_)
    decay = (1 - alpha) ** t
    assert st_.mu_pop.data[0] == pytest.approx(decay * 2.0 + (1 - decay) * 3.0, abs=1e-9)
    assert st_.var_pop.data[0] == pytest.approx(decay * 4.0 + (1 - decay) * 4.0, abs=1e-9)


def test_eval_identity_stats():
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    st_ = state_from(np.zeros(3), np.ones(3), np.ones(3), np.zeros(3), epsilon=1e-300)
    np.testing.assert_allclose(N.bn_forward_eval(x, st_).data, x, rtol=1e-14)


def test_eval_zero_gamma():
    x = np.random.default_rng(3).normal(size=(2, 2, 3, 3))
    st_ = state_from([1.0, 2.0], [1.0, 2.0], [0.0, 0.0], [0.3, -0.7])
    y = N.bn_forward_eval(x, st_).data
    np.testing.assert_array_equal(y[:, 0], 0.3)
    np.testing.assert_array_equal(y[:, 1], -0.7)


def test_eval_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 4))
    st_ = random_state(rng, 3)
    ref = scalar_oracle(x, st_.mu_pop.data, st_.var_pop.data, st_.gamma.data, st_.beta.data,
                        [0.0] * 3, [0.0] * 3)
    np.testing.assert_allclose(N.bn_forward_eval(x, st_).data, ref, atol=1e-10)


def test_batchnorm_layer_updates_population_stats_in_train_mode():
    layer = N.BatchNorm2d(N.NormLayerState.fresh(2))
    x = np.random.default_rng(5).normal(3.0, 2.0, size=(4, 2, 5, 5))
    layer(x, N.TRAIN)
    assert np.all(layer.state.mu_pop.data != 0.0)
    before = layer.state.mu_pop.data.copy()
    layer(x, N.EVAL)
    np.testing.assert_array_equal(layer.state.mu_pop.data, before)


# -- manual calibration ----------------------------------------------------

def test_manual_zero_equals_eval():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4, 5, 5))
    st_ = random_state(rng, 4)
    a = N.manual_calibrated_forward(x, st_, 0.0).data
    b = N.bn_forward_eval(x, st_).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_manual_one_is_instance_norm():
    rng = np.random.default_rng(7)
    x = rng.normal(2.0, 3.0, size=(2, 3, 6, 6))
    st_ = state_from(rng.normal(size=3), np.ones(3), np.ones(3), np.zeros(3))
    y = N.manual_calibrated_forward(x, st_, 1.0).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-5)


def test_manual_two_value_example():
    st_ = state_from([0.0], [1.0], [1.0], [0.0])
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    y = N.manual_calibrated_forward(x, st_, 0.5).data.ravel()
    # mixed mean 0.5*0 + 0.5*2 = 1, mixed variance 0.5*1 + 0.5*1 = 1
    np.testing.assert_allclose(y, np.array([0.0, 2.0]) / math.sqrt(1 + EPS), atol=1e-14)


def test_negative_mixed_variance_is_clamped():
    # m = 3: mixed variance (1-3)*4 + 3*0 = -8 is clamped to 0, mixed mean is 15
    st_ = state_from([0.0], [4.0], [1.0], [0.0])
    x = np.full((1, 1, 2, 2), 5.0)
    y = N.manual_calibrated_forward(x, st_, 3.0).data
    np.testing.assert_allclose(y, (5.0 - 15.0) / math.sqrt(EPS), rtol=1e-12)


# -- InstCal-U -------------------------------------------------------------

def cal_u(m_mu, m_sigma):
    return N.CalibrationU(Tensor(np.asarray(m_mu, float), requires_grad=True),
                          Tensor(np.asarray(m_sigma, float), requires_grad=True))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 4), c=st.integers(1, 5))
def test_u_zero_calibration_equivalence(seed, b, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, 4, 3)) * rng.uniform(0.1, 10)
    st_ = random_state(rng, c)
    y = N.instcal_u_forward(x, st_, cal_u(np.zeros(c), np.zeros(c))).data
    assert np.max(np.abs(y - N.bn_forward_eval(x, st_).data)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 4), c=st.integers(1, 5))
def test_u_full_calibration_is_instance_norm(seed, b, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, 5, 5)) * rng.uniform(0.1, 5, size=(1, c, 1, 1)) + rng.normal(size=(1, c, 1, 1))
    st_ = state_from(rng.normal(size=c), rng.uniform(0.5, 2, c), np.ones(c), np.zeros(c))
    y = N.instcal_u_forward(x, st_, cal_u(np.ones(c), np.ones(c))).data
    plane_var = x.var(axis=(2, 3))
    assert np.max(np.abs(y.mean(axis=(2, 3)))) <= 1e-9
    got = y.var(axis=(2, 3))
    mask = plane_var > 1e-6
    lower = plane_var / (plane_var + EPS) - 1e-9
    assert np.all(got[mask] >= lower[mask]) and np.all(got[mask] <= 1.0 + 1e-12)


def test_u_per_channel_example_matches_oracle():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 2, 2))
    st_ = state_from([0.3, -0.2], [1.5, 0.7], [1.2, 0.8], [0.1, -0.3])
    y = N.instcal_u_forward(x, st_, cal_u([0.1, 0.9], [0.9, 0.1])).data
    ref = scalar_oracle(x, st_.mu_pop.data, st_.var_pop.data, st_.gamma.data, st_.beta.data,
                        [0.1, 0.9], [0.9, 0.1])
    np.testing.assert_allclose(y, ref, atol=1e-10)


@pytest.mark.parametrize("variant", ["u", "c"])
@pytest.mark.parametrize("seed", range(4))
def test_batching_and_order_invariance(variant, seed):
    rng = np.random.default_rng(seed)
    c = 3
    x = rng.normal(size=(6, c, 5, 4))
    st_ = random_state(rng, c)
    if variant == "u":
        layer = N.InstCalU(st_, cal_u(rng.uniform(-0.5, 1.5, c), rng.uniform(0, 1, c)))
    else:
        cal = N.CalibrationC.init(c, 4, 8, rng)
        cal.basis_mu.data = rng.uniform(0, 1, cal.basis_mu.shape)
        cal.mlp_mu.w2.data = rng.normal(size=cal.mlp_mu.w2.shape)
        cal.mlp_sigma.w2.data = rng.normal(size=cal.mlp_sigma.w2.shape)
        layer = N.InstCalC(st_, cal)
    singles = [layer(x[i:i + 1]).data[0] for i in range(6)]
    whole = layer(x).data
    perm = rng.permutation(6)
    shuffled = layer(x[perm]).data
    parts = np.concatenate([layer(x[:2]).data, layer(x[2:5]).data, layer(x[5:]).data])
    for i in range(6):
        assert singles[i].tobytes() == whole[i].tobytes()
        assert singles[i].tobytes() == parts[i].tobytes()
        assert singles[perm[i]].tobytes() == shuffled[i].tobytes()


# -- InstCal-C -------------------------------------------------------------

def test_coefficients_uniform_for_zero_mlp():
    rng = np.random.default_rng(9)
    mlp = N.MLP.init(6, 8, 5, rng)
    c = N.instcal_c_coefficients(rng.normal(size=3), rng.normal(size=(4, 3)), mlp).data
    np.testing.assert_allclose(c, 0.2, atol=1e-15)


def test_coefficients_single_basis_is_one():
    rng = np.random.default_rng(10)
    mlp = N.MLP.init(4, 8, 1, rng)
    mlp.w2.data = rng.normal(size=mlp.w2.shape)
    c = N.instcal_c_coefficients(rng.normal(size=2), rng.normal(size=(3, 2)), mlp).data
    np.testing.assert_array_equal(c, 1.0)


def test_coefficients_hand_set_mlp():
    # C=1 so the input is [pop, ins] = [1, 0]
    mlp = N.MLP(Tensor(np.array([[1.0, -1.0], [0.5, 2.0]])), Tensor(np.array([0.0, 0.25])),
                Tensor(np.array([[1.0, 0.0], [2.0, -1.0]])), Tensor(np.array([0.1, 0.0])))
    c = N.instcal_c_coefficients(np.array([1.0]), np.array([0.0]), mlp).data[0]
    h = [max(0.0, 1.0 * 1 + 0.5 * 0 + 0.0), max(0.0, -1.0 * 1 + 2.0 * 0 + 0.25)]
    z = [h[0] * 1.0 + h[1] * 2.0 + 0.1, h[0] * 0.0 + h[1] * -1.0 + 0.0]
    e = [math.exp(v - max(z)) for v in z]
    np.testing.assert_allclose(c, [e[0] / sum(e), e[1] / sum(e)], atol=1e-15)


def test_coefficients_width_mismatch():
    mlp = N.MLP.init(6, 4, 2, np.random.default_rng(0))
    with pytest.raises(ad.DimensionError):
        N.instcal_c_coefficients(np.zeros(2), np.zeros((1, 2)), mlp)


def _random_c(rng, c, k, hidden=8):
    cal = N.CalibrationC.init(c, k, hidden, rng)
    cal.mlp_mu.w2.data = rng.normal(size=cal.mlp_mu.w2.shape) * 2
    cal.mlp_sigma.w2.data = rng.normal(size=cal.mlp_sigma.w2.shape) * 2
    cal.mlp_mu.b2.data = rng.normal(size=k)
    return cal


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 6))
def test_coefficients_on_simplex_and_strengths_in_hull(seed, k):
    rng = np.random.default_rng(seed)
    c = 3
    cal = _random_c(rng, c, k)
    cal.basis_mu.data = rng.uniform(-1, 2, (k, c))
    cal.basis_sigma.data = rng.uniform(-1, 2, (k, c))
    x = Tensor(rng.normal(size=(4, c, 3, 3)) * 3)
    m_mu, m_sigma, c_mu, c_sigma = N.instcal_c_strengths(x, random_state(rng, c), cal)
    for coef in (c_mu.data, c_sigma.data):
        assert np.all(coef >= 0)
        assert np.max(np.abs(coef.sum(axis=1) - 1.0)) <= 1e-12
    for m, basis in ((m_mu.data, cal.basis_mu.data), (m_sigma.data, cal.basis_sigma.data)):
        assert np.all(m >= basis.min(axis=0) - 1e-12)
        assert np.all(m <= basis.max(axis=0) + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_c_single_basis_reduces_to_u(seed):
    rng = np.random.default_rng(seed)
    c = 4
    v_mu, v_sigma = rng.uniform(0, 1, c), rng.uniform(0, 1, c)
    cal = _random_c(rng, c, 1)
    cal.basis_mu.data = v_mu[None].copy()
    cal.basis_sigma.data = v_sigma[None].copy()
    x = rng.normal(size=(3, c, 4, 4))
    st_ = random_state(rng, c)
    a = N.instcal_c_forward(x, st_, cal).data
    b = N.instcal_u_forward(x, st_, cal_u(v_mu, v_sigma)).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 8))
def test_c_equal_bases_reduce_to_u(seed, k):
    rng = np.random.default_rng(seed)
    c = 3
    v_mu, v_sigma = rng.uniform(0, 1, c), rng.uniform(0, 1, c)
    cal = _random_c(rng, c, k)
    cal.basis_mu.data = np.tile(v_mu, (k, 1))
    cal.basis_sigma.data = np.tile(v_sigma, (k, 1))
    x = rng.normal(size=(2, c, 4, 4)) * 2
    st_ = random_state(rng, c)
    a = N.instcal_c_forward(x, st_, cal).data
    b = N.instcal_u_forward(x, st_, cal_u(v_mu, v_sigma)).data
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_c_two_bases_zero_mlp_averages():
    rng = np.random.default_rng(11)
    c = 2
    cal = N.CalibrationC.init(c, 2, 4, rng)
    cal.basis_mu.data = np.array([[0.0, 0.2], [1.0, 0.6]])
    cal.basis_sigma.data = np.array([[0.4, 1.0], [0.0, 0.0]])
    x = rng.normal(size=(2, c, 3, 3))
    st_ = random_state(rng, c)
    ref = scalar_oracle(x, st_.mu_pop.data, st_.var_pop.data, st_.gamma.data, st_.beta.data,
                        [0.5, 0.4], [0.2, 0.5])
    np.testing.assert_allclose(N.instcal_c_forward(x, st_, cal).data, ref, atol=1e-10)


def test_c_basis_shape_mismatch():
    rng = np.random.default_rng(12)
    cal = N.CalibrationC.init(3, 2, 4, rng)
    with pytest.raises(ad.DimensionError):
        N.instcal_c_forward(rng.normal(size=(1, 2, 3, 3)), random_state(rng, 2), cal)


# -- gradients through the calibrated layers --------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_grad_check_instcal_u(seed):
    rng = np.random.default_rng(seed)
    c = 3
    x = rng.normal(size=(2, c, 3, 3))
    st_ = random_state(rng, c)
    cal = cal_u(rng.uniform(0, 1, c), rng.uniform(0, 1, c))
    proj = rng.normal(size=x.shape)

    def f():
        return (N.instcal_u_forward(x, st_, cal) * proj).sum()

    err = ad.grad_check(f, [cal.m_mu, cal.m_sigma], eps=1e-4)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_instcal_c(seed):
    rng = np.random.default_rng(seed)
    c, k = 3, 3
    x = rng.normal(size=(2, c, 3, 3))
    st_ = random_state(rng, c)
    cal = _random_c(rng, c, k, hidden=5)
    cal.basis_mu.data = rng.uniform(0, 1, (k, c))
    cal.basis_sigma.data = rng.uniform(0, 1, (k, c))
    proj = rng.normal(size=x.shape)

    def f():
        return (N.instcal_c_forward(x, st_, cal) * proj).sum()

    params = [cal.basis_mu, cal.basis_sigma, *cal.mlp_mu.tensors().values(),
              *cal.mlp_sigma.tensors().values()]
    err = ad.grad_check(f, params, eps=1e-4)
    assert err < 1e-4


def test_frozen_state_receives_no_gradient():
    rng = np.random.default_rng(13)
    st_ = random_state(rng, 2)
    layer = N.InstCalU(st_)
    layer(rng.normal(size=(1, 2, 3, 3))).sum().backward()
    assert layer.cal.m_mu.grad is not None
    assert st_.gamma.grad is None and st_.beta.grad is None


# -- conversion ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_like():
    m = build(SegNetConfig(widths=(4, 6, 6, 4)), seed=3)
    rng = np.random.default_rng(0)
    for _, layer in m.named_norm_layers():
        c = layer.state.channels
        layer.state.mu_pop.data = rng.normal(size=c) * 0.1
        layer.state.var_pop.data = rng.uniform(0.5, 2, c)
        layer.state.gamma.data = rng.uniform(0.5, 1.5, c)
        layer.state.beta.data = rng.normal(size=c) * 0.1
    return m


@pytest.mark.parametrize("mode", [N.ConvertMode.instcal_u(), N.ConvertMode.instcal_c(8),
                                  N.ConvertMode.instcal_c(3)])
def test_converted_model_matches_manual_at_init(trained_like, mode):
    x = np.random.default_rng(1).normal(size=(2, 3, 16, 16))
    ref = N.convert_model(trained_like, N.ConvertMode.manual(0.1)).forward(x).data
    got = N.convert_model(trained_like, mode).forward(x).data
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_conversion_copies_and_freezes(trained_like):
    conv = N.convert_model(trained_like, N.ConvertMode.instcal_u())
    for (name, old), (_, new) in zip(trained_like.named_norm_layers(), conv.named_norm_layers()):
        assert new.kind == "instcal_u"
        for key in ("gamma", "beta", "mu_pop", "var_pop"):
            t = getattr(new.state, key)
            assert t.data.tobytes() == getattr(old.state, key).data.tobytes()
            assert not t.requires_grad
        np.testing.assert_array_equal(new.cal.m_mu.data, 0.1)
        np.testing.assert_array_equal(new.cal.m_sigma.data, 0.1)
    names = {n for n, t in conv.named_tensors().items() if t.requires_grad}
    assert names == set(conv.calibration_names())
    # the source model is untouched
    assert all(layer.kind == "bn" for _, layer in trained_like.named_norm_layers())


def test_instcal_c_defaults(trained_like):
    conv = N.convert_model(trained_like, N.ConvertMode.instcal_c())
    layer = conv.named_norm_layers()[0][1]
    assert layer.cal.K == 8 == N.DEFAULT_BASIS
    assert layer.cal.mlp_mu.w1.shape[1] == N.MLP_HIDDEN
    np.testing.assert_array_equal(layer.cal.basis_mu.data, 0.1)
    np.testing.assert_array_equal(layer.cal.mlp_mu.w2.data, 0.0)
    assert np.any(layer.cal.mlp_mu.w1.data != 0)


def test_convert_errors(trained_like):
    conv = N.convert_model(trained_like, N.ConvertMode.instcal_u())
    with pytest.raises(N.ConversionError):
        N.convert_model(conv, N.ConvertMode.instcal_u())

    class Empty:
        def named_norm_layers(self):
            return []

    with pytest.raises(N.ConversionError):
        N.convert_model(Empty(), N.ConvertMode.manual(0.5))
    with pytest.raises(ValueError):
        N.ConvertMode("something")
    with pytest.raises(ValueError):
        N.ConvertMode.instcal_c(0)
