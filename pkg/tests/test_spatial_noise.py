import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomask import tensor as T
from anatomask.gradcheck import finite_diff_check
from anatomask.spatial_noise import (InjectionParams, chunk_noise, chunk_stack, gaussian_kernel, inject,
                                     make_noise_volume)
from anatomask.tensor import DimensionError, Tensor


def lag_corr(v, lag, axis=0):
    a = np.moveaxis(v, axis, 0)
    x, y = a[:-lag].ravel(), a[lag:].ravel()
    return float(np.corrcoef(x, y)[0, 1])


@pytest.fixture(scope="module")
def smooth64():
    return make_noise_volume((64, 64, 64), seed=7, smooth_sigma=2.0)


def test_white_noise_uncorrelated():
    z = make_noise_volume((64, 64, 64), seed=3, smooth_sigma=0.0)
    for axis in range(3):
        assert abs(lag_corr(z.values, 1, axis)) < 0.05


def test_smoothed_noise_correlation_profile(smooth64):
    assert lag_corr(smooth64.values, 1) > 0.5
    assert lag_corr(smooth64.values, 8) < 0.1
    # sampled Gaussian-kernel autocorrelation exp(-lag^2 / 4 sigma^2)
    assert lag_corr(smooth64.values, 1) == pytest.approx(np.exp(-1 / 16), abs=0.03)


def test_renormalised_moments(smooth64):
    assert abs(smooth64.values.mean()) < 0.05
    assert abs(smooth64.values.std() - 1.0) < 0.1


def test_determinism_and_seed_sensitivity():
    a = make_noise_volume((4, 8, 8), 11, 1.5).values
    np.testing.assert_array_equal(a, make_noise_volume((4, 8, 8), 11, 1.5).values)
    assert not np.array_equal(a, make_noise_volume((4, 8, 8), 12, 1.5).values)


def test_kernel_normalised_and_truncated():
    k = gaussian_kernel(2.0)
    assert len(k) == 2 * 6 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])


def test_reflect_boundary_when_kernel_exceeds_depth():
    z = make_noise_volume((2, 5, 5), 1, 3.0)
    assert np.all(np.isfinite(z.values)) and z.values.shape == (2, 5, 5)


def test_chunks_partition_volume(smooth64):
    z = make_noise_volume((4, 6, 6), 0, 1.0)
    restacked = np.stack([chunk_noise(z, i).data for i in range(4)])
    np.testing.assert_array_equal(restacked, z.values)
    np.testing.assert_array_equal(chunk_stack(z, 1, 2).data, z.values[1:3])
    assert chunk_noise(z, 2, channels=3).shape == (3, 6, 6)
    for bad in (4, -1):
        with pytest.raises(IndexError):
            chunk_noise(z, bad)
    with pytest.raises(IndexError):
        chunk_stack(z, 3, 2)


def test_adjacent_chunks_correlated(smooth64):
    a, b = chunk_noise(smooth64, 10).data, chunk_noise(smooth64, 11).data
    assert np.corrcoef(a.ravel(), b.ravel())[0, 1] > 0.5


# -- injection -----------------------------------------------------------------------
def test_zero_params_no_alpha_adds_half_noise(rng):
    h = rng.standard_normal((3, 5, 5))
    z = rng.standard_normal((5, 5))
    out = inject(Tensor(h), Tensor(z), InjectionParams(3, 5, 5, alpha=0.0)).data
    np.testing.assert_array_equal(out, h + 0.5 * z)


def test_zero_noise_is_identity(rng):
    h = rng.standard_normal((3, 5, 5))
    params = InjectionParams(3, 5, 5, rng=rng, alpha=0.3)
    np.testing.assert_array_equal(inject(Tensor(h), Tensor(np.zeros((5, 5))), params).data, h)


def test_scalar_evaluation_with_residual():
    params = InjectionParams(2, 3, 3, alpha=1.0, residual_scale=1.0)
    out = inject(Tensor(np.zeros((2, 3, 3))), Tensor(np.full((3, 3), 2.0)), params).data
    np.testing.assert_array_equal(out, 3.0)


def test_injection_formula_oracle(rng):
    c, h, w = 3, 4, 4
    params = InjectionParams(c, h, w, rng=rng, alpha=0.25, residual_scale=0.7)
    params.W1.data = rng.standard_normal((c, h, w))
    feats = rng.standard_normal((c, h, w))
    z = rng.standard_normal((h, w))
    w_in, b_in = params.f1_in.weight.data[:, 0, 0, 0], params.f1_in.bias.data
    w_out, b_out = params.f1_out.weight.data[:, :, 0, 0], params.f1_out.bias.data
    hidden = np.maximum(w_in[:, None, None] * z + b_in[:, None, None], 0)
    f1 = np.einsum("oh,hij->oij", w_out, hidden) + b_out[:, None, None]
    gate = 1 / (1 + np.exp(-(f1 + params.W1.data)))
    expected = feats + z * gate + 0.25 * 0.7 * z
    np.testing.assert_allclose(inject(Tensor(feats), Tensor(z), params).data, expected, atol=1e-12)


def test_stack_injection_matches_per_slice(rng):
    params = InjectionParams(2, 4, 4, rng=rng)
    h = rng.standard_normal((3, 2, 4, 4))
    z = rng.standard_normal((3, 4, 4))
    stacked = inject(Tensor(h), Tensor(z), params).data
    for i in range(3):
        np.testing.assert_allclose(stacked[i], inject(Tensor(h[i]), Tensor(z[i]), params).data, atol=1e-12)


def test_injection_shape_errors():
    params = InjectionParams(2, 4, 4)
    with pytest.raises(DimensionError):
        inject(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((4, 4))), params)
    with pytest.raises(DimensionError):
        inject(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((3, 3))), params)


def test_gradient_wrt_features_is_identity(rng):
    params = InjectionParams(2, 4, 4, rng=rng)
    h = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    g = rng.standard_normal((2, 4, 4))
    out = inject(h, Tensor(rng.standard_normal((4, 4))), params)
    T.tsum(T.mul(out, Tensor(g))).backward()
    np.testing.assert_array_equal(h.grad, g)
    assert finite_diff_check(lambda t: T.tsum(T.mul(inject(t, Tensor(np.ones((4, 4))), params),
                                                    Tensor(g))), h) < 1e-8


def test_parameter_gradients(rng):
    params = InjectionParams(2, 4, 4, rng=rng)
    params.W1.data = rng.standard_normal((2, 4, 4))
    h = Tensor(rng.standard_normal((2, 4, 4)))
    z = Tensor(rng.standard_normal((4, 4)))
    f = lambda _t: T.tsum(T.sigmoid(inject(h, z, params)))
    for p in params.parameters():
        assert finite_diff_check(f, p, eps=1e-5) < 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31), sigma=st.floats(1.0, 2.0))
def test_continuity_adjacent_versus_distant(seed, sigma):
    z = make_noise_volume((24, 16, 16), seed, sigma)
    r = np.random.default_rng(seed)
    params = InjectionParams(2, 16, 16, rng=r)
    h = Tensor(r.standard_normal((2, 16, 16)))
    outs = [inject(h, chunk_noise(z, i), params).data for i in range(24)]
    gap = int(np.ceil(4 * sigma))
    near = np.mean([np.abs(outs[i + 1] - outs[i]).mean() for i in range(24 - 1)])
    far = np.mean([np.abs(outs[i + gap] - outs[i]).mean() for i in range(24 - gap)])
    assert near < far
