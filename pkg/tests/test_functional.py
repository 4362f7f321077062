import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomask import functional as F
from anatomask import tensor as T
from anatomask.gradcheck import finite_diff_check
from anatomask.gray_texture import SOBEL_X
from anatomask.tensor import ConfigurationError, DimensionError, Tensor


def conv_oracle(x, w, stride, padding, dilation):
    """Direct per-output loop, independent of the library's vectorised path."""
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (x.shape[1] + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    w_out = (x.shape[2] + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                for u in range(k):
                    for v in range(k):
                        out[o, i, j] += np.dot(w[o, :, u, v],
                                               xp[:, i * stride + u * dilation, j * stride + v * dilation])
    return out


def test_one_by_one_kernel_scales():
    out = F.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_identity_kernel_is_identity(rng):
    x = rng.standard_normal((1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_sobel_ramp_interior_is_eight():
    ramp = np.tile(np.arange(7.0), (7, 1))[None]
    out = F.conv2d(Tensor(ramp), Tensor(SOBEL_X[None, None]))
    np.testing.assert_array_equal(out.data, np.full((1, 5, 5), 8.0))


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2),
                                                     (1, 4, 4), (2, 0, 1), (3, 2, 1)])
def test_conv_matches_loop_oracle(rng, stride, padding, dilation):
    x = rng.standard_normal((2, 9, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    got = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, dilation=dilation).data
    np.testing.assert_allclose(got, conv_oracle(x, w, stride, padding, dilation), atol=1e-12)
    assert got.shape[1] == F.conv_output_size(9, 3, stride, padding, dilation)


@pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 4, 4)])
def test_conv_gradients(rng, stride, padding, dilation):
    x = Tensor(rng.standard_normal((2, 7, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    out_shape = F.conv2d(x, w, b, stride, padding, dilation).shape
    proj = Tensor(rng.standard_normal(out_shape))
    f = lambda _t: T.tsum(T.mul(F.conv2d(x, w, b, stride, padding, dilation), proj))
    for leaf in (x, w, b):
        assert finite_diff_check(f, leaf, eps=1e-5) < 1e-4


def test_conv_batched_matches_unbatched(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    batched = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], F.conv2d(Tensor(x[i]), Tensor(w), padding=1).data,
                                   atol=1e-12)


def test_conv_errors():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ConfigurationError):
        F.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises((ConfigurationError, DimensionError)):
        F.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))))


@settings(max_examples=20, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), seed=st.integers(0, 2 ** 16))
def test_identity_kernel_property(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_reflect_pad_values_and_gradient(rng):
    x = np.arange(9.0).reshape(1, 3, 3)
    np.testing.assert_array_equal(F.pad2d(Tensor(x), 1, "reflect").data[0],
                                  np.pad(x[0], 1, mode="reflect"))
    t = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
    proj = Tensor(rng.standard_normal((1, 6, 6)))
    assert finite_diff_check(lambda u: T.tsum(T.mul(F.pad2d(u, 1, "reflect"), proj)), t) < 1e-8


def test_pool_and_upsample(rng):
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(F.avg_pool2d(Tensor(x), 2).data[0], [[2.5, 4.5], [10.5, 12.5]])
    up = F.upsample_nearest(Tensor(np.array([[[1.0, 2.0]]])), 2).data
    np.testing.assert_array_equal(up[0], [[1, 1, 2, 2], [1, 1, 2, 2]])
    t = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    assert finite_diff_check(lambda u: T.tsum(T.mul(F.avg_pool2d(u, 2), F.avg_pool2d(u, 2))), t) < 1e-8
    assert finite_diff_check(lambda u: T.tsum(T.mul(F.upsample_nearest(u, 2),
                                                    F.upsample_nearest(u, 2))), t) < 1e-8


def test_instance_norm_statistics_and_gradient(rng):
    x = rng.standard_normal((3, 8, 8)) * 4 + 2
    out = F.instance_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(1, 2)), 1, atol=1e-5)
    np.testing.assert_array_equal(F.instance_norm(Tensor(np.full((1, 4, 4), 3.0))).data, 0.0)
    t = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    proj = Tensor(rng.standard_normal((2, 4, 4)))
    assert finite_diff_check(lambda u: T.tsum(T.mul(F.instance_norm(u), proj)), t) < 1e-6
