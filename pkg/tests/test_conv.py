import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prdarts import autodiff as ad
from prdarts.conv import ConfigError, avg_pool, conv_op, max_pool, phi, phi_adjoint, phi_array


def nested_loop_conv(w, x, k_c, act):
    # direct zero-padded convolution, no patch matrix
    m_out = w.shape[0]
    m_in, p = x.shape
    pad = (k_c - 1) // 2
    out = np.zeros((m_out, p))
    for o in range(m_out):
        for t in range(p):
            acc = 0.0
            for i in range(m_in):
                for j in range(k_c):
                    src = t + j - pad
                    if 0 <= src < p:
                        acc += w[o, i * k_c + j] * x[i, src]
            out[o, t] = act(acc)
    return out / math.sqrt(m_in)


def test_patch_matrix_example():
    z = np.array([[1.0, 2.0, 3.0, 4.0]])
    expected = [[0, 1, 2, 3], [1, 2, 3, 4], [2, 3, 4, 0]]
    np.testing.assert_array_equal(phi_array(z, 3), expected)


def test_unit_kernel_is_identity(rng):
    z = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(phi_array(z, 1), z)


def test_zero_input():
    np.testing.assert_array_equal(phi_array(np.zeros((2, 5)), 3), np.zeros((6, 5)))


@pytest.mark.parametrize("k_c", [0, 2, -1, 4])
def test_bad_kernel_sizes(k_c):
    with pytest.raises(ConfigError):
        phi_array(np.zeros((1, 4)), k_c)


@given(st.integers(1, 4), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.integers(0, 10**6))
def test_adjoint_identity(m, p, k_c, stride, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, p))
    fz = phi_array(z, k_c, stride)
    g = rng.standard_normal(fz.shape)
    lhs = float(np.sum(fz * g))
    rhs = float(np.sum(z * phi_adjoint(g, k_c, m, p, stride)))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_zero_kernel_softplus():
    x = np.random.default_rng(0).standard_normal((4, 5))
    out = conv_op(ad.Tensor(np.zeros((2, 12))), x).data
    np.testing.assert_allclose(out, math.log(2.0) / 2.0 * np.ones((2, 5)))


def test_single_row_identity_kernel():
    x = np.arange(10.0).reshape(2, 5)
    w = ad.Tensor(np.array([[1.0, 0.0]]))
    out = conv_op(w, x, activation="identity").data
    np.testing.assert_allclose(out, x[:1] / math.sqrt(2.0))


@pytest.mark.parametrize("k_c", [1, 3, 5])
def test_matches_nested_loop_oracle(k_c, rng):
    x = rng.standard_normal((3, 7))
    w = rng.standard_normal((4, 3 * k_c))
    sp = lambda v: math.log1p(math.exp(-abs(v))) + max(v, 0.0)
    out = conv_op(ad.Tensor(w), x).data
    np.testing.assert_allclose(out, nested_loop_conv(w, x, k_c, sp), atol=1e-12)


def test_conv_gradients(rng):
    x0 = rng.standard_normal((2, 5))
    w0 = rng.standard_normal((3, 6))
    w, x = ad.parameter(w0.copy(), "w"), ad.parameter(x0.copy(), "x")
    gw, gx = ad.grad(conv_op(w, x).square().sum(), [w, x])
    f = lambda: conv_op(ad.Tensor(w0), ad.Tensor(x0)).square().sum().item()
    np.testing.assert_allclose(gw, ad.finite_difference(f, w0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gx, ad.finite_difference(f, x0), rtol=1e-6, atol=1e-8)


def test_pooling_values():
    x = ad.Tensor(np.array([[1.0, 5.0, 2.0]]))
    np.testing.assert_allclose(avg_pool(x, 3).data, [[2.0, 8.0 / 3.0, 7.0 / 3.0]])
    np.testing.assert_allclose(max_pool(x, 3).data, [[5.0, 5.0, 5.0]])


def test_stride_halves_length(rng):
    x = ad.Tensor(rng.standard_normal((2, 7)))
    assert phi(x, 3, stride=2).shape == (6, 4)
