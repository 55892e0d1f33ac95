"""1-D convolution written as a patch-matrix product.

A feature map is an ``(m, p)`` array: ``m`` channels by ``p`` positions,
optionally with leading batch axes. ``phi`` stacks, for every channel, the
``k_c`` shifted copies of that channel (zero padded), so a kernel matrix
``W`` of shape ``(m_out, k_c * m)`` turns ``W @ phi(Z)`` into a "same"
convolution.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import ACTIVATIONS, Tensor, as_tensor, matmul


class ConfigError(ValueError):
    """Invalid structural configuration (kernel size, op set, topology)."""


def _check_kernel(k_c: int) -> int:
    if int(k_c) != k_c or k_c < 1 or k_c % 2 == 0:
        raise ConfigError(f"kernel size must be an odd positive integer, got {k_c}")
    return int(k_c)


def phi_array(z: np.ndarray, k_c: int, stride: int = 1) -> np.ndarray:
    """Patch matrix of ``z`` (..., m, p) -> (..., k_c*m, ceil(p/stride))."""
    k_c = _check_kernel(k_c)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise ConfigError("phi expects an array with at least two dimensions")
    pad = (k_c - 1) // 2
    *lead, m, p = z.shape
    padded = np.zeros((*lead, m, p + 2 * pad))
    padded[..., pad : pad + p] = z
    # shifted[..., i, o, t] = z[..., i, t + o - pad]
    shifted = np.stack([padded[..., o : o + p] for o in range(k_c)], axis=-2)
    out = shifted.reshape(*lead, m * k_c, p)
    return out[..., ::stride] if stride > 1 else out


def phi_adjoint(g: np.ndarray, k_c: int, m: int, p: int, stride: int = 1) -> np.ndarray:
    """Transpose of :func:`phi_array`: scatter patch gradients back onto (m, p)."""
    pad = (k_c - 1) // 2
    *lead, _, q = g.shape
    if stride > 1:
        full = np.zeros((*lead, k_c * m, p))
        full[..., ::stride] = g
        g = full
    g = g.reshape(*lead, m, k_c, p)
    padded = np.zeros((*lead, m, p + 2 * pad))
    for o in range(k_c):
        padded[..., o : o + p] += g[..., o, :]
    return padded[..., pad : pad + p]


def phi(z: Tensor, k_c: int, stride: int = 1) -> Tensor:
    z = as_tensor(z)
    m, p = z.shape[-2:]
    return Tensor(
        phi_array(z.data, k_c, stride),
        _parents=[(z, lambda g: phi_adjoint(g, k_c, m, p, stride))],
        _op="phi",
    )


def conv_op(
    w: Tensor,
    x: Tensor,
    activation: str = "softplus",
    scale: float | None = None,
    stride: int = 1,
) -> Tensor:
    """``scale * act(W @ phi(X))`` with ``scale = 1/sqrt(in_channels)`` by default."""
    x = as_tensor(x)
    in_ch = x.shape[-2]
    if w.ndim != 2 or w.shape[1] % in_ch:
        raise ConfigError(f"kernel shape {w.shape} incompatible with input channels {in_ch}")
    k_c = w.shape[1] // in_ch
    if scale is None:
        scale = 1.0 / math.sqrt(in_ch)
    act = ACTIVATIONS[activation]
    return act(matmul(w, phi(x, k_c, stride))) * scale


def avg_pool(x: Tensor, k_c: int, stride: int = 1) -> Tensor:
    """Mean over each zero-padded window of ``k_c`` positions."""
    m = x.shape[-2]
    patches = phi(x, k_c, stride)
    grouped = patches.reshape(*patches.shape[:-2], m, k_c, patches.shape[-1])
    return grouped.mean(axis=-2)


def max_pool(x: Tensor, k_c: int, stride: int = 1) -> Tensor:
    m = x.shape[-2]
    patches = phi(x, k_c, stride)
    grouped = patches.reshape(*patches.shape[:-2], m, k_c, patches.shape[-1])
    return grouped.max(axis=grouped.ndim - 2)


def subsample(x: Tensor, stride: int) -> Tensor:
    """Strided identity used by skip connections in reduction cells."""
    if stride == 1:
        return x
    return x[(Ellipsis, slice(None, None, stride))]
