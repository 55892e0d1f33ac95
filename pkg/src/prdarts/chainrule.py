"""Closed-form per-sample gradients of the single-cell zero/skip/conv network.

Pure numpy, no graph: the forward pass is evaluated node by node, then the
node gradients are propagated backwards with the explicit recursion

    dX^(l) = (u - y) U_l + sum_{s>l} [ w_skip(l->s) dX^(s)
             + w_conv(l->s) tau Phi^T( W^T (act'(W Phi(X^(l))) * dX^(s)) ) ]

and each kernel gradient is ``w_conv tau (act'(W Phi(Z)) * dX) Phi(Z)^T``.
Used to cross-check the autodiff engine; only the theory op set
(zero, skip, conv) on a single one-input cell is supported.
"""
from __future__ import annotations

import math

import numpy as np

from .cell import SuperNet
from .conv import phi_adjoint, phi_array

_ACT = {
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "sigmoid": (
        lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)),
        lambda z: 0.25 * (1.0 - np.tanh(0.5 * z) ** 2),
    ),
}


def chain_rule_gradients(net: SuperNet, x: np.ndarray, y: float, weights: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``0.5 (u - y)^2`` for one sample ``x`` (m_in, p), keyed by parameter name."""
    g = net.graph
    if len(net.stems) != 1 or g.n_inputs != 1:
        raise ValueError("closed-form gradients cover single-cell, single-input networks only")
    if [o.tag for o in g.ops] != ["zero", "skip", "conv"]:
        raise ValueError("closed-form gradients need the (zero, skip, conv) op set")
    act, dact = _ACT[net.config.activation]
    w = np.asarray(weights, dtype=np.float64)
    m, p = net.config.channels, x.shape[-1]

    w0 = net.stems[0][0].data
    k0 = w0.shape[1] // x.shape[0]
    tau0 = 1.0 / math.sqrt(x.shape[0])
    tau = 1.0 / math.sqrt(m)
    phi_x = phi_array(x, k0)
    pre0 = w0 @ phi_x
    nodes = [tau0 * act(pre0)]
    pre = {}
    for l in range(1, g.h):
        acc = np.zeros((m, p))
        for s in range(l):
            e = g.edge_index(s, l)
            acc += w[e, 1] * nodes[s]
            kern = net.conv_weights[0][(e, 2)].data
            z = kern @ phi_array(nodes[s], kern.shape[1] // m)
            pre[(s, l)] = z
            acc += w[e, 2] * tau * act(z)
        nodes.append(acc)
    heads = [u.data for u in net.heads]
    u = sum(float(np.sum(heads[s] * nodes[s])) for s in range(g.h))
    r = u - y

    d_nodes: list[np.ndarray | None] = [None] * g.h
    grads: dict[str, np.ndarray] = {}
    for l in reversed(range(g.h)):
        d = r * heads[l]
        for s in range(l + 1, g.h):
            e = g.edge_index(l, s)
            kern = net.conv_weights[0][(e, 2)].data
            k_c = kern.shape[1] // m
            back = kern.T @ (dact(pre[(l, s)]) * d_nodes[s])
            d = d + w[e, 1] * d_nodes[s] + w[e, 2] * tau * phi_adjoint(back, k_c, m, p)
        d_nodes[l] = d

    grads[net.stems[0][0].name] = tau0 * (dact(pre0) * d_nodes[0]) @ phi_x.T
    for l in range(1, g.h):
        for s in range(l):
            e = g.edge_index(s, l)
            kern = net.conv_weights[0][(e, 2)]
            ph = phi_array(nodes[s], kern.shape[1] // m)
            grads[kern.name] = w[e, 2] * tau * (dact(pre[(s, l)]) * d_nodes[l]) @ ph.T
    for s in range(g.h):
        grads[net.heads[s].name] = r * nodes[s]
    return grads
