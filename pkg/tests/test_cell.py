import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prdarts import autodiff as ad
from prdarts.cell import (
    DARTS_OPS,
    GATES,
    THEORY_OPS,
    CellGraph,
    NetworkConfig,
    build_multi_cell,
    forward_cell,
    gd_step,
    softmax_weights,
    train_loss,
)
from prdarts.conv import ConfigError, conv_op

SKIP, CONV = 1, 2


def small_net(h=3, **kw):
    cfg = NetworkConfig(in_channels=2, channels=4, length=5, h=h, **kw)
    return build_multi_cell(cfg, np.random.default_rng(0))


def straight_line_u(net, x, w):
    """Independent evaluator for a single one-input theory cell."""
    act = lambda z: np.logaddexp(0.0, z)
    stem = net.stems[0][0].data
    nodes = [act(stem @ _patches(x, 3)) / math.sqrt(x.shape[0])]
    m = net.config.channels
    for l in range(1, net.graph.h):
        acc = np.zeros_like(nodes[0])
        for s in range(l):
            e = net.graph.edge_index(s, l)
            k = net.conv_weights[0][(e, CONV)].data
            acc += w[e, SKIP] * nodes[s] + w[e, CONV] * act(k @ _patches(nodes[s], 3)) / math.sqrt(m)
        nodes.append(acc)
    return sum(float(np.sum(net.heads[s].data * nodes[s])) for s in range(net.graph.h))


def _patches(z, k):
    m, p = z.shape
    pad = k // 2
    zp = np.pad(z, ((0, 0), (pad, pad)))
    rows = []
    for i in range(m):
        for o in range(k):
            rows.append(zp[i, o : o + p])
    return np.array(rows)


def test_graph_edges():
    g = CellGraph(4, THEORY_OPS)
    assert g.num_edges == 6
    assert g.edges == [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
    assert g.spine == [(0, 1), (1, 2), (2, 3)]
    with pytest.raises(ConfigError):
        g.edge_index(2, 1)


def test_darts_op_set():
    assert len(DARTS_OPS) == 8
    assert [o.tag for o in THEORY_OPS] == ["zero", "skip", "conv"]


def test_softmax_examples():
    np.testing.assert_allclose(softmax_weights(np.zeros(3)).data, [1 / 3] * 3)
    np.testing.assert_allclose(softmax_weights(np.array([math.log(2), 0, 0])).data, [0.5, 0.25, 0.25])


@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_and_shift(beta, c):
    w = softmax_weights(beta).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_allclose(softmax_weights(beta + c).data, w, atol=1e-12)


def test_masked_softmax():
    w = softmax_weights(np.zeros((1, 4)), mask=np.array([[True, False, True, False]])).data
    np.testing.assert_allclose(w, [[0.5, 0, 0.5, 0]])


def test_pure_skip_path():
    net = small_net(h=2)
    x = np.random.default_rng(1).standard_normal((2, 5))
    w = np.zeros((1, 3))
    w[0, SKIP] = 1.0
    res = net.forward(x, weights={"normal": w})
    np.testing.assert_allclose(res.nodes[1].data, res.nodes[0].data)
    expect = float(np.sum((net.heads[0].data + net.heads[1].data) * res.nodes[0].data))
    assert res.u.item() == pytest.approx(expect)


def test_zero_graph():
    net = small_net(h=4)
    x = np.random.default_rng(1).standard_normal((2, 5))
    res = net.forward(x, weights={"normal": np.zeros((6, 3))})
    for node in res.nodes[1:]:
        assert np.all(node.data == 0)
    assert res.u.item() == pytest.approx(float(np.sum(net.heads[0].data * res.nodes[0].data)))


def test_forward_matches_straight_line(rng):
    net = small_net(h=4)
    x = rng.standard_normal((2, 5))
    w = rng.random((6, 3))
    assert net.forward(x, weights={"normal": w}).u.item() == pytest.approx(straight_line_u(net, x, w), rel=1e-12)


def test_forward_cell_alias(rng):
    net = small_net()
    x = rng.standard_normal((3, 2, 5))
    a = forward_cell(net, x).u.data
    b = net.forward(x).u.data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3,)


@pytest.mark.parametrize(
    "u,y,val",
    [([2.0, -1.0], [2.0, -1.0], 0.0), ([1.0], [0.0], 0.5), ([1.0, 3.0], [0.0, 1.0], 1.25)],
)
def test_train_loss_examples(u, y, val):
    assert train_loss(ad.Tensor(np.array(u)), y).item() == pytest.approx(val)


def test_train_loss_empty():
    with pytest.raises(ValueError):
        train_loss(ad.Tensor(np.zeros(0)), [])


def test_gd_step_examples():
    p = ad.parameter(np.array(1.0), "t")
    gd_step([p], [np.array(2.0)], 0.1)
    assert p.data == pytest.approx(0.8)
    gd_step([p], [np.array(5.0)], 0.0)
    assert p.data == pytest.approx(0.8)


def test_small_steps_decrease_loss(rng):
    net = small_net(h=3)
    x = rng.standard_normal((4, 2, 5))
    y = rng.standard_normal(4)
    w = {"normal": softmax_weights(np.zeros((3, 3))).data}
    params = net.weight_params()
    lr = 1e-2
    while True:
        trial = net.copy()
        tp = trial.weight_params()
        losses = []
        for _ in range(50):
            loss = trial.loss(x, y, weights=w)
            losses.append(loss.item())
            gd_step(tp, ad.grad(loss, tp), lr)
        if all(b <= a for a, b in zip(losses, losses[1:])):
            break
        lr /= 2
        assert lr > 1e-12
    assert losses[-1] < losses[0]
    assert len(params) == len(tp)


def test_stacked_cells_wire_output_to_next(rng):
    net = small_net(h=3, cells=3)
    x = rng.standard_normal((2, 2, 5))
    res = net.forward(x)
    assert len(res.cell_nodes) == 3
    cell0_out = (res.cell_nodes[0][1] + res.cell_nodes[0][2]) * 0.5
    stem_in = conv_op(net.stems[1][0], cell0_out)
    np.testing.assert_allclose(res.cell_nodes[1][0].data, stem_in.data)


def test_reduction_cells_and_two_inputs(rng):
    cfg = NetworkConfig(in_channels=2, channels=4, length=8, h=4, cells=3, reductions=True, n_inputs=2, ops="darts")
    net = build_multi_cell(cfg, np.random.default_rng(0))
    assert net.reduction_cells == [1, 2]
    assert set(net.betas) == {"normal", "reduce"}
    res = net.forward(rng.standard_normal((2, 2, 8)), rng=np.random.default_rng(0))
    assert res.nodes[-1].shape == (2, 4, 2)
    params = net.weight_params()
    grads = ad.grad(net.loss(rng.standard_normal((2, 2, 8)), [0.0, 1.0]), params)
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_gate_mode_needs_rng(rng):
    net = small_net(mode=GATES)
    with pytest.raises(ValueError):
        net.forward(rng.standard_normal((2, 5)))
    assert np.all(net.betas["normal"].data == 0.5)


def test_parameter_names_are_unique():
    net = small_net(h=4, cells=2)
    names = net.parameter_names()
    assert len(names) == len(set(names))
    assert names[0] == "c0.stem" and names[-1] == "head3"
