"""Cell DAG, mixed operations and the over-parameterized search network.

A cell has ``h`` nodes. With one input node, node 0 is the stem output and
every later node ``l`` sums, over all earlier nodes ``s``, the weighted
candidate operations on edge ``(s, l)``. Edge weights come either from a
per-edge softmax over architecture logits or from independent stochastic
gates. The prediction is ``u = sum_s <U_s, X^(s)>`` over the nodes of the
last cell and training minimises ``1/(2n) * sum (u_i - y_i)^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conv import ConfigError, avg_pool, conv_op, max_pool, subsample
from .gates import BETA_INIT, DEFAULT_A, DEFAULT_B, sample_gates

SOFTMAX = "softmax"
GATES = "gates"
MODES = (SOFTMAX, GATES)


@dataclass(frozen=True)
class OperationKind:
    tag: str
    k_c: int = 0
    label: str = ""

    def __post_init__(self):
        if self.tag not in ("zero", "skip", "conv", "avg_pool", "max_pool"):
            raise ConfigError(f"unknown operation tag {self.tag!r}")
        if self.tag in ("conv", "avg_pool", "max_pool") and (self.k_c < 1 or self.k_c % 2 == 0):
            raise ConfigError(f"{self.tag} needs an odd kernel size, got {self.k_c}")
        if not self.label:
            object.__setattr__(self, "label", self.tag if self.k_c == 0 else f"{self.tag}_{self.k_c}")

    @property
    def parameterized(self) -> bool:
        return self.tag == "conv"

    def to_dict(self) -> dict:
        return {"tag": self.tag, "k_c": self.k_c, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "OperationKind":
        return cls(d["tag"], int(d.get("k_c", 0)), d.get("label", ""))


ZERO = OperationKind("zero")
SKIP = OperationKind("skip")

# zero / skip / conv in the order the analysis uses
THEORY_OPS = (ZERO, SKIP, OperationKind("conv", 3))

# Separable and dilated variants are plain convs with their own weights.
DARTS_OPS = (
    ZERO,
    SKIP,
    OperationKind("conv", 3, "sep_conv_3"),
    OperationKind("conv", 5, "sep_conv_5"),
    OperationKind("conv", 3, "dil_conv_3"),
    OperationKind("conv", 5, "dil_conv_5"),
    OperationKind("avg_pool", 3, "avg_pool_3"),
    OperationKind("max_pool", 3, "max_pool_3"),
)

OP_SETS = {"theory": THEORY_OPS, "darts": DARTS_OPS}


def resolve_ops(spec) -> tuple[OperationKind, ...]:
    if isinstance(spec, str):
        if spec not in OP_SETS:
            raise ConfigError(f"unknown op set {spec!r}; choose from {sorted(OP_SETS)}")
        return OP_SETS[spec]
    ops = tuple(o if isinstance(o, OperationKind) else OperationKind.from_dict(o) for o in spec)
    if not ops:
        raise ConfigError("operation set is empty")
    return ops


@dataclass(frozen=True)
class CellGraph:
    """Topology of one cell: node count, candidate ops and edge ordering.

    Edges run from every earlier node to every non-input node and are
    ordered by target node, then source node.
    """

    h: int
    ops: tuple[OperationKind, ...] = THEORY_OPS
    mode: str = SOFTMAX
    n_inputs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ops", resolve_ops(self.ops))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_inputs not in (1, 2):
            raise ConfigError("cells take one or two input nodes")
        if self.h < self.n_inputs + 1:
            raise ConfigError(f"need at least {self.n_inputs + 1} nodes, got h={self.h}")

    @property
    def r(self) -> int:
        return len(self.ops)

    @cached_property
    def edges(self) -> list[tuple[int, int]]:
        return [(s, l) for l in range(self.n_inputs, self.h) for s in range(l)]

    @cached_property
    def _edge_lookup(self) -> dict[tuple[int, int], int]:
        return {e: i for i, e in enumerate(self.edges)}

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, s: int, l: int) -> int:
        try:
            return self._edge_lookup[(s, l)]
        except KeyError:
            raise ConfigError(f"no edge ({s}, {l}) in a cell with h={self.h}") from None

    @property
    def intermediate_nodes(self) -> list[int]:
        return list(range(self.n_inputs, self.h))

    def op_indices(self, tag: str) -> list[int]:
        return [t for t, o in enumerate(self.ops) if o.tag == tag]

    @property
    def skip_indices(self) -> list[int]:
        return self.op_indices("skip")

    @property
    def parameterized_indices(self) -> list[int]:
        return [t for t, o in enumerate(self.ops) if o.parameterized]

    @property
    def spine(self) -> list[tuple[int, int]]:
        """Consecutive edges starting at the node fed by the previous cell."""
        return [(l, l + 1) for l in range(self.n_inputs - 1, self.h - 1)]


def softmax_weights(beta, mask=None) -> Tensor:
    """Row-wise softmax of architecture logits (last axis), max-stabilised.

    With ``mask`` the softmax is taken over the selected entries only;
    unselected entries get weight 0.
    """
    beta = ad.as_tensor(beta)
    data = beta.data
    if mask is None:
        shift = data.max(axis=-1, keepdims=True)
        e = ad.exp(beta - shift)
    else:
        mask = np.asarray(mask, dtype=bool)
        shift = np.where(mask, data, -np.inf).max(axis=-1, keepdims=True)
        e = ad.exp(beta - shift) * mask.astype(np.float64)
    return e / e.sum(axis=-1, keepdims=True)


def train_loss(u: Tensor, y) -> Tensor:
    """Mean squared loss ``1/(2n) sum (u_i - y_i)^2``."""
    u = ad.as_tensor(u)
    n = u.size
    if n == 0:
        raise ValueError("empty batch")
    return (u - np.asarray(y, dtype=np.float64).reshape(u.shape)).square().sum() * (0.5 / n)


def gd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> Sequence[Tensor]:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for p, g in zip(params, grads):
        p.data -= lr * g
    return params


@dataclass
class NetworkConfig:
    in_channels: int = 3
    channels: int = 8
    length: int = 8
    h: int = 4
    ops: object = "theory"
    mode: str = SOFTMAX
    cells: int = 1
    reductions: bool = False
    reduction_positions: list[int] | None = None
    n_inputs: int = 1
    cell_output: str = "mean"
    stem_kernel: int = 3
    activation: str = "softplus"
    beta_init: float | None = None
    beta_noise: float = 0.0
    gate_a: float = DEFAULT_A
    gate_b: float = DEFAULT_B

    def resolved_reductions(self) -> list[int]:
        if self.reduction_positions is not None:
            pos = sorted(set(int(p) for p in self.reduction_positions))
        elif self.reductions and self.cells >= 3:
            pos = [self.cells // 3, 2 * self.cells // 3]
        else:
            pos = []
        if any(p < 0 or p >= self.cells for p in pos):
            raise ConfigError(f"reduction positions {pos} outside [0, {self.cells})")
        return pos


@dataclass
class ForwardResult:
    u: Tensor
    nodes: list[Tensor]
    cell_nodes: list[list[Tensor]]
    weights: dict[str, Tensor]


@dataclass
class SuperNet:
    """Stacked cells with all learnable tensors.

    ``conv_weights[c][(e, t)]`` is the kernel of op ``t`` on edge ``e`` in
    cell ``c``; ``betas`` holds one ``(num_edges, r)`` logit array per cell
    type (``"normal"`` and, with reductions, ``"reduce"``).
    """

    config: NetworkConfig
    graph: CellGraph
    stems: list[list[Tensor]]
    conv_weights: list[dict[tuple[int, int], Tensor]]
    heads: list[Tensor]
    betas: dict[str, Tensor]
    reduction_cells: list[int] = field(default_factory=list)

    # -- parameter bookkeeping ---------------------------------------------
    def cell_type(self, c: int) -> str:
        return "reduce" if c in self.reduction_cells else "normal"

    def weight_params(self) -> list[Tensor]:
        """Network weights in flattening order: per cell stem then (l, s, op), heads last."""
        out: list[Tensor] = []
        edges = self.graph.edges
        for c in range(len(self.stems)):
            out.extend(self.stems[c])
            keyed = sorted(self.conv_weights[c].items(), key=lambda kv: (edges[kv[0][0]][1], edges[kv[0][0]][0], kv[0][1]))
            out.extend(w for _, w in keyed)
        out.extend(self.heads)
        return out

    def arch_params(self) -> list[Tensor]:
        return [self.betas[k] for k in sorted(self.betas)]

    def parameter_names(self) -> list[str]:
        return [p.name for p in self.weight_params()]

    def copy(self) -> "SuperNet":
        def cp(t: Tensor) -> Tensor:
            return ad.parameter(t.data.copy(), t.name)

        return SuperNet(
            config=self.config,
            graph=self.graph,
            stems=[[cp(w) for w in ws] for ws in self.stems],
            conv_weights=[{k: cp(v) for k, v in d.items()} for d in self.conv_weights],
            heads=[cp(u) for u in self.heads],
            betas={k: cp(v) for k, v in self.betas.items()},
            reduction_cells=list(self.reduction_cells),
        )

    # -- edge weights -----------------------------------------------------
    def edge_weights(
        self,
        rng: np.random.Generator | None = None,
        active: dict[str, np.ndarray] | None = None,
        tau_g: float = 1.0,
    ) -> dict[str, Tensor]:
        out = {}
        for kind, beta in self.betas.items():
            mask = None if active is None else active[kind]
            if self.graph.mode == SOFTMAX:
                out[kind] = softmax_weights(beta, mask)
            else:
                if rng is None:
                    raise ValueError("gate mode needs an rng")
                g = sample_gates(beta, tau_g, rng, self.config.gate_a, self.config.gate_b)
                out[kind] = g if mask is None else g * np.asarray(mask, dtype=np.float64)
        return out

    # -- forward ------------------------------------------------------------
    def _apply_op(self, c: int, e: int, t: int, x: Tensor, stride: int, out_shape) -> Tensor | None:
        op = self.graph.ops[t]
        if op.tag == "zero":
            return None
        if op.tag == "skip":
            return subsample(x, stride)
        if op.tag == "conv":
            return conv_op(self.conv_weights[c][(e, t)], x, self.config.activation, stride=stride)
        if op.tag == "avg_pool":
            return avg_pool(x, op.k_c, stride)
        return max_pool(x, op.k_c, stride)

    def run_cell(
        self,
        c: int,
        inputs: list[Tensor],
        weights: Tensor,
        active: np.ndarray | None = None,
    ) -> list[Tensor]:
        g = self.graph
        reduce = c in self.reduction_cells
        nodes = list(inputs)
        m = self.config.channels
        for l in g.intermediate_nodes:
            acc: Tensor | None = None
            for s in range(l):
                e = g.edge_index(s, l)
                stride = 2 if reduce and s < g.n_inputs else 1
                for t in range(g.r):
                    if active is not None and not active[e, t]:
                        continue
                    y = self._apply_op(c, e, t, nodes[s], stride, None)
                    if y is None:
                        continue
                    term = y * weights[e, t]
                    acc = term if acc is None else acc + term
            if acc is None:
                lead = inputs[0].shape[:-2]
                length = inputs[-1].shape[-1]
                if reduce:
                    length = (length + 1) // 2
                acc = Tensor(np.zeros((*lead, m, length)))
            nodes.append(acc)
        return nodes

    def _cell_output(self, nodes: list[Tensor]) -> Tensor:
        inter = nodes[self.graph.n_inputs :]
        if self.config.cell_output == "concat":
            return ad.concat(inter, axis=-2)
        acc = inter[0]
        for x in inter[1:]:
            acc = acc + x
        return acc * (1.0 / len(inter))

    def forward(
        self,
        x,
        rng: np.random.Generator | None = None,
        weights: dict[str, Tensor] | None = None,
        active: dict[str, np.ndarray] | None = None,
        tau_g: float = 1.0,
    ) -> ForwardResult:
        """Run all cells on a batch ``x`` of shape (n, m_in, p) or (m_in, p)."""
        x = ad.as_tensor(x)
        if weights is None:
            weights = self.edge_weights(rng, active, tau_g)
        weights = {k: ad.as_tensor(v) for k, v in weights.items()}
        prev_prev = prev = x
        all_nodes: list[list[Tensor]] = []
        for c in range(len(self.stems)):
            if self.graph.n_inputs == 1:
                inputs = [conv_op(self.stems[c][0], prev, self.config.activation)]
            else:
                inputs = [
                    conv_op(self.stems[c][0], prev_prev, self.config.activation, stride=_stem_stride(self, c, prev_prev, prev)),
                    conv_op(self.stems[c][1], prev, self.config.activation),
                ]
            kind = self.cell_type(c)
            mask = None if active is None else active[kind]
            nodes = self.run_cell(c, inputs, weights[kind], mask)
            all_nodes.append(nodes)
            prev_prev, prev = prev, self._cell_output(nodes)
        last = all_nodes[-1]
        u = None
        for s, node in enumerate(last):
            term = (node * self.heads[s]).sum(axis=(-2, -1))
            u = term if u is None else u + term
        return ForwardResult(u=u, nodes=last, cell_nodes=all_nodes, weights=weights)

    def loss(self, x, y, **kwargs) -> Tensor:
        return train_loss(self.forward(x, **kwargs).u, y)


def _stem_stride(net: SuperNet, c: int, prev_prev: Tensor, prev: Tensor) -> int:
    # the older input is longer whenever reductions happened in between
    stride, length, target = 1, prev_prev.shape[-1], prev.shape[-1]
    while -(-length // stride) > target:
        stride *= 2
    return stride


def forward_cell(net: SuperNet, x, rng: np.random.Generator | None = None, weights=None, **kwargs) -> ForwardResult:
    """Node values and prediction for input batch ``x`` (see :meth:`SuperNet.forward`)."""
    return net.forward(x, rng=rng, weights=weights, **kwargs)


def build_multi_cell(config: NetworkConfig, rng: np.random.Generator) -> SuperNet:
    """Allocate every weight of a ``config.cells``-deep network.

    Weights and heads are drawn from N(0, 1); architecture logits start at
    ``beta_init`` (0 for softmax mode, 0.5 for gate mode unless given) plus
    optional Gaussian noise of scale ``beta_noise``.
    """
    if config.cells < 1:
        raise ConfigError("need at least one cell")
    graph = CellGraph(config.h, resolve_ops(config.ops), config.mode, config.n_inputs)
    reductions = config.resolved_reductions()
    m = config.channels
    inter = config.h - config.n_inputs
    out_ch = m * inter if config.cell_output == "concat" else m
    if config.cell_output not in ("mean", "concat"):
        raise ConfigError(f"cell_output must be 'mean' or 'concat', got {config.cell_output!r}")

    stems, conv_weights = [], []
    prev_ch, prev_prev_ch = config.in_channels, config.in_channels
    length = config.length
    in_length = length
    for c in range(config.cells):
        in_length = length
        if config.n_inputs == 1:
            cell_stems = [ad.parameter(rng.standard_normal((m, config.stem_kernel * prev_ch)), f"c{c}.stem")]
        else:
            cell_stems = [
                ad.parameter(rng.standard_normal((m, config.stem_kernel * prev_prev_ch)), f"c{c}.stem0"),
                ad.parameter(rng.standard_normal((m, config.stem_kernel * prev_ch)), f"c{c}.stem1"),
            ]
        stems.append(cell_stems)
        ws = {}
        for e, (s, l) in enumerate(graph.edges):
            for t, op in enumerate(graph.ops):
                if op.parameterized:
                    ws[(e, t)] = ad.parameter(rng.standard_normal((m, op.k_c * m)), f"c{c}.W{l}_{s}.{t}")
        conv_weights.append(ws)
        if c in reductions:
            length = (length + 1) // 2
        prev_prev_ch, prev_ch = prev_ch, out_ch

    # input nodes of a final reduction cell keep the pre-reduction length
    heads = [
        ad.parameter(rng.standard_normal((m, in_length if s < config.n_inputs else length)), f"head{s}")
        for s in range(config.h)
    ]
    b0 = config.beta_init
    if b0 is None:
        b0 = 0.0 if config.mode == SOFTMAX else BETA_INIT
    kinds = ["normal"] + (["reduce"] if reductions else [])
    betas = {}
    for kind in kinds:
        data = np.full((graph.num_edges, graph.r), float(b0))
        if config.beta_noise:
            data = data + config.beta_noise * rng.standard_normal(data.shape)
        betas[kind] = ad.parameter(data, f"beta.{kind}")
    return SuperNet(config, graph, stems, conv_weights, heads, betas, reductions)
