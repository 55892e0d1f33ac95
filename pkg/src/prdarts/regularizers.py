"""Architecture regularizers on gate activation probabilities.

``l_skip`` and ``l_non_skip`` average the activation probabilities of the
skip-connection group and of every other op; ``l_path`` is the probability
that each consecutive pair of nodes along the cell's spine is joined by a
parameterized (convolution) op. All three are differentiable in the logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, sigmoid
from .cell import CellGraph
from .gates import DEFAULT_A, DEFAULT_B

LAMBDA_SKIP = 0.01
LAMBDA_NON_SKIP = 0.005
LAMBDA_PATH = 0.005


@dataclass(frozen=True)
class GroupPartition:
    """Skip / non-skip split of the ``(edge, op)`` gates of one cell."""

    skip_group: tuple[tuple[int, int], ...]
    non_skip_group: tuple[tuple[int, int], ...]
    zeta: float

    @classmethod
    def from_graph(cls, graph: CellGraph) -> "GroupPartition":
        skip = set(graph.skip_indices)
        gates = [(e, t) for e in range(graph.num_edges) for t in range(graph.r)]
        # equals 2 / (h (h - 1)) for single-input cells
        zeta = 1.0 / graph.num_edges
        return cls(
            tuple(g for g in gates if g[1] in skip),
            tuple(g for g in gates if g[1] not in skip),
            zeta,
        )

    def masks(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        skip = np.zeros(shape)
        non = np.zeros(shape)
        for e, t in self.skip_group:
            skip[e, t] = 1.0
        for e, t in self.non_skip_group:
            non[e, t] = 1.0
        return skip, non


def _probabilities(beta, tau_g: float, a: float, b: float) -> Tensor:
    return sigmoid(as_tensor(beta) - tau_g * math.log(-a / b))


def l_skip(partition: GroupPartition, beta, tau_g: float, a: float = DEFAULT_A,
           b: float = DEFAULT_B) -> Tensor:
    beta = as_tensor(beta)
    if not partition.skip_group:
        return Tensor(0.0)
    skip, _ = partition.masks(beta.shape)
    return (_probabilities(beta, tau_g, a, b) * skip).sum() * partition.zeta


def l_non_skip(partition: GroupPartition, beta, tau_g: float, r: int, a: float = DEFAULT_A,
               b: float = DEFAULT_B) -> Tensor:
    if r < 2:
        raise ValueError("non-skip regularizer needs at least two ops per edge")
    beta = as_tensor(beta)
    _, non = partition.masks(beta.shape)
    return (_probabilities(beta, tau_g, a, b) * non).sum() * (partition.zeta / (r - 1))


def l_path(graph: CellGraph, beta, tau_g: float, a: float = DEFAULT_A, b: float = DEFAULT_B,
           parameterized: list[int] | None = None) -> Tensor:
    """Product over spine edges of the summed conv-op activation probabilities."""
    beta = as_tensor(beta)
    ops = graph.parameterized_indices if parameterized is None else list(parameterized)
    probs = _probabilities(beta, tau_g, a, b)
    out: Tensor | None = None
    for s, l in graph.spine:
        e = graph.edge_index(s, l)
        factor = probs[e, ops].sum() if ops else Tensor(0.0)
        out = factor if out is None else out * factor
    return out if out is not None else Tensor(1.0)


def pr_darts_objective(f_val, skip, non_skip, path, lam1: float = LAMBDA_SKIP,
                       lam2: float = LAMBDA_NON_SKIP, lam3: float = LAMBDA_PATH) -> Tensor:
    return as_tensor(f_val) + as_tensor(skip) * lam1 + as_tensor(non_skip) * lam2 - as_tensor(path) * lam3


def regularizer_terms(graph: CellGraph, betas: dict[str, Tensor], tau_g: float,
                      a: float = DEFAULT_A, b: float = DEFAULT_B) -> dict[str, Tensor]:
    """The three regularizers summed with equal weight over cell types."""
    part = GroupPartition.from_graph(graph)
    totals: dict[str, Tensor] = {}
    for kind in sorted(betas):
        beta = betas[kind]
        terms = {
            "l_skip": l_skip(part, beta, tau_g, a, b),
            "l_non_skip": l_non_skip(part, beta, tau_g, graph.r, a, b),
            "l_path": l_path(graph, beta, tau_g, a, b),
        }
        for k, v in terms.items():
            totals[k] = v if k not in totals else totals[k] + v
    return totals
