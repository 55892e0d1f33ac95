"""Pruning a searched supernet into a discrete cell, plus JSON / DOT export.

Every intermediate node keeps its two best-scored non-zero incoming ops,
scored by activation probability (gate mode) or softmax weight.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .cell import (
    GATES,
    CellGraph,
    NetworkConfig,
    OperationKind,
    SuperNet,
    build_multi_cell,
    resolve_ops,
    softmax_weights,
)
from .gates import activation_probability_tensor

SCHEMA_VERSION = "1"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class RetainedOp:
    source: int
    target: int
    op_index: int
    op: str
    score: float


@dataclass
class DiscreteCell:
    h: int
    n_inputs: int
    ops: tuple[str, ...]
    retained: list[RetainedOp] = field(default_factory=list)
    cell_type: str = "normal"
    score_kind: str = "alpha"

    def incoming(self, node: int) -> list[RetainedOp]:
        return [r for r in self.retained if r.target == node]

    def to_dict(self) -> dict:
        return {
            "cell_type": self.cell_type,
            "h": self.h,
            "n_inputs": self.n_inputs,
            "ops": list(self.ops),
            "score_kind": self.score_kind,
            "retained": [
                {"source": r.source, "target": r.target, "op_index": r.op_index, "op": r.op, "score": r.score}
                for r in self.retained
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteCell":
        try:
            return cls(
                h=int(d["h"]),
                n_inputs=int(d["n_inputs"]),
                ops=tuple(d["ops"]),
                retained=[RetainedOp(int(r["source"]), int(r["target"]), int(r["op_index"]), r["op"], float(r["score"])) for r in d["retained"]],
                cell_type=d.get("cell_type", "normal"),
                score_kind=d.get("score_kind", "alpha"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed discrete cell: {exc}") from exc


def edge_scores(net: SuperNet, kind: str = "normal", tau_g: float = 1.0) -> np.ndarray:
    beta = net.betas[kind].data
    if net.graph.mode == GATES:
        return activation_probability_tensor(beta, tau_g, net.config.gate_a, net.config.gate_b).data
    return softmax_weights(beta).data


def prune_scores(graph: CellGraph, scores: np.ndarray, keep: int = 2, cell_type: str = "normal",
                 score_kind: str = "alpha") -> DiscreteCell:
    """Top-``keep`` non-zero candidates per intermediate node; ties go to lower (source, op)."""
    retained = []
    for l in graph.intermediate_nodes:
        cands = [
            (float(scores[graph.edge_index(s, l), t]), s, t)
            for s in range(l)
            for t, op in enumerate(graph.ops)
            if op.tag != "zero"
        ]
        if not cands:
            raise ValueError(f"node {l} has no non-zero candidate operations")
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        for score, s, t in cands[:keep]:
            retained.append(RetainedOp(s, l, t, graph.ops[t].label, score))
    return DiscreteCell(graph.h, graph.n_inputs, tuple(o.label for o in graph.ops), retained, cell_type, score_kind)


def prune(net: SuperNet, kind: str = "normal", tau_g: float = 1.0) -> DiscreteCell:
    score_kind = "activation_probability" if net.graph.mode == GATES else "alpha"
    return prune_scores(net.graph, edge_scores(net, kind, tau_g), cell_type=kind, score_kind=score_kind)


def skip_fraction(cell: DiscreteCell) -> float:
    if not cell.retained:
        return 0.0
    return sum(r.op == "skip" for r in cell.retained) / len(cell.retained)


# -- DOT --------------------------------------------------------------------
_EDGE_RE = re.compile(r'^\s*n(\d+)\s*->\s*n(\d+)\s*\[label="([^" ]+) ([^"]+)"\];\s*$')


def export_dot(cell: DiscreteCell, name: str | None = None) -> str:
    lines = [f"digraph {name or cell.cell_type} {{"]
    nodes = sorted({r.source for r in cell.retained} | {r.target for r in cell.retained})
    for n in nodes:
        shape = "box" if n < cell.n_inputs else "ellipse"
        lines.append(f'  n{n} [label="{n}", shape={shape}];')
    for r in sorted(cell.retained, key=lambda r: (r.target, r.source, r.op_index)):
        lines.append(f'  n{r.source} -> n{r.target} [label="{r.op} {r.score:.6f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_dot_edges(text: str) -> set[tuple[int, int, str]]:
    """Edge set ``(source, target, op)`` of a DOT document written by :func:`export_dot`."""
    if not text.lstrip().startswith("digraph"):
        raise SchemaError("not a digraph")
    edges = set()
    for line in text.splitlines():
        m = _EDGE_RE.match(line)
        if m:
            edges.add((int(m.group(1)), int(m.group(2)), m.group(3)))
    return edges


# -- JSON ---------------------------------------------------------------------
def _dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def export_json(obj, meta: dict | None = None) -> str:
    """Schema-versioned JSON for a :class:`SuperNet` or one or more :class:`DiscreteCell`.

    ``meta`` carries run constants (temperature, stretch bounds, regularizer
    weights, search config) and is stored verbatim.
    """
    meta = dict(meta or {})
    if isinstance(obj, SuperNet):
        cfg = obj.config
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": "supernet",
            "h": obj.graph.h,
            "mode": obj.graph.mode,
            "ops": [o.to_dict() for o in obj.graph.ops],
            "network": _network_dict(cfg),
            "gate": {"a": cfg.gate_a, "b": cfg.gate_b, "tau_g": meta.pop("tau_g", None)},
            "betas": {k: v.data.tolist() for k, v in sorted(obj.betas.items())},
            "weights": {p.name: p.data.tolist() for p in obj.weight_params()},
            "meta": meta,
        }
        return _dumps(doc)
    cells = [obj] if isinstance(obj, DiscreteCell) else list(obj)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "discrete",
        "cells": [c.to_dict() for c in cells],
        "meta": meta,
    }
    return _dumps(doc)


def _network_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["ops"] = [o.to_dict() for o in resolve_ops(cfg.ops)]
    return d


def load_document(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"expected schema_version {SCHEMA_VERSION!r}")
    if doc.get("kind") not in ("supernet", "discrete"):
        raise SchemaError(f"unknown document kind {doc.get('kind')!r}")
    return doc


def import_json(text: str):
    """Inverse of :func:`export_json`: returns ``(SuperNet, meta)`` or ``(list[DiscreteCell], meta)``."""
    doc = load_document(text)
    meta = dict(doc.get("meta", {}))
    if doc["kind"] == "discrete":
        return [DiscreteCell.from_dict(c) for c in doc["cells"]], meta
    try:
        return _supernet_from_doc(doc), {**meta, "tau_g": doc["gate"]["tau_g"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed supernet document: {exc}") from exc


def _supernet_from_doc(doc: dict) -> SuperNet:
    ncfg = dict(doc["network"])
    ncfg["ops"] = tuple(OperationKind.from_dict(o) for o in ncfg["ops"])
    cfg = NetworkConfig(**ncfg)
    # allocate with the right shapes, then overwrite every tensor
    net = build_multi_cell(cfg, np.random.default_rng(0))
    weights = doc["weights"]
    for p in net.weight_params():
        arr = np.asarray(weights[p.name], dtype=np.float64)
        if arr.shape != p.shape:
            raise SchemaError(f"tensor {p.name} has shape {arr.shape}, expected {p.shape}")
        p.data[...] = arr
    for k, v in doc["betas"].items():
        if k not in net.betas:
            raise SchemaError(f"unexpected cell type {k!r}")
        net.betas[k] = ad.parameter(np.asarray(v, dtype=np.float64), f"beta.{k}")
    return net
