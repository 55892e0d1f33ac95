"""Convergence-factor formulas and empirical probes on small single-cell networks.

The closed-form convergence factor for a cell with weights ``w`` (rows
indexed by edge, columns by op: zero, skip, conv) is::

    lam = 3 c_sigma / 4 * lam_min(K) * sum_{s=0}^{h-2} w[(s, h-1), conv]^2
                                       * prod_{t=0}^{s-1} w[(t, s), skip]^2

``c_sigma`` has no closed form and is fixed at 1, so only orderings of
``lam`` are meaningful. The probes below measure the quantities the
formula is supposed to order: Gram-matrix spectra and per-step loss
contraction under full-batch gradient descent on the network weights.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .cell import THEORY_OPS, CellGraph, NetworkConfig, SuperNet, build_multi_cell, train_loss
from .dataio import Dataset, generate_synthetic

SKIP, CONV = 1, 2


@dataclass
class TheoryConfig:
    h: int = 3
    m: int = 256
    m_in: int = 4
    p: int = 8
    n: int = 4
    k_c: int = 3
    activation: str = "softplus"
    mu: float = 1.0
    rho: float = 0.25
    lr: float = 3e-5
    steps: int = 30
    c_sigma: float = 1.0
    seed: int = 0
    trials: int = 5
    cells: int = 1
    fractions: tuple[float, ...] = (0.0, 0.375, 0.625)
    epsilon: float = 1e-3
    weightings: int = 20
    weighting_kind: str = "uniform"
    h_compare: int = 8
    draws: int = 100
    weights: list | None = None

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.n < 2:
            raise ValueError("theory runs need n >= 2 samples")
        if self.activation == "relu":
            raise ValueError("theory runs need a smooth activation")
        if self.weighting_kind not in ("softmax", "uniform"):
            raise ValueError(f"weighting_kind must be 'softmax' or 'uniform', got {self.weighting_kind!r}")

    def network(self, h: int | None = None, cells: int | None = None) -> NetworkConfig:
        return NetworkConfig(
            in_channels=self.m_in,
            channels=self.m,
            length=self.p,
            h=self.h if h is None else h,
            ops="theory",
            cells=self.cells if cells is None else cells,
            stem_kernel=self.k_c,
            activation=self.activation,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


@dataclass
class TheoryReport:
    mode: str
    config: dict
    lambda_formula: float | None = None
    lambda_min_k: float | None = None
    lambda_min_k_symmetric: float | None = None
    gram_min_eig: float | None = None
    empirical_contraction: list[float] = field(default_factory=list)
    verdicts: dict[str, bool] = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- closed-form factors -------------------------------------------------------
def _w(weights: np.ndarray, graph: CellGraph, l: int, s: int, t: int) -> float:
    if not 0 <= s < l < graph.h:
        return 0.0
    return float(weights[graph.edge_index(s, l), t])


def lambda_theorem1(weights, h: int, lam_min_k: float, c_sigma: float = 1.0,
                    upper: int | None = None, skip: int = SKIP, conv: int = CONV) -> float:
    """Convergence factor of a single-input cell; ``upper`` is the last ``s`` summed (default h-2)."""
    weights = np.asarray(weights, dtype=np.float64)
    graph = CellGraph(h, THEORY_OPS)
    upper = h - 2 if upper is None else upper
    total = 0.0
    for s in range(upper + 1):
        term = _w(weights, graph, h - 1, s, conv) ** 2
        for t in range(s):
            term *= _w(weights, graph, s, t, skip) ** 2
        total += term
    return 0.75 * c_sigma * lam_min_k * total


def second_branch_term(weights, h: int, lam_min_k: float, c_sigma: float = 1.0,
                       skip: int = SKIP, conv: int = CONV) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    graph = CellGraph(h, THEORY_OPS)
    half = h // 2
    total = 0.0
    for s in range(half, h):
        term = _w(weights, graph, h - 1, s, conv) ** 2
        for t in range(half, s):
            term *= _w(weights, graph, s, t, skip) ** 2
        total += term
    return 0.75 * c_sigma * lam_min_k * total


def compare_shallow_deep(weights, h: int, lam_min_k: float, c_sigma: float = 1.0) -> tuple[float, float, bool]:
    """Deep single-branch cell A vs two-branch shallow cell B sharing the same gate values."""
    if h % 2:
        raise ValueError(f"h must be even, got {h}")
    lam_a = lambda_theorem1(weights, h, lam_min_k, c_sigma)
    lam_b = lam_a + second_branch_term(weights, h, lam_min_k, c_sigma)
    return lam_a, lam_b, lam_b >= lam_a


def _min_eig_2x2(a: float, b: float, d: float) -> float:
    """Smallest eigenvalue of [[a, b], [b, d]]."""
    return 0.5 * (a + d - math.hypot(a - d, 2.0 * b))


def lambda_min_K(inputs: np.ndarray, form: str = "printed") -> float:
    """Min over sample pairs i != j of the smallest eigenvalue of the 2x2 pair matrix.

    ``form="printed"`` uses [[<Xi,Xj>, <Xi,Xj>], [<Xj,Xi>, <Xj,Xj>]];
    ``form="symmetric"`` uses the pair Gram matrix [[<Xi,Xi>, <Xi,Xj>], [<Xj,Xi>, <Xj,Xj>]].
    """
    flat = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    n = len(flat)
    if n < 2:
        raise ValueError("need at least two samples")
    gram = flat @ flat.T
    best = math.inf
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            c = gram[i, j]
            if abs(c) >= math.sqrt(gram[i, i] * gram[j, j]) * (1 - 1e-12):
                warnings.warn(f"samples {i} and {j} are parallel", RuntimeWarning, stacklevel=2)
            a = c if form == "printed" else gram[i, i]
            best = min(best, _min_eig_2x2(a, c, gram[j, j]))
    return best


# -- Gram matrix and contraction -------------------------------------------------
def per_sample_vectors(net: SuperNet, x: np.ndarray, y: np.ndarray, weights: dict) -> list[np.ndarray]:
    params = net.weight_params()

    def build(i):
        return train_loss(net.forward(x[i : i + 1], weights=weights).u, y[i : i + 1])

    return ad.per_sample_gradients(build, range(len(y)), params)


def gram_matrix(net: SuperNet, x: np.ndarray, y: np.ndarray, weights: dict) -> tuple[np.ndarray, float]:
    """``G_ij = <grad l_i, grad l_j>`` over all network weights, and its smallest eigenvalue."""
    vecs = np.stack(per_sample_vectors(net, x, y, weights))
    g = vecs @ vecs.T
    return g, float(np.linalg.eigvalsh(0.5 * (g + g.T))[0])


@dataclass
class ContractionResult:
    losses: list[float]
    ratios: list[float]
    max_ratio: float
    geometric_mean: float
    diverged: bool


def measure_contraction(net: SuperNet, x: np.ndarray, y: np.ndarray, weights: dict,
                        lr: float, steps: int) -> ContractionResult:
    """Full-batch gradient descent on the network weights with fixed architecture weights."""
    params = net.weight_params()
    losses = []
    for _ in range(steps + 1):
        try:
            loss = train_loss(net.forward(x, weights=weights).u, y)
        except ad.NonFiniteError:
            losses.append(math.inf)
            break
        losses.append(loss.item())
        if len(losses) == steps + 1:
            break
        grads = ad.grad(loss, params)
        for p, g in zip(params, grads):
            p.data -= lr * g
    ratios = [b / a if a > 0 else 1.0 for a, b in zip(losses, losses[1:])]
    if not math.isfinite(losses[-1]):
        return ContractionResult(losses, ratios, math.inf, math.inf, True)
    if not ratios:
        return ContractionResult(losses, [], 1.0, 1.0, False)
    geo = float(np.exp(np.mean(np.log(np.maximum(ratios, 1e-300)))))
    diverged = sum(r > 1.0 for r in ratios) > len(ratios) // 2
    return ContractionResult(losses, ratios, max(ratios), geo, diverged)


# -- gate sensitivity --------------------------------------------------------------
@dataclass
class SensitivityResult:
    analytic: np.ndarray
    forward_difference: np.ndarray
    central_difference: np.ndarray
    by_kind: dict[str, dict[str, float]]


def gate_sensitivity(net: SuperNet, x: np.ndarray, y: np.ndarray, gates: np.ndarray,
                     eps: float = 1e-3, fd_step: float = 1e-5) -> SensitivityResult:
    """dF/dg for every gate with the network weights held fixed."""
    gates = np.asarray(gates, dtype=np.float64)
    leaf = ad.parameter(gates.copy(), "gates")
    loss = train_loss(net.forward(x, weights={"normal": leaf}).u, y)
    analytic = ad.grad(loss, [leaf])[0]

    def f(gv):
        return train_loss(net.forward(x, weights={"normal": gv}).u, y).item()

    base = f(gates)
    fwd = np.zeros_like(gates)
    central = np.zeros_like(gates)
    for idx in np.ndindex(gates.shape):
        gp, gm, ge = gates.copy(), gates.copy(), gates.copy()
        gp[idx] += fd_step
        gm[idx] -= fd_step
        ge[idx] += eps
        central[idx] = (f(gp) - f(gm)) / (2 * fd_step)
        fwd[idx] = (f(ge) - base) / eps
    by_kind = {}
    for t, op in enumerate(net.graph.ops):
        col = analytic[:, t]
        by_kind[op.label] = {
            "mean": float(col.mean()),
            "fraction_negative": float((col < 0).mean()),
            "fraction_positive": float((col > 0).mean()),
        }
    return SensitivityResult(analytic, fwd, central, by_kind)


# -- experiments -----------------------------------------------------------------
def random_weighting(graph: CellGraph, rng: np.random.Generator, kind: str = "softmax", scale: float = 2.0) -> np.ndarray:
    """Random architecture weights: per-edge softmax of N(0, scale^2) logits, or iid uniform gates."""
    if kind == "uniform":
        return rng.random((graph.num_edges, graph.r))
    z = scale * rng.standard_normal((graph.num_edges, graph.r))
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def theory_dataset(cfg: TheoryConfig, seed: int | None = None) -> Dataset:
    return generate_synthetic(cfg.n, cfg.m_in, cfg.p, seed=cfg.seed if seed is None else seed)


def lambda_contraction_study(cfg: TheoryConfig, weightings: int | None = None) -> dict:
    """Pair the closed-form factor with measured contraction over random weightings.

    Network weights and data are shared across weightings so that only the
    architecture weights change. Returns per-weighting rows and the Spearman
    correlation between the factor and the measured rate ``-log(geo-mean ratio)``.
    """
    from scipy.stats import spearmanr

    weightings = cfg.weightings if weightings is None else weightings
    ds = theory_dataset(cfg)
    # the printed pair matrix can have a negative eigenvalue, which would flip the ordering
    lam_k = lambda_min_K(ds.inputs, form="symmetric")
    base = build_multi_cell(cfg.network(cells=1), np.random.default_rng(cfg.seed))
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    for i in range(weightings):
        w = random_weighting(base.graph, rng, cfg.weighting_kind)
        lam = lambda_theorem1(w, cfg.h, lam_k, cfg.c_sigma)
        net = base.copy()
        res = measure_contraction(net, ds.inputs, ds.targets, {"normal": w}, cfg.lr, cfg.steps)
        rows.append(
            {
                "weighting": i,
                "lambda": lam,
                "geo_mean_ratio": res.geometric_mean,
                "max_ratio": res.max_ratio,
                "rate": -math.log(res.geometric_mean),
                "diverged": res.diverged,
            }
        )
    rho = spearmanr([r["lambda"] for r in rows], [r["rate"] for r in rows]).statistic
    return {"rows": rows, "spearman": float(rho), "lambda_min_k": lam_k}


def fixed_cell_weights(graph: CellGraph, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Discrete two-input-per-node cell with ``fraction`` of its ops set to skip, the rest conv.

    Node ``l`` reads from nodes ``l-1`` and ``max(l-2, 0)``.
    """
    slots = []
    for l in graph.intermediate_nodes:
        for s in (l - 1, max(l - 2, 0)):
            slots.append((graph.edge_index(s, l), l))
    k = int(round(fraction * len(slots)))
    skip_slots = set(rng.choice(len(slots), size=k, replace=False).tolist())
    w = np.zeros((graph.num_edges, graph.r))
    for i, (e, _) in enumerate(slots):
        w[e, SKIP if i in skip_slots else CONV] += 1.0
    return w


def skip_fraction_experiment(fractions, trials: int, cfg: TheoryConfig, h: int = 5,
                             cells: int | None = None) -> dict[float, np.ndarray]:
    """Loss curves (trials x steps+1) for cells whose ops are a given share of skips."""
    curves: dict[float, np.ndarray] = {}
    for frac in fractions:
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"fraction {frac} outside [0, 1]")
        rows = []
        for trial in range(trials):
            seed = cfg.seed + 1000 * trial
            ds = generate_synthetic(cfg.n, cfg.m_in, cfg.p, seed=seed)
            net = build_multi_cell(cfg.network(h=h, cells=cells), np.random.default_rng(seed + 1))
            w = fixed_cell_weights(net.graph, frac, np.random.default_rng(seed + 2))
            res = measure_contraction(net, ds.inputs, ds.targets, {"normal": w}, cfg.lr, cfg.steps)
            rows.append(res.losses)
        curves[frac] = np.asarray(rows)
    return curves
