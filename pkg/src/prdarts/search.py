"""Alternating first-order bi-level search in softmax (darts) and gated (prdarts) modes.

Each iteration takes one step on the network weights using a training
mini-batch, then one step on the architecture logits using a validation
mini-batch with the weights held fixed (no unrolled second-order term).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .cell import GATES, SOFTMAX, NetworkConfig, SuperNet, build_multi_cell, softmax_weights
from .dataio import Dataset
from .gates import (
    TAU_END,
    TAU_START,
    activation_probability_tensor,
    anneal_temperature,
    linear_schedule,
    sample_gates,
)
from .regularizers import LAMBDA_NON_SKIP, LAMBDA_PATH, LAMBDA_SKIP, pr_darts_objective, regularizer_terms

DARTS = "darts"
PRDARTS = "prdarts"

TRACE_HEADER = (
    "step",
    "epoch",
    "temperature",
    "f_train",
    "f_val",
    "l_skip",
    "l_non_skip",
    "l_path",
    "mean_skip",
    "mean_non_skip",
)


class DivergenceError(FloatingPointError):
    pass


# -- optimizers -----------------------------------------------------------------
class SGD:
    """Gradient descent with optional heavy-ball momentum and L2 weight decay."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params, grads, lr=None, masks=None):
        lr = self.lr if lr is None else lr
        for i, (p, g) in enumerate(zip(params, grads)):
            if masks is not None and masks[i] is not None and not np.any(masks[i]):
                continue
            d = g + self.weight_decay * p.data if self.weight_decay else g
            if self.momentum:
                v = self._velocity.get(i)
                v = d.copy() if v is None else self.momentum * v + d
                self._velocity[i] = v
                d = v
            p.data -= lr * d

    def state_dict(self) -> dict:
        return {str(k): v.tolist() for k, v in sorted(self._velocity.items())}


class Adam:
    """Per-coordinate first/second moment scaling. ``masks`` freeze entries."""

    def __init__(self, lr: float, betas=(0.5, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, np.ndarray] = {}

    def step(self, params, grads, lr=None, masks=None):
        lr = self.lr if lr is None else lr
        for i, (p, g) in enumerate(zip(params, grads)):
            mask = np.ones(p.shape, bool) if masks is None or masks[i] is None else np.asarray(masks[i], bool)
            d = g + self.weight_decay * p.data if self.weight_decay else g
            m = self._m.setdefault(i, np.zeros_like(p.data))
            v = self._v.setdefault(i, np.zeros_like(p.data))
            t = self._t.setdefault(i, np.zeros_like(p.data))
            m[mask] = self.b1 * m[mask] + (1 - self.b1) * d[mask]
            v[mask] = self.b2 * v[mask] + (1 - self.b2) * d[mask] ** 2
            t[mask] += 1
            tm = t[mask]
            mhat = m[mask] / (1 - self.b1**tm)
            vhat = v[mask] / (1 - self.b2**tm)
            p.data[mask] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


# -- configuration ------------------------------------------------------------
@dataclass
class SearchConfig:
    mode: str = PRDARTS
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr_w: float = 0.025
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    grad_clip: float | None = 5.0
    lr_schedule: str = "cosine"
    lr_beta: float = 3e-4
    beta_betas: tuple[float, float] = (0.5, 0.999)
    weight_decay_beta: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    warmup_epochs: int = 0
    lambda1: float = LAMBDA_SKIP
    lambda2: float = LAMBDA_NON_SKIP
    lambda3: float = LAMBDA_PATH
    tau_start: float = TAU_START
    tau_end: float = TAU_END
    ops_per_edge_sampled: int | None = None
    gate_noise: bool = True
    seed: int = 0
    split_ratio: float = 0.5

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        self.beta_betas = tuple(self.beta_betas)
        if self.mode not in (DARTS, PRDARTS):
            raise ValueError(f"mode must be 'darts' or 'prdarts', got {self.mode!r}")
        want = GATES if self.mode == PRDARTS else SOFTMAX
        if self.network.mode != want:
            self.network = NetworkConfig(**{**asdict(self.network), "mode": want})
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or null")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_betas"] = list(self.beta_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        d = dict(d)
        if "network" in d:
            nknown = {f.name for f in fields(NetworkConfig)}
            bad = set(d["network"]) - nknown
            if bad:
                raise ValueError(f"unknown network config keys: {sorted(bad)}")
        return cls(**d)


# -- data split / op subsampling ----------------------------------------------------
def split_dataset(dataset: Dataset, ratio: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation split; train gets ``round(ratio * n)`` samples."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(ratio * n))
    train_idx, val_idx = np.sort(perm[:k]), np.sort(perm[k:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def subsample_edge_ops(r: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of ``count`` uniformly chosen ops out of ``r`` for one edge."""
    if count < 1 or count > r:
        raise ValueError(f"need 1 <= count <= {r}, got {count}")
    mask = np.zeros(r, dtype=bool)
    mask[rng.choice(r, size=count, replace=False)] = True
    return mask


def _active_masks(net: SuperNet, count: int | None, rng: np.random.Generator) -> dict[str, np.ndarray] | None:
    r = net.graph.r
    if count is None or count >= r:
        return None
    return {
        kind: np.stack([subsample_edge_ops(r, count, rng) for _ in range(net.graph.num_edges)])
        for kind in sorted(net.betas)
    }


# -- state and trace -----------------------------------------------------------
@dataclass
class TraceRecord:
    step: int
    epoch: int
    temperature: float
    f_train: float
    f_val: float
    l_skip: float
    l_non_skip: float
    l_path: float
    mean_skip: float
    mean_non_skip: float

    def row(self) -> list:
        return [getattr(self, k) for k in TRACE_HEADER]


@dataclass
class SearchState:
    config: SearchConfig
    net: SuperNet
    opt_w: SGD
    opt_beta: Adam
    total_steps: int
    step: int = 0
    rng_gates: np.random.Generator = field(default_factory=np.random.default_rng)
    rng_ops: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def temperature(self) -> float:
        if self.total_steps == 0:
            return self.config.tau_start
        sched = linear_schedule(self.config.tau_start, self.config.tau_end)
        return anneal_temperature(min(self.step, self.total_steps), self.total_steps, sched)

    def lr_w(self) -> float:
        if self.config.lr_schedule == "constant" or self.total_steps == 0:
            return self.config.lr_w
        return 0.5 * self.config.lr_w * (1.0 + math.cos(math.pi * self.step / self.total_steps))


def _seeds(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def init_state(config: SearchConfig, total_steps: int) -> SearchState:
    rng_init, _, rng_gates, rng_ops = _seeds(config.seed)
    net = build_multi_cell(config.network, rng_init)
    return SearchState(
        config=config,
        net=net,
        opt_w=SGD(config.lr_w, config.momentum, config.weight_decay_w),
        opt_beta=Adam(config.lr_beta, config.beta_betas, weight_decay=config.weight_decay_beta),
        total_steps=total_steps,
        rng_gates=rng_gates,
        rng_ops=rng_ops,
    )


def group_means(net: SuperNet, tau_g: float) -> tuple[float, float]:
    """Mean skip / non-skip score: softmax weight in DARTS mode, activation probability with gates."""
    g = net.graph
    skip, non = [], []
    for kind in sorted(net.betas):
        beta = net.betas[kind]
        if g.mode == SOFTMAX:
            w = softmax_weights(beta.data).data
        else:
            w = activation_probability_tensor(beta.data, tau_g, net.config.gate_a, net.config.gate_b).data
        sk = np.zeros(g.r, bool)
        sk[g.skip_indices] = True
        skip.append(w[:, sk].reshape(-1))
        non.append(w[:, ~sk].reshape(-1))
    s, n = np.concatenate(skip), np.concatenate(non)
    return (float(s.mean()) if s.size else 0.0, float(n.mean()) if n.size else 0.0)


def _forward_kwargs(state: SearchState, active, tau_g: float) -> dict:
    net = state.net
    if net.graph.mode == GATES and not state.config.gate_noise:
        weights = {}
        for kind, beta in net.betas.items():
            u = np.full(beta.shape, 0.5)
            g = sample_gates(beta, tau_g, state.rng_gates, net.config.gate_a, net.config.gate_b, uniform=u)
            weights[kind] = g if active is None else g * active[kind].astype(np.float64)
        return {"weights": weights}
    return {"rng": state.rng_gates, "active": active, "tau_g": tau_g}


def search_step(
    state: SearchState,
    train_batch: tuple[np.ndarray, np.ndarray],
    val_batch: tuple[np.ndarray, np.ndarray],
    epoch: int = 0,
    update_arch: bool = True,
) -> TraceRecord:
    """One W step on ``train_batch`` then (optionally) one logit step on ``val_batch``."""
    cfg, net = state.config, state.net
    tau_g = state.temperature
    active = _active_masks(net, cfg.ops_per_edge_sampled, state.rng_ops)
    wparams = net.weight_params()
    aparams = net.arch_params()
    try:
        # weight step
        f_train = net.loss(*train_batch, **_forward_kwargs(state, active, tau_g))
        gw = clip_global_norm(ad.grad(f_train, wparams), cfg.grad_clip)
        masks = None
        if active is not None:
            masks = [None] * len(wparams)
            conv_ids = {}
            for c, ws in enumerate(net.conv_weights):
                for (e, t), w in ws.items():
                    conv_ids[id(w)] = active[net.cell_type(c)][e, t]
            masks = [np.array(conv_ids.get(id(p), True)) for p in wparams]
        state.opt_w.step(wparams, gw, lr=state.lr_w(), masks=masks)

        # architecture step, first-order: W treated as constant
        f_val = net.loss(*val_batch, **_forward_kwargs(state, active, tau_g))
        reg = {"l_skip": Tensor(0.0), "l_non_skip": Tensor(0.0), "l_path": Tensor(0.0)}
        objective = f_val
        if cfg.mode == PRDARTS:
            reg = regularizer_terms(net.graph, net.betas, tau_g, net.config.gate_a, net.config.gate_b)
            objective = pr_darts_objective(
                f_val, reg["l_skip"], reg["l_non_skip"], reg["l_path"], cfg.lambda1, cfg.lambda2, cfg.lambda3
            )
        if update_arch:
            ga = ad.grad(objective, aparams)
            amasks = None
            if active is not None:
                amasks = [active[k] for k in sorted(net.betas)]
                ga = [g * m for g, m in zip(ga, amasks)]
            state.opt_beta.step(aparams, ga, masks=amasks)
    except NonFiniteError as exc:
        raise DivergenceError(f"non-finite value at step {state.step}: {exc}") from exc

    for v in (f_train.item(), f_val.item()):
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite loss at step {state.step}")
    mean_skip, mean_non = group_means(net, tau_g)
    rec = TraceRecord(
        step=state.step,
        epoch=epoch,
        temperature=tau_g,
        f_train=f_train.item(),
        f_val=f_val.item(),
        l_skip=reg["l_skip"].item(),
        l_non_skip=reg["l_non_skip"].item(),
        l_path=reg["l_path"].item(),
        mean_skip=mean_skip,
        mean_non_skip=mean_non,
    )
    state.step += 1
    return rec


@dataclass
class SearchResult:
    config: SearchConfig
    net: SuperNet
    trace: list[TraceRecord]
    final_temperature: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def run_search(config: SearchConfig, dataset: Dataset) -> SearchResult:
    """Full alternating search; deterministic for a fixed config and dataset."""
    train, val = split_dataset(dataset, config.split_ratio, config.seed)
    if len(val) == 0:
        raise ValueError("validation split is empty")
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = config.epochs * steps_per_epoch
    state = init_state(config, total)
    _, rng_data, _, _ = _seeds(config.seed)
    trace: list[TraceRecord] = []
    for epoch in range(config.epochs):
        tb = _batches(len(train), config.batch_size, rng_data)
        vb = _batches(len(val), config.batch_size, rng_data)
        for i, idx in enumerate(tb):
            vidx = vb[i % len(vb)]
            rec = search_step(
                state,
                (train.inputs[idx], train.targets[idx]),
                (val.inputs[vidx], val.targets[vidx]),
                epoch=epoch,
                update_arch=epoch >= config.warmup_epochs,
            )
            trace.append(rec)
    return SearchResult(config, state.net, trace, state.temperature)
