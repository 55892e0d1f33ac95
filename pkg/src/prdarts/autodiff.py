"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
parents together with a closure mapping the upstream gradient to the
gradient for that parent; :func:`backward` walks the graph in reverse
topological order and accumulates into ``.grad``.

Broadcasting follows numpy. Gradients flowing into a broadcast operand are
summed back to its original shape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

GradFn = Callable[[np.ndarray], np.ndarray]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient history."""

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: Sequence[tuple["Tensor", GradFn]] = (),
        _op: str = "leaf",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in _parents)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents = [(p, fn) for p, fn in _parents if p.requires_grad]
        self._op = _op
        if _op != "leaf":
            _check_finite(self.data, _op)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(
            a.data + b.data,
            _parents=[
                (a, lambda g: _unbroadcast(g, a.shape)),
                (b, lambda g: _unbroadcast(g, b.shape)),
            ],
            _op="add",
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=[(self, lambda g: -g)], _op="neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(
            a.data * b.data,
            _parents=[
                (a, lambda g: _unbroadcast(g * b.data, a.shape)),
                (b, lambda g: _unbroadcast(g * a.data, b.shape)),
            ],
            _op="mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor(
            a.data / b.data,
            _parents=[
                (a, lambda g: _unbroadcast(g / b.data, a.shape)),
                (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            ],
            _op="div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        a = self

        def grad_fn(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return out

        return Tensor(a.data[index], _parents=[(a, grad_fn)], _op="getitem")

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape).copy()

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=[(a, grad_fn)], _op="sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; ties split the gradient evenly."""
        a = self
        out = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == out).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)

        def grad_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return mask * g

        value = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor(value, _parents=[(a, grad_fn)], _op="max")

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(
            a.data.reshape(shape), _parents=[(a, lambda g: g.reshape(a.shape))], _op="reshape"
        )

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        return Tensor(
            np.swapaxes(a.data, ax1, ax2),
            _parents=[(a, lambda g: np.swapaxes(g, ax1, ax2))],
            _op="swapaxes",
        )

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def square(self):
        a = self
        return Tensor(a.data * a.data, _parents=[(a, lambda g: 2.0 * a.data * g)], _op="square")


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return Tensor(a.data @ b.data, _parents=[(a, grad_a), (b, grad_b)], _op="matmul")


# -- elementwise nonlinearities ----------------------------------------------
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, _parents=[(x, lambda g: g * out)], _op="exp")


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), _parents=[(x, lambda g: g / x.data)], _op="log")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(np.asarray(x.data, dtype=np.float64).reshape(-1)).reshape(x.shape)
    return Tensor(out, _parents=[(x, lambda g: g * out * (1.0 - out))], _op="sigmoid")


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.logaddexp(0.0, z)
    s = _sigmoid(z.reshape(-1)).reshape(z.shape)
    return Tensor(out, _parents=[(x, lambda g: g * s)], _op="softplus")


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return Tensor(x.data * mask, _parents=[(x, lambda g: g * mask)], _op="relu")


def identity(x: Tensor) -> Tensor:
    return x


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    mask = ((x.data > lo) & (x.data < hi)).astype(np.float64)
    return Tensor(np.clip(x.data, lo, hi), _parents=[(x, lambda g: g * mask)], _op="clip")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)
    parents = []
    for i, t in enumerate(tensors):
        parents.append((t, lambda g, i=i: np.take(g, i, axis=axis)))
    return Tensor(data, _parents=parents, _op="stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        parents.append(
            (t, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis))
        )
    return Tensor(data, _parents=parents, _op="concat")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "softplus": softplus,
    "relu": relu,
    "sigmoid": sigmoid,
    "identity": identity,
}


# -- backward -------------------------------------------------------------
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a mapping from leaf name (or ``id`` string for unnamed leaves) to
    its gradient. Leaves listed in ``params`` but not reachable from ``root``
    get an explicit zero gradient.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            grads[id(node)] = g
            continue
        for parent, fn in node._parents:
            pg = fn(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out: dict[str, np.ndarray] = {}
    for node in order:
        if node.is_leaf and node.requires_grad:
            out[node.name or str(id(node))] = node.grad
    for p in params or ():
        key = p.name or str(id(p))
        if key not in out:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out[key] = p.grad
    return out


def grad(root: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``params`` without leaving state behind."""
    for p in params:
        p.grad = None
    backward(root, params)
    out = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out


def per_sample_gradients(
    loss_builder: Callable[[object], Tensor],
    samples: Sequence[object],
    params: Sequence[Tensor],
) -> list[np.ndarray]:
    """One flattened gradient vector per sample, in ``params`` order.

    ``loss_builder(sample)`` must build a fresh scalar graph over ``params``.
    Vectors are returned in ascending sample index.
    """
    vectors = []
    for sample in samples:
        gs = grad(loss_builder(sample), params)
        vectors.append(np.concatenate([g.reshape(-1) for g in gs]))
    return vectors


def finite_difference(
    fn: Callable[[], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central differences of a scalar function w.r.t. array ``x`` (mutated in place and restored)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out
