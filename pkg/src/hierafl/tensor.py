"""Small reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` wraps a numpy array and remembers the primitive that
produced it.  ``backward(loss)`` walks the recorded graph in reverse
topological order and returns gradients for every named trainable leaf.

Only what the multi-exit network and the distillation losses need is here:
affine layers, ReLU, softmax family, a few elementwise ops and the fused
losses (cross-entropy, KL, MSE).
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

ParameterStore = dict[str, np.ndarray]
GradientMap = dict[str, np.ndarray]

# log() clamps its argument here so fully-underflowed mixtures stay finite.
_TINY = np.finfo(np.float64).tiny


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str) -> Tensor:
    """A trainable leaf that will show up in ``backward``'s result under ``name``."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def bind(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap every array of a store as a named trainable leaf."""
    return {k: parameter(v, k) for k, v in params.items()}


def _node(data, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=parents if needs else (),
        _backward=backward_fn if needs else None,
        op=op,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), back, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear_forward(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape (B, d_in), W (d_in, d_out), b (d_out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"linear: expected x 2-D, W 2-D, b 1-D; got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"linear: dimension mismatch x{x.shape} @ W{W.shape} + b{b.shape}"
        )

    def back(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ W.data + b.data, (x, W, b), back, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    logits = as_tensor(logits)
    if logits.data.ndim == 0 or logits.shape[-1] < 1:
        raise ValueError(f"softmax: need at least one class, got shape {logits.shape}")
    s = _softmax_rows(logits.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (logits,), back, "softmax")


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    ls = _log_softmax_rows(logits.data)
    s = np.exp(ls)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _node(ls, (logits,), back, "log_softmax")


def log(x) -> Tensor:
    x = as_tensor(x)
    safe = np.maximum(x.data, _TINY)
    return _node(np.log(safe), (x,), lambda g: (g / safe,), "log")


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), back, "reduce_sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def back(g):
        return (np.full(x.shape, g / n),)

    return _node(x.data.mean(), (x,), back, "mean")


def pick(x, labels: Sequence[int]) -> Tensor:
    """Select ``x[r, labels[r]]`` for every row r."""
    x = as_tensor(x)
    rows = np.arange(x.shape[0])
    idx = np.asarray(labels, dtype=np.int64)

    def back(g):
        full = np.zeros(x.shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _node(x.data[rows, idx], (x,), back, "pick")


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise ValueError(f"expected {batch} labels, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    B, C = logits.shape
    y = _check_labels(labels, B, C)
    ls = _log_softmax_rows(logits.data)
    value = -ls[np.arange(B), y].mean()

    def back(g):
        grad = np.exp(ls)
        grad[np.arange(B), y] -= 1.0
        return (grad * (g / B),)

    return _node(value, (logits,), back, "cross_entropy")


def kl_divergence(teacher_probs, student_logits) -> Tensor:
    """Batch mean of ``KL(teacher || softmax(student))``.

    The teacher is always treated as a constant.  Terms with a zero teacher
    probability contribute nothing.  The student gradient is
    ``(softmax(student) - teacher) / B``, which is exact for teacher rows that
    sum to one.
    """
    t = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    student_logits = as_tensor(student_logits)
    if t.shape != student_logits.shape or t.ndim != 2:
        raise ValueError(
            f"kl_divergence: teacher {t.shape} and student {student_logits.shape} must be equal 2-D shapes"
        )
    if (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise ValueError("kl_divergence: teacher rows must be probability distributions")
    B = t.shape[0]
    ls = _log_softmax_rows(student_logits.data)
    s = _softmax_rows(student_logits.data)
    pos = t > 0
    log_t = np.log(np.where(pos, t, 1.0))
    value = np.where(pos, t * (log_t - ls), 0.0).sum() / B

    def back(g):
        return ((s - t) * (g / B),)

    return _node(value, (student_logits,), back, "kl_divergence")


def mean_squared_error(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mean_squared_error: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _node((diff * diff).mean(), (a, b), back, "mse")


# ---------------------------------------------------------------------------
# reverse pass and optimiser
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar ``loss`` for every named trainable leaf it depends on."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: GradientMap = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                out[node.name] = out[node.name] + g if node.name in out else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> ParameterStore:
    """Return a new store with ``p - lr * g`` for every keyed parameter."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    unknown = [k for k in grads if k not in params]
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    new = dict(params)
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        new[k] = params[k] - lr * g
    return new
