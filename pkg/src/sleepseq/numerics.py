"""Reverse-mode automatic differentiation over dense numpy arrays.

The substrate is deliberately small: exactly the operator set the staging
network needs (matmul, bias add, sigmoid/tanh/relu/softplus, concat, slice,
reshape, softmax-over-axis, weighted sum, dropout, reductions, cross entropy
from logits). A :class:`Tensor` wraps an ndarray plus the backward closure of
the op that produced it; ``Tensor.backward()`` walks the graph in reverse
topological order and accumulates gradients on every reachable tensor whose
``requires_grad`` flag is set.

Conventions:

* Storage dtype follows the leaf tensors: float32 for training, float64 for
  gradient checking. Reduction ops accumulate in float64 either way.
* Every op checks its output for NaN/Inf and raises ``NonFiniteValue`` at the
  first offender. ``set_finite_trap(False)`` disables the check.
* Frozen parameters keep ``requires_grad=False``: gradients still flow
  *through* the ops that consume them, but nothing is accumulated on the
  parameter itself, so a frozen group can never receive an update.
* Inference runs under ``no_grad()``: the same numpy calls execute in the
  same order, so values are bit-identical to a grad-enabled forward pass,
  only the closures are skipped.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes; the message names both."""


class GraphNotEvaluated(RuntimeError):
    """backward() was called on a tensor with no recorded forward graph."""


class NonFiniteValue(FloatingPointError):
    """An op produced NaN or Inf while the finite trap was enabled."""


_FINITE_TRAP = True
_GRAD_ENABLED = True


def set_finite_trap(enabled: bool) -> None:
    global _FINITE_TRAP
    _FINITE_TRAP = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self._backward is None and not self._parents:
            raise GraphNotEvaluated(
                "tensor has no recorded graph; run a grad-enabled forward pass first"
            )
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and (
                    parent.requires_grad or parent._parents
                ):
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _check_finite(data, op: str) -> None:
    if _FINITE_TRAP and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"non-finite values produced by op '{op}'")


def _make(data, parents, backward, op: str) -> Tensor:
    data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, constant(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return constant(np.asarray(a, dtype=b.data.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


# elementwise and linear ops ------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.data.shape} with {b.data.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: cannot broadcast {a.data.shape} with {b.data.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, -_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``a`` is 2-D or 3-D and ``b`` is a 2-D weight matrix."""
    if a.data.ndim < 2 or b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad or b._parents:
            axes = tuple(range(a.data.ndim - 1))
            _accumulate(b, np.tensordot(a.data, g, axes=(axes, axes)))

    return _make(out, (a, b), backward, "matmul")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - t * t))

    return _make(t, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(out, (x,), backward, "relu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), linearized above 30 to avoid overflow."""
    d = x.data
    out = np.where(d > 30.0, d, np.log1p(np.exp(np.minimum(d, 30.0))))

    def backward(g):
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-d))
        _accumulate(x, g * s)

    return _make(out, (x,), backward, "softplus")


# shape ops ------------------------------------------------------------


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            _accumulate(p, piece)

    return _make(out, tuple(parts), backward, "concat")


def take_index(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along ``axis``, dropping that axis."""
    key = (slice(None),) * axis + (index,)
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)

    return _make(out, (x,), backward, "take_index")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``, keeping the axis."""
    key = (slice(None),) * axis + (slice(start, stop),)
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)

    return _make(out, (x,), backward, "slice_axis")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), backward, "reshape")


# reductions and classification ops ------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=x.data.dtype)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), backward, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n
    out = np.asarray(out, dtype=x.data.dtype)

    def backward(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), backward, "reduce_mean")


def l2_norm_squared(x: Tensor) -> Tensor:
    """Sum of squared entries, accumulated in float64."""
    d64 = x.data.astype(np.float64, copy=False)
    out = np.asarray(np.sum(d64 * d64), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, 2.0 * x.data * g)

    return _make(out, (x,), backward, "l2_norm_squared")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _make(s, (x,), backward, "softmax")


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Summed cross entropy over rows; computed from log-softmax directly.

    ``targets`` is a constant one-hot (or soft) array of the same shape.
    Never takes log of a stored probability, so a confident prediction
    cannot produce log(0).
    """
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ShapeMismatch(
            f"cross_entropy: logits {logits.data.shape} vs targets {y.shape}"
        )
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    log_probs = (z - m) - np.log(denom)
    probs = e / denom
    per_row = -np.sum(y * log_probs, axis=-1, dtype=np.float64)
    out = np.asarray(np.sum(per_row, dtype=np.float64), dtype=logits.data.dtype)

    def backward(g):
        _accumulate(logits, (probs - y) * g)

    return _make(out, (logits,), backward, "cross_entropy")


def dropout(x: Tensor, rate: float, rng=None, mask=None, training: bool = True) -> Tensor:
    """Inverted dropout: identity at inference, mask/(1-rate) in training."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng or explicit mask")
        mask = rng.random(x.data.shape) >= rate
    m = np.asarray(mask, dtype=x.data.dtype) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * m)

    return _make(x.data * m, (x,), backward, "dropout")


def weighted_sum(weights: Tensor, vectors) -> Tensor:
    """sum_t weights[:, t] * vectors[t]  for a list of (B, D) tensors."""
    vectors = list(vectors)
    if weights.data.shape[1] != len(vectors):
        raise ShapeMismatch(
            f"weighted_sum: {weights.data.shape[1]} weights vs {len(vectors)} vectors"
        )
    out = None
    for t, vec in enumerate(vectors):
        term = mul(slice_axis(weights, 1, t, t + 1), vec)
        out = term if out is None else add(out, term)
    return out


# gradient checking -----------------------------------------------------


def finite_difference_check(loss_fn, tensors, eps: float = 1e-3):
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to leaf tensors; every coordinate of every tensor
    is perturbed by +/- eps. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|). Returns
    ``(max_rel_err, per_tensor_max)``. Use float64 tensors for meaningful
    tolerances.
    """
    if not isinstance(tensors, dict):
        tensors = {f"t{i}": t for i, t in enumerate(tensors)}
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }
    worst = 0.0
    per_tensor = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        tensor_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn().data)
                flat[i] = orig - eps
                f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(float(ana[i]) - numeric) / max(1.0, abs(float(ana[i])), abs(numeric))
            tensor_worst = max(tensor_worst, rel)
        per_tensor[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return worst, per_tensor
