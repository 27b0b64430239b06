"""Dense tensors with define-by-run reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass: each op output remembers its
inputs, a backward closure, and a global sequence number. ``backward``
collects the ops reachable from a scalar loss, orders them by sequence
number (execution order is a valid topological order) and walks that
record exactly once in reverse, accumulating gradients additively into
every tensor that requires them.

Tensors hold float32 data by default; gradient checking runs in float64.
Ops never mutate their inputs, so a repeated forward pass with the same
inputs is bit-identical.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NumericalError, ShapeError

_seq = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    """One recorded differentiable op: inputs, backward closure, execution index."""

    __slots__ = ("inputs", "backward_fn", "seq")

    def __init__(self, inputs, backward_fn, seq):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq


class Tensor:
    """A dense row-major array with optional gradient tracking.

    ``data`` is float32 or float64 and must be finite on construction;
    non-finite values are an error state, never silently stored.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, no graph attachment, no gradient tracking."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _from_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording graph state when grads are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(tuple(inputs), backward_fn, next(_seq))
    else:
        out.requires_grad = False
        out._node = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor):
    """Propagate d(loss)/d(tensor) to every requires-grad tensor feeding ``loss``.

    Gradients of tensors used more than once accumulate additively. The loss
    must be scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return

    # Collect reachable recorded ops; execution order == topological order.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    nodes.sort(key=lambda pair: pair[0].seq)

    loss.grad = np.ones_like(loss.data)
    for node, out in reversed(nodes):
        if out.grad is None:
            continue
        grads = node.backward_fn(out.grad)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                _accumulate(inp, g)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a[r,k] and b[k,c]; gradients dA = g·Bᵀ, dB = Aᵀ·g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _from_op(ad @ bd, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: x[n,d] + b[d]."""
    if b.data.ndim != 1 or x.data.ndim != 2 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.data.shape} + {b.data.shape}")

    def back(g):
        return g, g.sum(axis=0)

    return _from_op(x.data + b.data, (x, b), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def back(g):
        return (g * (xd > 0),)

    return _from_op(np.maximum(xd, 0), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+e^-x), stable on both tails."""
    s = kernels.sigmoid(x.data)

    def back(g):
        return (g * s * (1 - s),)

    return _from_op(s, (x,), back)


def softplus(x: Tensor) -> Tensor:
    """Elementwise log(1+e^x); derivative is the sigmoid."""
    xd = x.data

    def back(g):
        return (g * kernels.sigmoid(xd),)

    return _from_op(kernels.softplus(xd), (x,), back)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def back(g):
        return (g * 2 * xd,)

    return _from_op(xd * xd, (x,), back)


def mean(x: Tensor) -> Tensor:
    """Mean over all elements; returns a scalar tensor."""
    xd = x.data
    n = xd.size

    def back(g):
        return (np.full_like(xd, g / n),)

    return _from_op(np.asarray(xd.mean(), dtype=xd.dtype), (x,), back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two batches along the row axis, a's rows first."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows shapes incompatible: {a.data.shape} | {b.data.shape}")
    na = a.data.shape[0]

    def back(g):
        return g[:na], g[na:]

    return _from_op(np.concatenate([a.data, b.data], axis=0), (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def back(g):
        return g, g

    return _from_op(a.data + b.data, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""

    def back(g):
        return (g * c,)

    return _from_op(x.data * c, (x,), back)


def add_const(x: Tensor, c: float) -> Tensor:
    """Add a python constant elementwise."""

    def back(g):
        return (g,)

    return _from_op(x.data + c, (x,), back)


def bce_with_logits(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean over rows of the summed stable binary cross entropy per column.

    Forward uses max(z,0) - z·a + log(1+e^-|z|); the gradient w.r.t. the
    logits is (sigmoid(z) - a) / batch. Labels carry no gradient.
    """
    if logits.data.shape != labels.data.shape:
        raise ShapeError(
            f"bce_with_logits shapes differ: {logits.data.shape} vs {labels.data.shape}"
        )
    z, a = logits.data, labels.data
    batch = z.shape[0]
    ew = kernels.bce_logits(z, a)

    def back(g):
        return (kernels.sigmoid(z) - a) * (g / batch), None

    return _from_op(np.asarray(ew.sum() / batch, dtype=z.dtype), (logits, labels), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences.

    ``f`` must be a pure scalar-valued function; ``x`` should be float64 for
    a tight comparison. The numeric side is (f(x+eps) - f(x-eps)) / (2 eps)
    per element, fully independent of the backward pass it checks.
    """
    probe = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(probe).item()
            flat[i] = orig - eps
            lo = f(probe).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))
