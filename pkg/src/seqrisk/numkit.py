"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything is a contiguous row-major numpy array (float32 by default;
float64 is available for verification against finite differences).
Operations executed while a Graph is active are recorded on a tape in
execution order; ``backward`` replays the tape in reverse, accumulating
gradients additively across fan-out.  Tensors are immutable once produced
by an op, so a frozen model can be shared across threads; a graph itself
must only ever be recorded into by one thread.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericsError, ShapeError

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    return previous


class Tensor:
    """A shaped buffer of floats, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)


class Node:
    """One recorded op: the produced tensor plus its local backward rule."""

    __slots__ = ("out", "backward_rule", "name")

    def __init__(self, out: Tensor, backward_rule: Callable[[np.ndarray], None], name: str):
        self.out = out
        self.backward_rule = backward_rule
        self.name = name


class Graph:
    """Tape of recorded operations, already in topological (execution) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self


_GRAPH_STACK: list[Graph] = []


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class no_grad:
    """Context that suspends recording even if a graph is active."""

    def __enter__(self):
        self._saved = list(_GRAPH_STACK)
        _GRAPH_STACK.clear()
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.extend(self._saved)


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_rule: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, check finiteness, and record it on the tape."""
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    graph = _active_graph()
    requires = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        graph.nodes.append(Node(out, backward_rule, op))
    return out


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = grad.astype(t.data.dtype, copy=True)
    else:
        t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _finish("add", out_data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _finish("mul", out_data, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * a.data.dtype.type(s)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _finish("scale", out_data, (a,), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supports 2D x 2D, ND x ND with equal batch dims,
    and ND x 2D (the 2D operand acts on the last axis)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, n = b.shape
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _finish("matmul", out_data, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0))

    return _finish("relu", out_data, (a,), rule)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _finish("log", out_data, (a,), rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * out_data)

    return _finish("exp", out_data, (a,), rule)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray) -> None:
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _finish("softmax", out_data, (a,), rule)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis (stable, max-subtracted)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse

    def rule(g: np.ndarray) -> None:
        soft = np.exp(out_data)
        _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _finish("log_softmax", out_data, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim of {a.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    x_hat = centered * inv_std
    out_data = x_hat * gain.data + bias.data

    def rule(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accumulate(gain, (g * x_hat).reshape(-1, a.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, a.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * x_hat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv_std * (gx - m1 - x_hat * m2))

    return _finish("layer_norm", out_data, (a, gain, bias), rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `weight` by integer id array; output ids.shape + (dim,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}")
    out_data = weight.data[ids]

    def rule(g: np.ndarray) -> None:
        if weight.requires_grad:
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))

    return _finish("embedding", out_data, (weight,), rule)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., t] = a[..., t, idx[..., t]]: select one entry per last-axis row."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} must equal {a.shape[:-1]}")
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            _accumulate(a, full)

    return _finish("take_along_last", out_data, (a,), rule)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is true by `value` (mask broadcasts to a)."""
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, a.data.dtype.type(value), a.data)
    if out_data.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast onto {a.shape}")

    def rule(g: np.ndarray) -> None:
        _accumulate(a, np.where(mask, 0.0, g))

    return _finish("masked_fill", out_data, (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = np.ascontiguousarray(a.data.reshape(shape))

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _finish("reshape", out_data, (a,), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    return _finish("transpose", out_data, (a,), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) exceeds axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = np.ascontiguousarray(a.data[index])

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accumulate(a, full)

    return _finish("narrow", out_data, (a,), rule)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data, dtype=a.data.dtype)

    def rule(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g_exp, a.shape))

    return _finish("sum", out_data, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(graph: Graph, loss: Tensor,
             params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Reverse the tape from `loss`, accumulating .grad on every tensor that
    requires grad.  Returns the gradient map for `params` (name -> Tensor)."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node.out.grad is not None:
            node.backward_rule(node.out.grad)
            if node.out is not loss:
                node.out.grad = None  # free intermediate buffers as we go
    if params is None:
        return {}
    grads: dict[str, Tensor] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads[name] = Tensor(g)
    return grads


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = x.copy()
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, atol: float = 1e-8) -> float:
    """max |a-b| / (max(|a|,|b|) + atol), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b)) + atol
    return float(np.max(np.abs(a - b) / denom))
