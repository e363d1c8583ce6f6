"""Dense float64 tensors with reverse-mode differentiation.

Small matrix-at-a-time engine: every op records its parents and a backward
closure, `Tensor.backward()` topologically replays the tape. Forward math is
numpy; everything runs in 64-bit because the test suite leans on tight
finite-difference and bit-equality checks rather than throughput.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GradCheckError, ShapeError, TapeError

_seq_counter = itertools.count()


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d; keep their shape
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in the compute graph.

    `data` is a float64 ndarray; `grad`, once backward has run, is a same-shape
    buffer. Leaves created with `requires_grad=True` are trainable parameters
    and accumulate gradients across backward calls; op outputs are immutable
    once constructed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_seq", "_backward_done")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward_fn: Callable | None = None):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._seq = next(_seq_counter)
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def detach_array(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise TapeError("backward requires a scalar loss")
        if self._backward_done:
            raise TapeError("backward already ran for this loss; rebuild the forward pass")
        if not self._parents:
            raise TapeError("detached tensor: loss was not produced by taped ops")
        tape = ComputeTape(self)
        for node in tape.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward_fn is not None:
                node._backward_fn()
        self._backward_done = True

    # Operator sugar used throughout the model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class ComputeTape:
    """Topologically ordered record of the ops reachable from a root node."""

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(gen: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    """Affine-weight init: uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(gen.uniform(-bound, bound, size=tuple(shape)))


def zeros_param(shape: Sequence[int]) -> Tensor:
    return parameter(np.zeros(tuple(shape)))


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    return Tensor(data, _parents=parents, _backward_fn=backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    out = _node(out_data, (a, b), None)

    def backward():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward_fn = backward
    return out


def transpose(a: Tensor) -> Tensor:
    out = _node(np.ascontiguousarray(a.data.T), (a,), None)

    def backward():
        a.grad += out.grad.T

    out._backward_fn = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    # Same-shape add, or (N, d) + (d,) row-broadcast bias.
    if a.shape == b.shape:
        out = _node(a.data + b.data, (a, b), None)

        def backward():
            a.grad += out.grad
            b.grad += out.grad

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = _node(a.data + b.data[None, :], (a, b), None)

        def backward():
            a.grad += out.grad
            b.grad += out.grad.sum(axis=0)

    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out._backward_fn = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    # Hadamard product; also supports (N, 1) * (N, d) column broadcast.
    if a.shape == b.shape:
        out = _node(a.data * b.data, (a, b), None)

        def backward():
            a.grad += out.grad * b.data
            b.grad += out.grad * a.data

    elif (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == b.shape[0]
          and a.shape[1] == 1):
        out = _node(a.data * b.data, (a, b), None)

        def backward():
            a.grad += (out.grad * b.data).sum(axis=1, keepdims=True)
            b.grad += out.grad * a.data

    elif (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == b.shape[0]
          and b.shape[1] == 1):
        return mul(b, a)
    else:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    out._backward_fn = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _node(a.data * c, (a,), None)

    def backward():
        a.grad += out.grad * c

    out._backward_fn = backward
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = _node(a.data.reshape(tuple(shape)), (a,), None)

    def backward():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward_fn = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, computed branch-free via tanh for stability."""
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _node(y, (a,), None)

    def backward():
        a.grad += out.grad * y * (1.0 - y)

    out._backward_fn = backward
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _node(y, (a,), None)

    def backward():
        a.grad += out.grad * (1.0 - y * y)

    out._backward_fn = backward
    return out


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    out = _node(y, (a,), None)

    def backward():
        a.grad += out.grad * (a.data > 0.0)

    out._backward_fn = backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; smooth everywhere, which keeps finite-difference
    # gradient checks free of kink noise.
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    out = _node(y, (a,), None)

    def backward():
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        a.grad += out.grad * dy

    out._backward_fn = backward
    return out


def square(a: Tensor) -> Tensor:
    out = _node(a.data * a.data, (a,), None)

    def backward():
        a.grad += out.grad * 2.0 * a.data

    out._backward_fn = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.ndim == 0 or not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,), None)

    def backward():
        g = out.grad
        inner = (g * y).sum(axis=axis, keepdims=True)
        a.grad += y * (g - inner)

    out._backward_fn = backward
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis, max-shifted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = _node(y, (a,), None)

    def backward():
        g = out.grad
        a.grad += g - np.exp(y) * g.sum(axis=-1, keepdims=True)

    out._backward_fn = backward
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis vector to mean 0 / variance 1, then affine."""
    d = a.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs last-axis length >= 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (a, gain, bias), None)

    def backward():
        g = out.grad
        gx = g * gain.data
        a.grad += inv * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        gain.grad += (g * xhat).sum(axis=axes)
        bias.grad += g.sum(axis=axes)

    out._backward_fn = backward
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError("cross_entropy expects 1-D logits")
    v = logits.shape[0]
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range for vocab {v}")
    lp = log_softmax(reshape(logits, (1, v)))
    return scale(pick(lp, np.array([target])), -1.0).sum()


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = _node(a.data[idx], (a,), None)

    def backward():
        np.add.at(a.grad, idx, out.grad)

    out._backward_fn = backward
    return out


def place_rows(base: Tensor, rows: Tensor, idx: np.ndarray) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows` (idx unique)."""
    idx = np.asarray(idx, dtype=np.intp)
    if rows.shape[0] != idx.shape[0]:
        raise ShapeError("place_rows: rows/index length mismatch")
    data = base.data.copy()
    data[idx] = rows.data
    out = _node(data, (base, rows), None)

    def backward():
        g = out.grad.copy()
        rows.grad += g[idx]
        g[idx] = 0.0
        base.grad += g

    out._backward_fn = backward
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    data = np.concatenate([p.data for p in parts], axis=0)
    out = _node(data, tuple(parts), None)
    sizes = [p.shape[0] for p in parts]

    def backward():
        off = 0
        for p, n in zip(parts, sizes):
            p.grad += out.grad[off:off + n]
            off += n

    out._backward_fn = backward
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    out = _node(data, tuple(parts), None)
    widths = [p.shape[1] for p in parts]

    def backward():
        off = 0
        for p, w in zip(parts, widths):
            p.grad += out.grad[:, off:off + w]
            off += w

    out._backward_fn = backward
    return out


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    out = _node(np.ascontiguousarray(a.data[:, j0:j1]), (a,), None)

    def backward():
        a.grad[:, j0:j1] += out.grad

    out._backward_fn = backward
    return out


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    out = _node(table.data[ids], (table,), None)

    def backward():
        np.add.at(table.grad, ids, out.grad)

    out._backward_fn = backward
    return out


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row gather: out[i] = a[i, ids[i]], shape (N, 1)."""
    ids = np.asarray(ids, dtype=np.intp)
    n = a.shape[0]
    rows = np.arange(n)
    out = _node(a.data[rows, ids][:, None], (a,), None)

    def backward():
        np.add.at(a.grad, (rows, ids), out.grad[:, 0])

    out._backward_fn = backward
    return out


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary phase on (N, dh): halves (x1, x2) rotated per position.

    y1 = x1*cos - x2*sin, y2 = x1*sin + x2*cos with cos/sin of shape
    (N, dh/2); the rotation is orthogonal so backward applies the inverse
    rotation to the incoming gradient.
    """
    n, dh = a.shape
    half = dh // 2
    x1, x2 = a.data[:, :half], a.data[:, half:]
    y = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)
    out = _node(y, (a,), None)

    def backward():
        g1, g2 = out.grad[:, :half], out.grad[:, half:]
        a.grad[:, :half] += g1 * cos + g2 * sin
        a.grad[:, half:] += -g1 * sin + g2 * cos

    out._backward_fn = backward
    return out


def tsum(a: Tensor) -> Tensor:
    out = _node(np.asarray(a.data.sum()), (a,), None)

    def backward():
        a.grad += out.grad

    out._backward_fn = backward
    return out


# method alias so compositions read naturally
Tensor.sum = tsum


def add_all(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, max_coords_per_param: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    `f` rebuilds the forward pass from the live parameter buffers on every
    call. With `max_coords_per_param` set, a seeded subset of coordinates per
    parameter is probed (the analytic side is always the full gradient);
    otherwise every coordinate is.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("objective is non-finite at the check point")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradCheckError("objective became non-finite during probing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_grad.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-5)
            worst = max(worst, rel)
    return worst
