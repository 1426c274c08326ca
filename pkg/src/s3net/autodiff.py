"""Reverse-mode automatic differentiation over dense numpy tensors.

The computation graph is recorded dynamically: every op returns a new
:class:`Tensor` that references its parents together with the
vector-Jacobian products needed to push gradients back through it, so the
chain of records *is* the graph (acyclic by construction). :func:`backward`
visits each recorded node exactly once in reverse topological order and
returns a gradient for every ``requires_grad`` leaf.

Conventions:

* training state is float32; every op preserves the dtype of its inputs, so
  a graph built from float64 leaves runs entirely in float64 (the "shadow"
  mode used by finite-difference gradient checks);
* no implicit broadcasting except a lower-rank operand whose shape equals
  the trailing dimensions of the other (bias-add style) -- anything else
  requires an explicit reshape;
* every op checks its output for NaN/Inf and raises :class:`NonFiniteError`
  naming the offending node;
* stochastic ops draw from an explicitly passed ``numpy.random.Generator``.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


class GraphError(AutodiffError):
    """Backward requested on something that is not a recorded graph."""


_node_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def _check_finite(arr: np.ndarray, node: str) -> None:
    # One-pass check: a float64 sum is finite iff every element is
    # (any NaN or Inf poisons the accumulator).
    if arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite values in node '{node}'")


class Tensor:
    """Dense real-valued tensor, optionally part of a recorded graph."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name if name is not None else f"leaf#{next(_node_counter)}"
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable | None, ...] = ()
        _check_finite(self.data, self.name)

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor({self.name}, shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name, dtype=dtype)


def _node(op: str, out_data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable | None]) -> Tensor:
    name = f"{op}#{next(_node_counter)}"
    _check_finite(out_data, name)
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.name = name
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjps = tuple(vjps)
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjps = ()
    return t


def backward(output: Tensor, seed_grad=None) -> dict[Tensor, np.ndarray]:
    """Propagate gradients from ``output`` back to every requires_grad leaf.

    Returns a dict mapping each reachable leaf tensor to its gradient (same
    shape as the leaf). The graph is left untouched; no tensor is mutated.
    """
    if output.is_leaf:
        raise GraphError("backward before forward: output is not the result of a recorded graph")
    if seed_grad is None:
        if output.size != 1:
            raise GraphError(f"seed_grad required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)
    else:
        seed = seed_grad.data if isinstance(seed_grad, Tensor) else np.asarray(seed_grad, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"seed_grad shape {seed.shape} != output shape {output.shape}")

    # Iterative post-order DFS; each node appears once.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): seed.astype(output.dtype, copy=False)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaf_grads[node] = g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None or not parent.requires_grad:
                continue
            pg = vjp(g)
            acc = grads.get(id(parent))
            # vjps may return views aliasing g, so never accumulate in place
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


# ---------------------------------------------------------------------------
# shape helpers

def _trailing_match(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if _trailing_match(a.shape, b.shape) or _trailing_match(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither matches "
                     f"the other's trailing dimensions (explicit reshape required)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = a.data + b.data
    return _node("add", out, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = a.data - b.data
    return _node("sub", out, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = a.data * b.data
    return _node("mul", out, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), (lambda g: -g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("scale", a.data * c, (a,), (lambda g: g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("add_scalar", a.data + c, (a,), (lambda g: g,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: stacked operands must have equal rank, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading (batch) dimensions differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def da(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2))

    def db(g):
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            return np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, m))
        return np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _node("matmul", out, (a, b), (da, db))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Valid 1-D convolution of (B, C_in, L) with (C_out, C_in, k) weights."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (B,C,L) and w (C_out,C_in,k), got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch, x {x.shape} vs w {w.shape}")
    bsz, c_in, length = x.shape
    c_out, _, k = w.shape
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding)))
    if xd.shape[2] < k:
        raise ShapeError(f"conv1d: input length {xd.shape[2]} shorter than kernel {k}")
    t_out = (xd.shape[2] - k) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]
    cols_flat = cols.transpose(0, 2, 1, 3).reshape(bsz * t_out, c_in * k)
    w_flat = w.data.reshape(c_out, c_in * k)
    out = cols_flat @ w_flat.T
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.shape} != ({c_out},)")
        out = out + b.data
    out = out.reshape(bsz, t_out, c_out).transpose(0, 2, 1)

    def dx(g):
        gt = g.transpose(0, 2, 1).reshape(bsz * t_out, c_out)
        dcols = (gt @ w_flat).reshape(bsz, t_out, c_in, k).transpose(0, 2, 1, 3)
        grad = np.zeros_like(xd)
        for j in range(k):
            grad[:, :, j:j + stride * t_out:stride] += dcols[:, :, :, j]
        if padding:
            grad = grad[:, :, padding:padding + length]
        return grad

    def dw(g):
        gt = g.transpose(0, 2, 1).reshape(bsz * t_out, c_out)
        return (gt.T @ cols_flat).reshape(c_out, c_in, k)

    def db(g):
        return g.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    vjps = (dx, dw) if b is None else (dx, dw, db)
    return _node("conv1d", out, parents, vjps)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _node("reshape", out, (x,), (lambda g: g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes for shape {x.shape}")
    inv = tuple(int(a) for a in np.argsort(axes))
    return _node("transpose", x.data.transpose(axes), (x,), (lambda g: g.transpose(inv),))


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, x.ndim)

    def dx(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape)

    return _node("sum", np.asarray(out), (x,), (dx,))


def reduce_mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def dx(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / n).astype(x.dtype, copy=False)

    return _node("mean", np.asarray(out), (x,), (dx,))


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# nonlinearities and normalization

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def dx(g):
        du = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * ((1.0 - t * t) * du))

    return _node("gelu", out.astype(x.dtype, copy=False), (x,), (dx,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def dx(g):
        dxhat = g * gamma.data
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))

    def dgamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def dbeta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _node("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), (dx, dgamma, dbeta))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def dx(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _node("softmax", y.astype(x.dtype, copy=False), (x,), (dx,))


def log_sum_exp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)

    def dx(g):
        return np.expand_dims(g, -1) * (e / s)

    return _node("log_sum_exp", out.astype(x.dtype, copy=False), (x,), (dx,))


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*log(x), with the limit value 0 (and zero gradient) at x == 0."""
    pos = x.data > 0
    safe = np.where(pos, x.data, 1.0)
    out = np.where(pos, x.data * np.log(safe), 0.0)

    def dx(g):
        return g * np.where(pos, np.log(safe) + 1.0, 0.0)

    return _node("xlogx", out.astype(x.dtype, copy=False), (x,), (dx,))


# ---------------------------------------------------------------------------
# similarity

def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm. Zero rows are an error."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise AutodiffError("zero-norm vector in l2_normalize")
    y = x.data / norm

    def dx(g):
        return (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm

    return _node("l2_normalize", y.astype(x.dtype, copy=False), (x,), (dx,))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Rowwise cosine similarity over the last axis of equal-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.shape} vs {b.shape}")
    na = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise AutodiffError("zero-norm vector in cosine_similarity")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    s = dot / (na * nb)
    out = s.squeeze(-1)

    def da(g):
        g = np.expand_dims(g, -1)
        return g * (b.data / (na * nb) - s * a.data / (na ** 2))

    def db(g):
        g = np.expand_dims(g, -1)
        return g * (a.data / (na * nb) - s * b.data / (nb ** 2))

    return _node("cosine_similarity", out.astype(a.dtype, copy=False), (a, b), (da, db))


# ---------------------------------------------------------------------------
# stochastic / discrete

def gumbel_softmax(logits: Tensor, temperature: float, hard: bool, rng: np.random.Generator) -> Tensor:
    """Gumbel-softmax over the last axis.

    With ``hard=True`` the forward value is an exact one-hot (argmax of the
    noisy softmax) while the gradient is that of the soft distribution
    (straight-through).
    """
    temperature = float(temperature)
    if temperature <= 0.0:
        raise AutodiffError(f"gumbel_softmax: temperature must be > 0, got {temperature}")
    noise = rng.gumbel(size=logits.shape).astype(logits.dtype)
    z = (logits.data + noise) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if hard:
        idx = y.argmax(axis=-1)
        out = np.zeros_like(y)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    else:
        out = y

    def dlogits(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature

    return _node("gumbel_softmax", out.astype(logits.dtype, copy=False), (logits,), (dlogits,))


# ---------------------------------------------------------------------------
# indexed access

def gather_rows(x: Tensor, idx_outer: np.ndarray, idx_inner: np.ndarray) -> Tensor:
    """Select rows x[idx_outer[i], idx_inner[i]] from a (B, T, ...) tensor."""
    if x.ndim < 2:
        raise ShapeError(f"gather_rows expects ndim >= 2, got {x.shape}")
    io = np.asarray(idx_outer, dtype=np.intp)
    ii = np.asarray(idx_inner, dtype=np.intp)
    if io.shape != ii.shape or io.ndim != 1:
        raise ShapeError("gather_rows: index arrays must be equal-length 1-D")
    if io.size and (io.min() < 0 or io.max() >= x.shape[0] or ii.min() < 0 or ii.max() >= x.shape[1]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    out = x.data[io, ii]

    def dx(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (io, ii), g)
        return grad

    return _node("gather_rows", out, (x,), (dx,))


def replace_rows(x: Tensor, row_mask: np.ndarray, value: Tensor) -> Tensor:
    """Replace rows of a (..., T, d) tensor selected by a boolean (..., T) mask
    with a learned (d,) vector."""
    mask = np.asarray(row_mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"replace_rows: mask shape {mask.shape} != row shape {x.shape[:-1]}")
    if value.shape != (x.shape[-1],):
        raise ShapeError(f"replace_rows: value shape {value.shape} != ({x.shape[-1]},)")
    m = mask[..., None]
    out = np.where(m, value.data, x.data)

    def dx(g):
        return np.where(m, 0.0, g).astype(x.dtype, copy=False)

    def dv(g):
        return g[mask].sum(axis=0) if mask.any() else np.zeros_like(value.data)

    return _node("replace_rows", out.astype(x.dtype, copy=False), (x, value), (dx, dv))


def mask_weights(x: Tensor, keep_bits: np.ndarray) -> Tensor:
    """Zero out entries where keep_bits is 0; gradient is likewise masked.

    The forward value is produced with ``where``, so kept entries are
    bit-identical to ``x`` and dropped entries are exact +0.0 -- evaluating
    through this op equals evaluating a materialized zeroed copy.
    """
    bits = np.asarray(keep_bits, dtype=bool)
    if bits.shape != x.shape:
        raise ShapeError(f"mask_weights: mask shape {bits.shape} != tensor shape {x.shape}")
    out = np.where(bits, x.data, x.dtype.type(0.0))

    def dx(g):
        return np.where(bits, g, 0.0).astype(x.dtype, copy=False)

    return _node("mask_weights", out.astype(x.dtype, copy=False), (x,), (dx,))
