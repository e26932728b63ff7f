"""Dense float64 tensors with reverse-mode autodiff, plus the optimizer state.

Everything numerical in this package flows through here: a small tape-based
autodiff engine over numpy arrays, an Adam optimizer with linear-warmup /
inverse-sqrt decay, exponential-moving-average shadows, a splittable
deterministic PRNG, and checkpoint (de)serialization.

Design constraints:
  * float64 everywhere, so finite-difference gradient checks can use tight
    tolerances.
  * single-threaded and bitwise deterministic for a fixed seed.
  * ops validate shapes eagerly and raise ShapeError naming the offenders.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

# Names of all registered differentiable ops. The gradient-check test suite
# asserts it covers every entry, so new ops cannot silently skip checking.
OP_NAMES: list[str] = []


def _register(name: str):
    def deco(fn):
        OP_NAMES.append(name)
        fn.op_name = name
        return fn

    return deco


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible. Message names the shapes."""


class Tensor:
    """A dense float64 array plus an optional gradient and a backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # tuple of (parent Tensor, fn mapping output grad -> parent grad term)
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this node, accumulating into .grad fields."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, fn in node._parents:
                term = fn(g)
                if parent.grad is None:
                    # adopt the array unless it aliases the output gradient
                    if term is g or term.base is g:
                        term = term.copy()
                    parent.grad = term
                else:
                    parent.grad += term

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; divide by a scalar")
        return mul(self, Tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative topological order (reverse of it is unused; we emit reversed)."""
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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents) -> Tensor:
    """Build an op output node. `parents` is [(tensor, grad_fn), ...]; entries
    whose tensor does not require grad are dropped from the tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    kept = tuple((p, fn) for p, fn in parents if p.requires_grad or p._parents)
    out._parents = kept
    out.requires_grad = bool(kept)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / broadcasting ops ------------------------------------------


@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(data, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                        (b, lambda g: _unbroadcast(g, b.data.shape))])


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(data, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                        (b, lambda g: _unbroadcast(-g, b.data.shape))])


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(data, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                        (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


@_register("neg")
def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


@_register("pow")
def pow_(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p
    return _make(data, [(a, lambda g: g * p * a.data ** (p - 1.0))])


@_register("exp")
def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, [(a, lambda g: g * data)])


@_register("log")
def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _make(data, [(a, lambda g: g / a.data)])


@_register("relu")
def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    return _make(data, [(a, lambda g: g * (a.data > 0.0))])


@_register("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    data = np.where(a.data >= 0.0, data, 1.0 - data)
    return _make(data, [(a, lambda g: g * data * (1.0 - data))])


@_register("tanh")
def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make(data, [(a, lambda g: g * (1.0 - data * data))])


@_register("swish")
def swish(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0.0, s, 1.0 - s)
    data = a.data * s
    return _make(data, [(a, lambda g: g * (s + data * (1.0 - s)))])


# -- linear algebra -----------------------------------------------------------


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a.ndim in {2, 3} and b.ndim == 2."""
    a, b = _wrap(a), _wrap(b)
    if b.data.ndim != 2 or a.data.ndim not in (2, 3) or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data
    if a.data.ndim == 2:
        return _make(data, [(a, lambda g: g @ b.data.T),
                            (b, lambda g: a.data.T @ g)])
    return _make(data, [(a, lambda g: g @ b.data.T),
                        (b, lambda g: np.einsum("tuj,tuv->jv", a.data, g))])


@_register("transpose")
def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(data, [(a, lambda g: np.transpose(g, inv))])


@_register("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _make(data, [(a, lambda g: g.reshape(a.data.shape))])


# -- indexing / shaping -------------------------------------------------------


@_register("concat")
def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    parents = []
    start = 0
    for t in tensors:
        n = t.data.shape[axis]
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(start, start + n)
        parents.append((t, (lambda s: lambda g: g[tuple(s)])(tuple(sl))))
        start += n
    return _make(data, parents)


@_register("narrow")
def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries from `start` along `axis`."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for "
                         f"shape {a.shape} axis {axis}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return out

    return _make(a.data[sl], [(a, back)])


@_register("take_rows")
def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _make(data, [(a, back)])


@_register("repeat_rows")
def repeat_rows(a: Tensor, counts) -> Tensor:
    """Repeat row u of `a` counts[u] times, in order. counts must be >= 1."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (a.data.shape[0],):
        raise ShapeError(f"repeat_rows: counts shape {counts.shape} vs "
                         f"{a.data.shape[0]} rows")
    if np.any(counts < 1):
        raise ValueError(f"repeat_rows: all counts must be >= 1, got {counts.tolist()}")
    data = np.repeat(a.data, counts, axis=0)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def back(g):
        return np.add.reduceat(g, starts, axis=0)

    return _make(data, [(a, back)])


@_register("pick_per_row")
def pick_per_row(a: Tensor, idx) -> Tensor:
    """a[i, idx[i]] for each row i; returns a 1-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def back(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return out

    return _make(data, [(a, back)])


@_register("embedding")
def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding: id out of range 0..{table.data.shape[0] - 1}")
    data = table.data[ids]

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return out

    return _make(data, [(table, back)])


@_register("stop_grad")
def stop_grad(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions ---------------------------------------------------------------


@_register("sum")
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.full_like(a.data, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(np.asarray(data), [(a, back)])


@_register("mean")
def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.full_like(a.data, g / n)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape) / n

    return _make(np.asarray(data), [(a, back)])


@_register("logsumexp")
def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp; finite for any finite input."""
    m = a.data.max(axis=axis, keepdims=True) if a.data.size else a.data
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = out.squeeze() if axis is None else np.squeeze(out, axis=axis)
    soft = shifted / s

    def back(g):
        if axis is None:
            return g * soft
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return _make(np.asarray(out), [(a, back)])


# -- normalized activations ---------------------------------------------------


@_register("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (g - dot) * data

    return _make(data, [(a, back)])


@_register("log_softmax")
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def back(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _make(data, [(a, back)])


@_register("layer_norm")
def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} "
                         f"vs feature dim {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def back_a(g):
        gx = g * gamma.data
        return inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                          - xhat * (gx * xhat).sum(axis=-1, keepdims=True))

    def back_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def back_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(data, [(a, back_a), (gamma, back_gamma), (beta, back_beta)])


@_register("normalize_rows")
def normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True) + eps)
    data = a.data / n

    def back(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        return g / n - a.data * dot / (n ** 3)

    return _make(data, [(a, back)])


# -- fused network modules ------------------------------------------------------
#
# Attention and the feed-forward module are the hottest subgraphs; fusing each
# into a single tape node with a hand-written backward keeps the graph small.


@_register("mha")
def mha(xn: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
        n_heads: int) -> Tensor:
    """Full-context multi-head self-attention over a (T, D) sequence.

    Input is expected pre-normalized; output is the concatenated head mix
    through wo. One tape node; backward recomputes nothing.
    """
    t_len, d = xn.data.shape
    if d % n_heads or wq.data.shape != (d, d) or wk.data.shape != (d, d) \
            or wv.data.shape != (d, d) or wo.data.shape != (d, d):
        raise ShapeError(f"mha: x {xn.shape}, weights "
                         f"{wq.shape}/{wk.shape}/{wv.shape}/{wo.shape}, "
                         f"{n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = xn.data @ wq.data
    k = xn.data @ wk.data
    v = xn.data @ wv.data
    attn = np.empty((n_heads, t_len, t_len))
    mixed = np.empty((t_len, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = (q[:, sl] @ k[:, sl].T) * scale
        s -= s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        attn[h] = a
        mixed[:, sl] = a @ v[:, sl]
    data = mixed @ wo.data

    memo: list = [None, None]

    def _all(g):
        gq = np.empty_like(q)
        gk = np.empty_like(k)
        gv = np.empty_like(v)
        gmix = g @ wo.data.T
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            a = attn[h]
            go = gmix[:, sl]
            ga = go @ v[:, sl].T
            gv[:, sl] = a.T @ go
            gs = (ga - (ga * a).sum(axis=-1, keepdims=True)) * a * scale
            gq[:, sl] = gs @ k[:, sl]
            gk[:, sl] = gs.T @ q[:, sl]
        gxn = gq @ wq.data.T + gk @ wk.data.T + gv @ wv.data.T
        return (gxn, xn.data.T @ gq, xn.data.T @ gk, xn.data.T @ gv,
                mixed.T @ g)

    def _grad(g, slot):
        if memo[0] != id(g):
            memo[0] = id(g)
            memo[1] = _all(g)
        return memo[1][slot]

    return _make(data, [(xn, lambda g: _grad(g, 0)),
                        (wq, lambda g: _grad(g, 1)),
                        (wk, lambda g: _grad(g, 2)),
                        (wv, lambda g: _grad(g, 3)),
                        (wo, lambda g: _grad(g, 4))])


@_register("ffn_block")
def ffn_block(x: Tensor, ln_g: Tensor, ln_b: Tensor, w1: Tensor, b1: Tensor,
              w2: Tensor, b2: Tensor, eps: float = 1e-6) -> Tensor:
    """layer_norm -> affine -> swish -> affine as one tape node."""
    d = x.data.shape[-1]
    if w1.data.shape[0] != d or w2.data.shape != (w1.data.shape[1], d) \
            or ln_g.data.shape != (d,):
        raise ShapeError(f"ffn_block: x {x.shape}, w1 {w1.shape}, w2 {w2.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xn = xhat * ln_g.data + ln_b.data
    h = xn @ w1.data + b1.data
    s = 1.0 / (1.0 + np.exp(-np.abs(h)))
    s = np.where(h >= 0.0, s, 1.0 - s)
    a = h * s
    data = a @ w2.data + b2.data

    memo: list = [None, None]

    def _all(g):
        gw2 = a.T @ g
        gb2 = g.sum(axis=0)
        ga = g @ w2.data.T
        gh = ga * (s + a * (1.0 - s))
        gw1 = xn.T @ gh
        gb1 = gh.sum(axis=0)
        gxn = gh @ w1.data.T
        gg = (gxn * xhat).sum(axis=0)
        gb = gxn.sum(axis=0)
        gxh = gxn * ln_g.data
        gx = inv / d * (d * gxh - gxh.sum(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb, gw1, gb1, gw2, gb2

    def _grad(g, slot):
        if memo[0] != id(g):
            memo[0] = id(g)
            memo[1] = _all(g)
        return memo[1][slot]

    return _make(data, [(x, lambda g: _grad(g, 0)),
                        (ln_g, lambda g: _grad(g, 1)),
                        (ln_b, lambda g: _grad(g, 2)),
                        (w1, lambda g: _grad(g, 3)),
                        (b1, lambda g: _grad(g, 4)),
                        (w2, lambda g: _grad(g, 5)),
                        (b2, lambda g: _grad(g, 6))])


# -- sequence ops -------------------------------------------------------------


@_register("depthwise_conv1d")
def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with same-length output.

    x: (T, D), w: (K, D). Output (T, D) where out[t, d] is the kernel applied
    to a zero-padded window centred on t.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"depthwise_conv1d: x {x.shape} vs kernel {w.shape}")
    t_len, d = x.data.shape
    k = w.data.shape[0]
    left = (k - 1) // 2
    right = k - 1 - left
    xp = np.zeros((t_len + k - 1, d))
    xp[left:left + t_len] = x.data
    data = np.zeros((t_len, d))
    for j in range(k):
        data += w.data[j] * xp[j:j + t_len]

    def back_x(g):
        gx = np.zeros((t_len + k - 1, d))
        for j in range(k):
            gx[j:j + t_len] += w.data[j] * g
        return gx[left:left + t_len]

    def back_w(g):
        gw = np.empty((k, d))
        for j in range(k):
            gw[j] = (g * xp[j:j + t_len]).sum(axis=0)
        return gw

    return _make(data, [(x, back_x), (w, back_w)])


@_register("rnn_scan")
def rnn_scan(x: Tensor, h0: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Single-layer tanh recurrence h_t = tanh(x_t Wx + h_{t-1} Wh + b).

    Runs the whole sequence as one tape node with hand-rolled BPTT; x is
    (L, E), output is (L, H). L may be 0.
    """
    l_len = x.data.shape[0]
    h_dim = wh.data.shape[0]
    if wx.data.shape != (x.data.shape[1], h_dim) or wh.data.shape != (h_dim, h_dim) \
            or h0.data.shape != (h_dim,) or b.data.shape != (h_dim,):
        raise ShapeError(f"rnn_scan: x {x.shape}, h0 {h0.shape}, wx {wx.shape}, "
                         f"wh {wh.shape}, b {b.shape}")
    hs = np.zeros((l_len, h_dim))
    pre = x.data @ wx.data + b.data
    h = h0.data
    for t in range(l_len):
        h = np.tanh(pre[t] + h @ wh.data)
        hs[t] = h

    def _bptt(g):
        gx = np.zeros_like(x.data)
        gwx = np.zeros_like(wx.data)
        gwh = np.zeros_like(wh.data)
        gb = np.zeros_like(b.data)
        gh0 = np.zeros_like(h0.data)
        carry = np.zeros(h_dim)
        for t in range(l_len - 1, -1, -1):
            gh = g[t] + carry
            dpre = gh * (1.0 - hs[t] * hs[t])
            prev = hs[t - 1] if t > 0 else h0.data
            gwx += np.outer(x.data[t], dpre)
            gwh += np.outer(prev, dpre)
            gb += dpre
            gx[t] = dpre @ wx.data.T
            carry = dpre @ wh.data.T
        gh0 += carry
        return gx, gh0, gwx, gwh, gb

    memo: list = [None, None]  # [id of last grad array, bptt result]

    def _grad(g, slot):
        if memo[0] != id(g):
            memo[0] = id(g)
            memo[1] = _bptt(g)
        return memo[1][slot]

    return _make(hs, [(x, lambda g: _grad(g, 0)),
                      (h0, lambda g: _grad(g, 1)),
                      (wx, lambda g: _grad(g, 2)),
                      (wh, lambda g: _grad(g, 3)),
                      (b, lambda g: _grad(g, 4))])


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    nonfinite: bool = False
    per_param: dict[str, float] = field(default_factory=dict)


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f(params) to central finite
    differences. Returns the max relative error over all parameter entries."""
    out = f(params)
    if not np.isfinite(out.data).all():
        return GradCheckReport(math.inf, tol, False, nonfinite=True)
    for p in params.values():
        p.grad = None
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    per_param: dict[str, float] = {}
    for k, p in params.items():
        flat = p.data.reshape(-1)
        err_k = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            ad = analytic[k].reshape(-1)[i]
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            err_k = max(err_k, err)
        per_param[k] = err_k
        worst = max(worst, err_k)
    return GradCheckReport(worst, tol, worst <= tol, per_param=per_param)


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimState:
    """Adam with linear warmup then inverse-sqrt decay:
    lr(step) = peak_lr * min(step / warmup, sqrt(warmup / step))."""
    peak_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        w = max(1, self.warmup_steps)
        return self.peak_lr * min(step / w, math.sqrt(w / step))


def adam_step(state: OptimState, params: dict[str, Tensor],
              grads: dict[str, np.ndarray] | None = None) -> bool:
    """Apply one optimizer step in place. Returns False (and counts a skip,
    touching nothing) when any gradient is non-finite."""
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
    for g in grads.values():
        if not np.isfinite(g).all():
            state.skipped += 1
            return False
    state.step += 1
    t = state.step
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
        v = state.v.get(k)
        if v is None:
            v = state.v[k] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# -- exponential moving average ----------------------------------------------


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, np.ndarray]


def ema_init(params: dict[str, Tensor], decay: float) -> EmaState:
    if not (0.0 <= decay < 1.0):
        raise ValueError(f"ema decay must be in [0, 1), got {decay}")
    return EmaState(decay, {k: p.data.copy() for k, p in params.items()})


def ema_update(state: EmaState, params: dict[str, Tensor]) -> None:
    if state.shadow.keys() != params.keys():
        raise ValueError("ema_update: parameter set does not match shadow set")
    d = state.decay
    for k, p in params.items():
        s = state.shadow[k]
        s *= d
        s += (1.0 - d) * p.data


# -- deterministic splittable PRNG ---------------------------------------------


class Rng:
    """Deterministic PRNG splittable by named key.

    Children are pure functions of (root seed, path), so any draw is
    reproducible from the name alone; no hidden global stream exists.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        self._gen: np.random.Generator | None = None

    def key(self, name: str | int) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}")

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            digest = hashlib.sha256(f"{self.seed}|{self.path}".encode()).digest()
            self._gen = np.random.Generator(
                np.random.PCG64(int.from_bytes(digest[:16], "little")))
        return self._gen

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, *, params: dict[str, Tensor], opt: OptimState | None,
                    ema: EmaState | None, step: int, seed: int,
                    extra: dict | None = None) -> None:
    """Versioned binary map: parameter name -> float64 payload, plus optimizer
    moments, EMA shadows, the PRNG root seed and the step counter."""
    arrays: dict[str, np.ndarray] = {}
    for k, p in params.items():
        arrays[f"param/{k}"] = p.data
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
    }
    if opt is not None:
        meta["opt"] = {"peak_lr": opt.peak_lr, "warmup_steps": opt.warmup_steps,
                       "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                       "step": opt.step, "skipped": opt.skipped}
        for k, a in opt.m.items():
            arrays[f"adam_m/{k}"] = a
        for k, a in opt.v.items():
            arrays[f"adam_v/{k}"] = a
    if ema is not None:
        meta["ema_decay"] = ema.decay
        for k, a in ema.shadow.items():
            arrays[f"ema/{k}"] = a
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(buf, "a") as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    opt: OptimState | None
    ema: EmaState | None
    step: int
    seed: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    data = np.load(path)
    params: dict[str, Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    shadow: dict[str, np.ndarray] = {}
    for key in data.files:
        if "/" not in key:
            continue  # e.g. the meta.json member
        kind, name = key.split("/", 1)
        if kind == "param":
            params[name] = Tensor(data[key], requires_grad=True)
        elif kind == "adam_m":
            adam_m[name] = np.asarray(data[key], dtype=np.float64)
        elif kind == "adam_v":
            adam_v[name] = np.asarray(data[key], dtype=np.float64)
        elif kind == "ema":
            shadow[name] = np.asarray(data[key], dtype=np.float64)
    opt = None
    if "opt" in meta:
        o = meta["opt"]
        opt = OptimState(peak_lr=o["peak_lr"], warmup_steps=o["warmup_steps"],
                         beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         step=o["step"], skipped=o["skipped"], m=adam_m, v=adam_v)
    ema = EmaState(meta["ema_decay"], shadow) if "ema_decay" in meta else None
    return Checkpoint(params, opt, ema, meta["step"], meta["seed"], meta["extra"])
