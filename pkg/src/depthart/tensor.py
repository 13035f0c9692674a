"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is tape-based: while a ``Tape`` is active, every primitive op
appends a record holding the output tensor and a closure that propagates
the output gradient to the inputs. Records are appended in construction
order, which is a topological order of the DAG, so ``backward()`` is a
single reverse sweep that visits each node exactly once. Outside a tape,
ops run as plain numpy and build no graph.

Parameters and activations are float32. Tests may build float64 tensors
(``dtype=np.float64``) to sharpen finite-difference checks; the kernels
are dtype-preserving.

No implicit broadcasting: elementwise ops require exact shape equality.
The few places that need a broadcast (bias add, positional-table add,
attention masking) are explicit named ops with hand-written backward
passes. A tape and the tensors recorded on it belong to one thread.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Usage::

        with Tape():
            loss = ...   # ops get recorded
            loss.backward()
    """

    def __init__(self) -> None:
        self.records: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        out._tape = self
        self.records.append((out, backward))


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    """N-dimensional float array, optionally participating in the grad tape.

    ``grad`` is populated by ``backward()`` for every tensor on the path
    from the loss to a leaf with ``requires_grad=True``; it always has the
    same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        elif dtype is None:
            # float64 input without explicit dtype: normalize to the
            # engine's working precision
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[Tape] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph participation --------------------------------------------------

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._tape is not None

    def _accumulate(self, g: np.ndarray) -> None:
        """Accumulate a gradient the caller may still alias (copies once)."""
        if self.grad is None:
            if g.dtype != self.data.dtype:
                g = g.astype(self.data.dtype)
            self.grad = g.copy()
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        """Accumulate a freshly-allocated gradient buffer (takes ownership)."""
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from this scalar through its tape."""
        if self._tape is None:
            raise RuntimeError("backward() on a tensor that is not on a tape")
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar output")
        self.grad = np.ones_like(self.data)
        for out, fn in reversed(self._tape.records):
            if out.grad is not None:
                fn(out.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _maybe_record(out: Tensor, parents: Sequence[Tensor],
                  backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p._needs_grad() for p in parents):
        tape.record(out, backward)
    return out


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate(g)
        if b._needs_grad():
            b._accumulate(g)

    return _maybe_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate(g)
        if b._needs_grad():
            b._accumulate_owned(-g)

    return _maybe_record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(g * b.data)
        if b._needs_grad():
            b._accumulate_owned(g * a.data)

    return _maybe_record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(-g)

    return _maybe_record(out, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(g * s)

    return _maybe_record(out, (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + s, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate(g)

    return _maybe_record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate(g.reshape(a.data.shape))

    return _maybe_record(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), dtype=a.dtype)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a._needs_grad():
            a._accumulate(g.transpose(inv))

    return _maybe_record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise DimensionError("concat: need at least one tensor")
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis),
                 dtype=parts[0].dtype)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t._needs_grad():
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _maybe_record(out, parts, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(a.data[idx]), dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accumulate_owned(buf)

    return _maybe_record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(dtype=a.dtype), dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(np.full_like(a.data, g))

    return _maybe_record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(dtype=a.dtype), dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(np.full_like(a.data, g / n))

    return _maybe_record(out, (a,), backward)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D, or batched with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents differ ({a.shape} vs {b.shape})")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul: leading dims differ ({a.shape} vs {b.shape})")
    out = Tensor(a.data @ b.data, dtype=a.dtype)

    def backward(g):
        if a._needs_grad():
            a._accumulate_owned(g @ b.data.swapaxes(-1, -2))
        if b._needs_grad():
            b._accumulate_owned(a.data.swapaxes(-1, -2) @ g)

    return _maybe_record(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; fused bias add."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: input width {x.data.shape[-1]} != weight rows {w.data.shape[0]}")
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y2 = x2 @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise DimensionError("linear: bias shape mismatch")
        np.add(y2, b.data, out=y2)
    out_shape = x.data.shape[:-1] + (w.data.shape[1],)
    out = Tensor(y2.reshape(out_shape), dtype=x.dtype)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x._needs_grad():
            x._accumulate_owned((g2 @ w.data.T).reshape(x.data.shape))
        if w._needs_grad():
            w._accumulate_owned(x2.T @ g2)
        if b is not None and b._needs_grad():
            b._accumulate_owned(g2.sum(axis=0))

    return _maybe_record(out, parents, backward)


def add_table(x: Tensor, t: Tensor) -> Tensor:
    """Add a per-position table ``t[L, D]`` to every batch row of ``x[B, L, D]``."""
    if x.data.ndim != 3 or t.data.shape != x.data.shape[1:]:
        raise DimensionError(
            f"add_table: expected x[B,L,D] and t[L,D], got {x.shape} and {t.shape}")
    out = Tensor(x.data + t.data[None, :, :], dtype=x.dtype)

    def backward(g):
        if x._needs_grad():
            x._accumulate(g)
        if t._needs_grad():
            t._accumulate_owned(g.sum(axis=0))

    return _maybe_record(out, (x, t), backward)


# --------------------------------------------------------------------------
# nonlinearities and normalization
# --------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form (GPT-2 convention)."""
    xd = x.data
    x2 = xd * xd  # reused by the backward pass; avoids slow float pow
    u = x2 * _GELU_A
    u += 1.0
    u *= xd
    u *= _GELU_C
    th = np.tanh(u, out=u)
    y = th + 1.0
    y *= xd
    y *= 0.5
    out = Tensor(y, dtype=x.dtype)

    def backward(g):
        if x._needs_grad():
            du = x2 * (3.0 * _GELU_A)
            du += 1.0
            du *= _GELU_C
            t2 = th * th
            np.subtract(1.0, t2, out=t2)
            du *= t2
            du *= xd
            du += th
            du += 1.0
            du *= 0.5  # dydx = 0.5*(1+th) + 0.5*x*(1-th^2)*c*(1+3a*x^2)
            du *= g
            x._accumulate_owned(du)

    return _maybe_record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError("layer_norm: gain/bias must match last axis")
    x2 = x.data.reshape(-1, d)
    mu = x2.mean(axis=1)
    xc = x2 - mu[:, None]
    var = np.einsum("nc,nc->n", xc, xc) / d
    inv = (1.0 / np.sqrt(var + eps))[:, None]
    xhat = xc * inv
    y = xhat * gain.data
    y += bias.data
    out = Tensor(y.reshape(x.data.shape), dtype=x.dtype)

    def backward(g):
        g2 = g.reshape(-1, d)
        if gain._needs_grad():
            gain._accumulate_owned(np.einsum("nc,nc->c", g2, xhat))
        if bias._needs_grad():
            bias._accumulate_owned(g2.sum(axis=0))
        if x._needs_grad():
            gy = g2 * gain.data
            m1 = gy.mean(axis=1)
            m2 = np.einsum("nc,nc->n", gy, xhat) / d
            gy -= m1[:, None]
            gy -= xhat * m2[:, None]
            gy *= inv
            x._accumulate_owned(gy.reshape(x.data.shape))

    return _maybe_record(out, (x, gain, bias), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, dtype=x.dtype)

    def backward(g):
        if x._needs_grad():
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate_owned(p * (g - dot))

    return _maybe_record(out, (x,), backward)


# --------------------------------------------------------------------------
# lookup and loss
# --------------------------------------------------------------------------


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table[V, C]`` by an integer index array."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("embedding_lookup: indices must be integers")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding_lookup: index out of range [0, {v})")
    out = Tensor(table.data[idx], dtype=table.dtype)

    def backward(g):
        if table._needs_grad():
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate_owned(buf)

    return _maybe_record(out, (table,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of ``-log softmax(logits)[i, targets[i]]`` over rows."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy: logits must be [N, V]")
    t = np.asarray(targets)
    n, v = logits.data.shape
    if t.shape != (n,):
        raise DimensionError("softmax_cross_entropy: targets must be [N]")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target index out of range [0, {v})")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (ld - m) - np.log(z)
    loss = -logp[np.arange(n), t].mean(dtype=ld.dtype)
    out = Tensor(loss, dtype=logits.dtype)

    def backward(g):
        if logits._needs_grad():
            p = e / z
            p[np.arange(n), t] -= 1.0
            logits._accumulate_owned(p * (g / n))

    return _maybe_record(out, (logits,), backward)


# --------------------------------------------------------------------------
# attention (fused)
# --------------------------------------------------------------------------


def _masked_softmax_scores(q: np.ndarray, k: np.ndarray, mask: np.ndarray,
                           inv_sqrt: float) -> np.ndarray:
    """Attention probabilities, computed in place on the score buffer."""
    s = q @ k.swapaxes(-1, -2)
    s *= inv_sqrt
    s += mask
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention over ``[B, H, L, Dh]`` with an additive
    ``[Lq, Lk]`` mask (0 allowed, -inf blocked). Fully-blocked rows are not
    supported; the mask construction must leave every query something to see.
    """
    if q.data.ndim != 4 or k.data.shape != q.data.shape or v.data.shape[:3] != k.data.shape[:3]:
        raise DimensionError("attention: q/k/v must be [B, H, L, Dh]")
    dh = q.data.shape[-1]
    inv_sqrt = 1.0 / math.sqrt(dh)
    p = _masked_softmax_scores(q.data, k.data, mask, inv_sqrt)
    out = Tensor(p @ v.data, dtype=q.dtype)

    def backward(g):
        dp = g @ v.data.swapaxes(-1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        if q._needs_grad():
            q._accumulate_owned((ds @ k.data) * inv_sqrt)
        if k._needs_grad():
            k._accumulate_owned((ds.swapaxes(-1, -2) @ q.data) * inv_sqrt)
        if v._needs_grad():
            v._accumulate_owned(p.swapaxes(-1, -2) @ g)

    return _maybe_record(out, (q, k, v), backward)


def multihead_attention(qkv: Tensor, heads: int, mask: np.ndarray) -> Tensor:
    """Fused masked attention over a packed ``[B, L, 3D]`` projection.

    Splits heads, runs scaled dot-product attention with the additive
    mask, and merges heads back to ``[B, L, D]`` - one tape record for
    the whole block, which keeps the training loop off the Python floor.
    """
    if qkv.data.ndim != 3 or qkv.data.shape[-1] % (3 * heads) != 0:
        raise DimensionError("multihead_attention: expected [B, L, 3D]")
    b, length, threed = qkv.data.shape
    d = threed // 3
    dh = d // heads
    arr = qkv.data.reshape(b, length, 3, heads, dh)
    q = np.ascontiguousarray(arr[:, :, 0].transpose(0, 2, 1, 3))
    k = np.ascontiguousarray(arr[:, :, 1].transpose(0, 2, 1, 3))
    v = np.ascontiguousarray(arr[:, :, 2].transpose(0, 2, 1, 3))
    inv_sqrt = 1.0 / math.sqrt(dh)
    p = _masked_softmax_scores(q, k, mask, inv_sqrt)
    heads_out = p @ v  # [B, H, L, dh]
    out = Tensor(heads_out.transpose(0, 2, 1, 3).reshape(b, length, d),
                 dtype=qkv.dtype)

    def backward(g):
        if not qkv._needs_grad():
            return
        gh = np.ascontiguousarray(
            g.reshape(b, length, heads, dh).transpose(0, 2, 1, 3))
        dp = gh @ v.swapaxes(-1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= inv_sqrt
        dqkv = np.empty((b, length, 3, heads, dh), dtype=g.dtype)
        dqkv[:, :, 0] = (ds @ k).transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = (ds.swapaxes(-1, -2) @ q).transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = (p.swapaxes(-1, -2) @ gh).transpose(0, 2, 1, 3)
        qkv._accumulate_owned(dqkv.reshape(b, length, threed))

    return _maybe_record(out, (qkv,), backward)


# --------------------------------------------------------------------------
# conv2d (im2col) and bilinear resize (matrix form)
# --------------------------------------------------------------------------

_COL_INDEX_CACHE: dict[tuple, tuple] = {}


def _col_indices(cin, h, w, kh, kw, stride, pad):
    key = (cin, h, w, kh, kw, stride, pad)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    c_idx = np.repeat(np.arange(cin), kh * kw).reshape(1, -1)
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    ky = np.tile(ky.reshape(-1), cin)
    kx = np.tile(kx.reshape(-1), cin)
    oy, ox = np.meshgrid(np.arange(h2) * stride, np.arange(w2) * stride, indexing="ij")
    rows = oy.reshape(-1, 1) + ky.reshape(1, -1)
    cols = ox.reshape(-1, 1) + kx.reshape(1, -1)
    chan = np.broadcast_to(c_idx, rows.shape)
    # flat index into the padded [cin, h+2p, w+2p] volume
    hp, wp = h + 2 * pad, w + 2 * pad
    flat = (chan * hp + rows) * wp + cols
    out = (flat.astype(np.int64), h2, w2, hp, wp)
    _COL_INDEX_CACHE[key] = out
    return out


def _conv2d_data(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray],
                 stride: int, pad: int):
    """Raw conv forward on arrays; returns (y, cols, geometry)."""
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    flat, h2, w2, hp, wp = _col_indices(cin, h, wd, kh, kw, stride, pad)
    if pad:
        xp = np.zeros((bsz, cin, hp, wp), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + wd] = x
    else:
        xp = x
    cols = xp.reshape(bsz, -1)[:, flat.reshape(-1)].reshape(bsz, flat.shape[0], flat.shape[1])
    y = cols @ w.reshape(cout, -1).T
    if b is not None:
        y = y + b
    y = y.transpose(0, 2, 1).reshape(bsz, cout, h2, w2)
    return y, cols, (flat, h2, w2, hp, wp)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over ``x[B, Cin, H, W]`` with ``w[Cout, Cin, kh, kw]``."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d: x must be [B,Cin,H,W], w [Cout,Cin,kh,kw]")
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"conv2d: channel mismatch {x.data.shape[1]} vs {w.data.shape[1]}")
    y, cols, (flat, h2, w2, hp, wp) = _conv2d_data(
        x.data, w.data, None if b is None else b.data, stride, padding)
    out = Tensor(y, dtype=x.dtype)
    parents = (x, w) if b is None else (x, w, b)
    bsz, cin, h, wd = x.data.shape
    cout = w.data.shape[0]

    def backward(g):
        g2 = g.reshape(bsz, cout, -1).transpose(0, 2, 1)  # [B, H2*W2, Cout]
        if b is not None and b._needs_grad():
            b._accumulate_owned(g2.sum(axis=(0, 1)))
        if w._needs_grad():
            gw = np.einsum("bpk,bpc->ck", cols, g2, optimize=True)
            w._accumulate_owned(gw.reshape(w.data.shape))
        if x._needs_grad():
            dcols = g2 @ w.data.reshape(cout, -1)  # [B, P, Cin*kh*kw]
            span = cin * hp * wp
            idx = (flat.reshape(-1)[None, :] +
                   (np.arange(bsz) * span)[:, None]).reshape(-1)
            acc = np.bincount(idx, weights=dcols.reshape(-1), minlength=bsz * span)
            acc = acc.reshape(bsz, cin, hp, wp).astype(x.data.dtype)
            if padding:
                acc = np.ascontiguousarray(acc[:, :, padding:padding + h, padding:padding + wd])
            x._accumulate_owned(acc)

    return _maybe_record(out, parents, backward)


_RESIZE_CACHE: dict[tuple, np.ndarray] = {}


def _axis_weights(n_src: int, n_dst: int) -> np.ndarray:
    """[n_dst, n_src] bilinear weight matrix, align-corners convention."""
    m = np.zeros((n_dst, n_src))
    if n_src == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_dst):
        pos = i * (n_src - 1) / (n_dst - 1) if n_dst > 1 else 0.0
        lo = int(math.floor(pos))
        hi = min(lo + 1, n_src - 1)
        f = pos - lo
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    return m


def resize_matrix(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Dense ``[dst_h*dst_w, src_h*src_w]`` bilinear interpolation matrix."""
    key = (src_hw, dst_hw)
    hit = _RESIZE_CACHE.get(key)
    if hit is None:
        wy = _axis_weights(src_hw[0], dst_hw[0])
        wx = _axis_weights(src_hw[1], dst_hw[1])
        hit = np.kron(wy, wx).astype(np.float32)
        _RESIZE_CACHE[key] = hit
    return hit


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the trailing two axes, align-corners. Differentiable."""
    h2, w2 = int(size[0]), int(size[1])
    if h2 < 1 or w2 < 1:
        raise DimensionError("resize_bilinear: target extents must be >= 1")
    if x.data.ndim < 2:
        raise DimensionError("resize_bilinear: input must have spatial axes")
    h, w = x.data.shape[-2], x.data.shape[-1]
    r = resize_matrix((h, w), (h2, w2)).astype(x.data.dtype)
    lead = x.data.shape[:-2]
    y = x.data.reshape(-1, h * w) @ r.T
    out = Tensor(y.reshape(lead + (h2, w2)), dtype=x.dtype)

    def backward(g):
        if x._needs_grad():
            gx = g.reshape(-1, h2 * w2) @ r
            x._accumulate_owned(gx.reshape(x.data.shape))

    return _maybe_record(out, (x,), backward)
