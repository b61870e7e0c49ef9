"""Differentiable kernel suite.

Matrix multiplies run through numpy's BLAS in both kernel backends; the
rowwise/elementwise hot loops dispatch to the selected backend. Every op
validates operand shapes up front and raises ShapeError naming the
operands and extents.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend as K
from .autograd import Tensor, add_flops, record
from .errors import DataError, ShapeError


def _f32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: left {a.shape} vs right {b.shape}")
    kdim = a.shape[-1]
    if b.ndim == 2:
        # linear-layer case: fold leading axes into one GEMM (batched tiny
        # matmuls through numpy pay per-item dispatch costs otherwise)
        n = b.shape[1]
        a2 = a.data.reshape(-1, kdim)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
        add_flops(2 * out.size * kdim)

        def grad(dout):
            d2 = dout.reshape(-1, n)
            da = (d2 @ b.data.T).reshape(a.data.shape)
            db = a2.T @ d2
            return da, db

        return record(out, (a, b), grad)

    out = a.data @ b.data
    add_flops(2 * out.size * kdim)

    def grad(dout):
        da = _unbroadcast(dout @ b.data.swapaxes(-1, -2), a.data.shape)
        db = _unbroadcast(a.data.swapaxes(-1, -2) @ dout, b.data.shape)
        return da, db

    return record(out, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with the bias gradient fused (one reduction, not a
    generic broadcast un-sum)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear extents do not conform: x {x.shape} vs w {w.shape}")
    kdim, n = w.shape
    x2 = x.data.reshape(-1, kdim)
    out2 = x2 @ w.data
    add_flops(2 * out2.size * kdim)
    if b is not None:
        if b.shape != (n,):
            raise ShapeError(f"linear bias shape {b.shape} does not match width {n}")
        out2 = out2 + b.data
    out = out2.reshape(x.shape[:-1] + (n,))

    def grad(dout):
        d2 = dout.reshape(-1, n)
        dx = (d2 @ w.data.T).reshape(x.data.shape)
        dw = x2.T @ d2
        if b is None:
            return dx, dw
        return dx, dw, d2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add operands do not broadcast: {a.shape} vs {b.shape}") from None

    def grad(dout):
        return _unbroadcast(dout, a.data.shape), _unbroadcast(dout, b.data.shape)

    return record(out, (a, b), grad)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul operands do not broadcast: {a.shape} vs {b.shape}") from None

    def grad(dout):
        return (_unbroadcast(dout * b.data, a.data.shape),
                _unbroadcast(dout * a.data, b.data.shape))

    return record(out, (a, b), grad)


def scale(a: Tensor, s: float) -> Tensor:
    s = np.float32(s)
    return record(a.data * s, (a,), lambda dout: (dout * s,))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record(out, (a,), lambda dout: (dout.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record(out, (a,), lambda dout: (np.ascontiguousarray(dout.transpose(inv)),))


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad(dout):
        return tuple(np.ascontiguousarray(g) for g in np.split(dout, splits, axis=axis))

    return record(out, tuple(parts), grad)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    out = np.ascontiguousarray(a.data[idx])

    def grad(dout):
        full = np.zeros_like(a.data)
        full[idx] = dout
        return (full,)

    return record(out, (a,), grad)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` (V, E) by integer ids of any shape."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(
            f"token id out of range: ids span [{ids.min()}, {ids.max()}] "
            f"but table has {table.shape[0]} rows")
    out = table.data[ids]

    def grad(dout):
        dtable = np.zeros_like(table.data)
        K.embedding_grad(dtable, ids.reshape(-1), _f32(dout.reshape(-1, table.shape[1])))
        return (dtable,)

    return record(out, (table,), grad)


def softmax(a: Tensor) -> Tensor:
    rows = a.data.reshape(-1, a.shape[-1])
    y2 = K.softmax_fwd(_f32(rows))
    out = y2.reshape(a.data.shape)

    def grad(dout):
        d2 = K.softmax_bwd(y2, _f32(dout.reshape(y2.shape)))
        return (d2.reshape(a.data.shape),)

    return record(out, (a,), grad)


def gelu(a: Tensor) -> Tensor:
    out, saved = K.gelu_fwd(a.data)
    return record(out, (a,), lambda dout: (K.gelu_bwd(a.data, saved, _f32(dout)),))


def layernorm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if g.shape != (d,) or b.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {g.shape}/{b.shape} do not match feature dim {d}")
    x2 = _f32(x.data.reshape(-1, d))
    y2, mean, rstd = K.layernorm_fwd(x2, g.data, b.data, eps)
    out = y2.reshape(x.data.shape)

    def grad(dout):
        dx2, dg, db = K.layernorm_bwd(x2, g.data, mean, rstd, _f32(dout.reshape(-1, d)))
        return dx2.reshape(x.data.shape), dg, db

    return record(out, (x, g, b), grad)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate position-paired feature halves of x (B, H, T, hd).

    cos/sin have shape (T, hd//2); position p along the T axis uses row p.
    """
    if x.ndim != 4:
        raise ShapeError(f"rotary expects (B, H, T, hd), got {x.shape}")
    _, _, t, hd = x.shape
    half = hd // 2
    if hd % 2 or cos.shape != (t, half) or sin.shape != (t, half):
        raise ShapeError(
            f"rotary tables {cos.shape} do not match input T={t}, head_dim={hd}")
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    out = np.empty_like(x.data)
    o1 = out[..., :half]
    o2 = out[..., half:]
    np.multiply(x1, c, out=o1)
    o1 -= x2 * s
    np.multiply(x2, c, out=o2)
    o2 += x1 * s

    def grad(dout):
        d1 = dout[..., :half]
        d2 = dout[..., half:]
        dx = np.empty_like(x.data)
        g1 = dx[..., :half]
        g2 = dx[..., half:]
        np.multiply(d1, c, out=g1)
        g1 += d2 * s
        np.multiply(d2, c, out=g2)
        g2 -= d1 * s
        return (dx,)

    return record(out, (x,), grad)


def attention(q: Tensor, k: Tensor, v: Tensor, *, causal: bool = True,
              offset: int = 0, record_to=None) -> Tensor:
    """Scaled dot-product attention over (B, H, T, hd) operands.

    Causal: query i sees key j iff j <= i + offset (offset = #keys that
    precede the first query, used by incremental decoding). record_to,
    when given, receives a copy of the attention probabilities.
    """
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"attention expects rank-4 operands, got {q.shape}/{k.shape}/{v.shape}")
    bq, hq, tq, hd = q.shape
    bk, hk, tk, hdk = k.shape
    if (bq, hq, hd) != (bk, hk, hdk) or k.shape != v.shape:
        raise ShapeError(f"attention operand mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if causal and offset < 0:
        raise ShapeError(f"causal attention offset must be >= 0, got {offset}")
    sc = np.float32(1.0 / math.sqrt(hd))

    s = (q.data @ k.data.swapaxes(-1, -2)) * sc
    add_flops(2 * bq * hq * tq * tk * hd)
    p3 = K.masked_softmax_fwd(_f32(s.reshape(-1, tq, tk)), offset, causal)
    p = p3.reshape(s.shape)
    if record_to is not None:
        record_to.append(np.array(p, copy=True))
    out = p @ v.data
    add_flops(2 * bq * hq * tq * tk * hd)

    def grad(dout):
        dv = p.swapaxes(-1, -2) @ dout
        dp = dout @ v.data.swapaxes(-1, -2)
        ds3 = K.masked_softmax_bwd(p3, _f32(dp.reshape(-1, tq, tk)), offset, causal)
        ds = ds3.reshape(s.shape)
        dq = (ds @ k.data) * sc
        dk = (ds.swapaxes(-1, -2) @ q.data) * sc
        return dq, dk, dv

    return record(out, (q, k, v), grad)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None):
    """Masked mean cross-entropy.

    logits (N, V), integer targets (N,), optional boolean mask (N,).
    Returns (scalar loss Tensor, per-position nll as a plain (N,) array);
    masked positions contribute exactly zero to the mean and carry nll 0.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    n, vsize = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy targets length {targets.shape[0]} != rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= vsize):
        raise DataError(
            f"target id out of range: [{targets.min()}, {targets.max()}] vs vocab {vsize}")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(mask.sum())
    if count == 0:
        raise DataError("all positions are masked; no loss positions in batch")

    # float64 internally: keeps the scalar loss differentiable by central
    # differences at 1e-3 steps (f32 reduction noise would dominate)
    x = logits.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    nll = lse - x[np.arange(n), targets]
    nll = np.where(mask, nll, 0.0)
    loss = np.float32(nll.sum() / count)

    def grad(dout):
        dlogit = e / z
        dlogit[np.arange(n), targets] -= 1.0
        dlogit *= mask[:, None] * (float(dout.reshape(())) / count)
        return (dlogit.astype(np.float32),)

    return record(np.asarray(loss), (logits,), grad), nll.astype(np.float32)
