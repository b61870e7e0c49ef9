"""Pure-numpy kernel implementations.

Signature-compatible with the compiled extension (blocklm._ckernels);
backend.py picks one at import. Everything is float32 in, float32 out.
The causal mask convention: query i may see key j iff j <= i + offset.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_A = np.float32(0.044715)


def gelu_fwd(x: np.ndarray):
    """Returns (y, saved) where saved is the inner tanh, reused by the
    backward pass. Written allocation-light: these arrays are the largest
    activations in a training step."""
    u = x * x
    u *= x
    u *= _GELU_A
    u += x
    u *= _GELU_C
    t = np.tanh(u, out=u)
    y = t + np.float32(1.0)
    y *= x
    y *= np.float32(0.5)
    return y, t


def gelu_bwd(x: np.ndarray, t: np.ndarray, dy: np.ndarray) -> np.ndarray:
    du = x * x
    du *= np.float32(3.0) * _GELU_A
    du += np.float32(1.0)
    du *= _GELU_C
    w = t * t
    np.subtract(np.float32(1.0), w, out=w)
    w *= du
    w *= x
    w += np.float32(1.0)
    w += t
    w *= np.float32(0.5)
    w *= dy
    return w


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis of a 2-D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (y * dy).sum(axis=1, keepdims=True))


def masked_softmax_fwd(s: np.ndarray, offset: int, causal: bool) -> np.ndarray:
    """Softmax over the key axis of (rows, Tq, Tk) scores.

    Causal: entries with key index j > query index i + offset get exactly 0.
    """
    if causal:
        _, tq, tk = s.shape
        j = np.arange(tk, dtype=np.int64)[None, :]
        i = np.arange(tq, dtype=np.int64)[:, None]
        blocked = j > i + offset
        s = np.where(blocked[None, :, :], np.float32(-np.inf), s)
    m = s.max(axis=2, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=2, keepdims=True)


def masked_softmax_bwd(p: np.ndarray, dp: np.ndarray, offset: int, causal: bool) -> np.ndarray:
    # blocked entries have p == 0, so their gradient vanishes on its own
    return p * (dp - (p * dp).sum(axis=2, keepdims=True))


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    """x (N, D) -> (y, mean (N,), rstd (N,))."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    y = xc * rstd * g + b
    return y, mu.ravel(), rstd.ravel()


def layernorm_bwd(x: np.ndarray, g: np.ndarray, mean: np.ndarray, rstd: np.ndarray,
                  dy: np.ndarray):
    mu = mean[:, None]
    rs = rstd[:, None]
    xhat = (x - mu) * rs
    dxhat = dy * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rs * (dxhat - m1 - xhat * m2)
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def embedding_grad(dtable: np.ndarray, ids: np.ndarray, dy: np.ndarray):
    """Accumulate dy rows into dtable rows selected by ids (in place)."""
    np.add.at(dtable, ids, dy)


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                 lr: float, beta1: float, beta2: float, eps: float,
                 weight_decay: float, step: int):
    """Decoupled-weight-decay Adam step, in place on flat float32 views."""
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    m *= b1
    m += (np.float32(1.0) - b1) * g
    v *= b2
    v += (np.float32(1.0) - b2) * g * g
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    mhat = m / np.float32(bc1)
    vhat = v / np.float32(bc2)
    p -= np.float32(lr) * (mhat / (np.sqrt(vhat) + np.float32(eps))
                           + np.float32(weight_decay) * p)
