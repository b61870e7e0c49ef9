# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel implementations (hot loops of the numpy fallback).

Mirrors blocklm._kernels_py function for function. Gains come from fusing
row reductions and from skipping masked attention tails instead of
materializing -inf masks and full-width exponentials.
"""

import numpy as np

from libc.math cimport expf, tanhf, sqrtf

cdef float GELU_C = 0.7978845608028654
cdef float GELU_A = 0.044715


def gelu_fwd(x):
    shape = x.shape
    out = np.empty_like(x)
    saved = np.empty_like(x)
    cdef float[::1] xv = x.reshape(-1)
    cdef float[::1] ov = out.reshape(-1)
    cdef float[::1] tv = saved.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef float u
    for i in range(n):
        u = GELU_C * (xv[i] + GELU_A * xv[i] * xv[i] * xv[i])
        tv[i] = tanhf(u)
        ov[i] = 0.5 * xv[i] * (1.0 + tv[i])
    return out.reshape(shape), saved.reshape(shape)


def gelu_bwd(x, t, dy):
    shape = x.shape
    out = np.empty_like(x)
    cdef float[::1] xv = x.reshape(-1)
    cdef float[::1] tv = np.ascontiguousarray(t).reshape(-1)
    cdef float[::1] dv = np.ascontiguousarray(dy).reshape(-1)
    cdef float[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef float du
    for i in range(n):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xv[i] * xv[i])
        ov[i] = dv[i] * (0.5 * (1.0 + tv[i]) + 0.5 * xv[i] * (1.0 - tv[i] * tv[i]) * du)
    return out.reshape(shape)


def softmax_fwd(x):
    out = np.empty_like(x)
    cdef float[:, ::1] xv = x
    cdef float[:, ::1] ov = out
    cdef Py_ssize_t r, c, n = xv.shape[0], m = xv.shape[1]
    cdef float mx, s
    for r in range(n):
        mx = xv[r, 0]
        for c in range(1, m):
            if xv[r, c] > mx:
                mx = xv[r, c]
        s = 0.0
        for c in range(m):
            ov[r, c] = expf(xv[r, c] - mx)
            s += ov[r, c]
        for c in range(m):
            ov[r, c] /= s
    return out


def softmax_bwd(y, dy):
    out = np.empty_like(y)
    cdef float[:, ::1] yv = y
    cdef float[:, ::1] dv = np.ascontiguousarray(dy)
    cdef float[:, ::1] ov = out
    cdef Py_ssize_t r, c, n = yv.shape[0], m = yv.shape[1]
    cdef float acc
    for r in range(n):
        acc = 0.0
        for c in range(m):
            acc += yv[r, c] * dv[r, c]
        for c in range(m):
            ov[r, c] = yv[r, c] * (dv[r, c] - acc)
    return out


def masked_softmax_fwd(s, int offset, bint causal):
    out = np.empty_like(s)
    cdef float[:, :, ::1] sv = s
    cdef float[:, :, ::1] ov = out
    cdef Py_ssize_t r, i, j, nr = sv.shape[0], tq = sv.shape[1], tk = sv.shape[2]
    cdef Py_ssize_t lim
    cdef float mx, acc
    for r in range(nr):
        for i in range(tq):
            lim = tk
            if causal:
                lim = i + offset + 1
                if lim > tk:
                    lim = tk
            mx = sv[r, i, 0]
            for j in range(1, lim):
                if sv[r, i, j] > mx:
                    mx = sv[r, i, j]
            acc = 0.0
            for j in range(lim):
                ov[r, i, j] = expf(sv[r, i, j] - mx)
                acc += ov[r, i, j]
            for j in range(lim):
                ov[r, i, j] /= acc
            for j in range(lim, tk):
                ov[r, i, j] = 0.0
    return out


def masked_softmax_bwd(p, dp, int offset, bint causal):
    out = np.empty_like(p)
    cdef float[:, :, ::1] pv = p
    cdef float[:, :, ::1] dv = np.ascontiguousarray(dp)
    cdef float[:, :, ::1] ov = out
    cdef Py_ssize_t r, i, j, nr = pv.shape[0], tq = pv.shape[1], tk = pv.shape[2]
    cdef float acc
    for r in range(nr):
        for i in range(tq):
            acc = 0.0
            for j in range(tk):
                acc += pv[r, i, j] * dv[r, i, j]
            for j in range(tk):
                ov[r, i, j] = pv[r, i, j] * (dv[r, i, j] - acc)
    return out


def layernorm_fwd(x, g, b, double eps):
    y = np.empty_like(x)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    mean = np.empty(n, dtype=np.float32)
    rstd = np.empty(n, dtype=np.float32)
    cdef float[:, ::1] xv = x
    cdef float[:, ::1] yv = y
    cdef float[::1] gv = g
    cdef float[::1] bv = b
    cdef float[::1] mv = mean
    cdef float[::1] rv = rstd
    cdef Py_ssize_t r, c
    cdef float mu, var, rs, xc
    for r in range(n):
        mu = 0.0
        for c in range(d):
            mu += xv[r, c]
        mu /= d
        var = 0.0
        for c in range(d):
            xc = xv[r, c] - mu
            var += xc * xc
        var /= d
        rs = 1.0 / sqrtf(var + <float>eps)
        mv[r] = mu
        rv[r] = rs
        for c in range(d):
            yv[r, c] = (xv[r, c] - mu) * rs * gv[c] + bv[c]
    return y, mean, rstd


def layernorm_bwd(x, g, mean, rstd, dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dx = np.empty_like(x)
    dg = np.zeros(d, dtype=np.float32)
    db = np.zeros(d, dtype=np.float32)
    cdef float[:, ::1] xv = x
    cdef float[:, ::1] dyv = np.ascontiguousarray(dy)
    cdef float[:, ::1] dxv = dx
    cdef float[::1] gv = g
    cdef float[::1] mv = mean
    cdef float[::1] rv = rstd
    cdef float[::1] dgv = dg
    cdef float[::1] dbv = db
    cdef Py_ssize_t r, c
    cdef float m1, m2, xhat, dxhat, rs, mu
    for r in range(n):
        mu = mv[r]
        rs = rv[r]
        m1 = 0.0
        m2 = 0.0
        for c in range(d):
            xhat = (xv[r, c] - mu) * rs
            dxhat = dyv[r, c] * gv[c]
            m1 += dxhat
            m2 += dxhat * xhat
            dgv[c] += dyv[r, c] * xhat
            dbv[c] += dyv[r, c]
        m1 /= d
        m2 /= d
        for c in range(d):
            xhat = (xv[r, c] - mu) * rs
            dxhat = dyv[r, c] * gv[c]
            dxv[r, c] = rs * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def embedding_grad(dtable, ids, dy):
    cdef float[:, ::1] tv = dtable
    cdef long[::1] iv = np.ascontiguousarray(ids, dtype=np.int64)
    cdef float[:, ::1] dv = np.ascontiguousarray(dy)
    cdef Py_ssize_t r, c, n = iv.shape[0], d = tv.shape[1]
    cdef Py_ssize_t row
    for r in range(n):
        row = iv[r]
        for c in range(d):
            tv[row, c] += dv[r, c]


def adamw_update(p, g, m, v, double lr, double beta1, double beta2, double eps,
                 double weight_decay, int step):
    cdef float[::1] pv = p
    cdef float[::1] gv = g
    cdef float[::1] mv = m
    cdef float[::1] vv = v
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef float b1 = <float>beta1, b2 = <float>beta2
    cdef float bc1 = <float>(1.0 - beta1 ** step)
    cdef float bc2 = <float>(1.0 - beta2 ** step)
    cdef float flr = <float>lr, feps = <float>eps, fwd = <float>weight_decay
    cdef float mhat, vhat
    for i in range(n):
        mv[i] = b1 * mv[i] + (1.0 - b1) * gv[i]
        vv[i] = b2 * vv[i] + (1.0 - b2) * gv[i] * gv[i]
        mhat = mv[i] / bc1
        vhat = vv[i] / bc2
        pv[i] -= flr * (mhat / (sqrtf(vhat) + feps) + fwd * pv[i])
