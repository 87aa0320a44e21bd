# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the autodiff hot path.

Each function mirrors the one of the same name in ``_pykernels``.
"""

import numpy as np
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt, INFINITY

cdef double MASK_OFFSET = -1e9


def softmax_fwd(floating[:, :, :, ::1] scores, const unsigned char[:, :, ::1] allowed, double scale):
    cdef Py_ssize_t B = scores.shape[0], H = scores.shape[1]
    cdef Py_ssize_t T = scores.shape[2], K = scores.shape[3]
    cdef Py_ssize_t M = allowed.shape[0]
    cdef Py_ssize_t b, h, i, j, mb
    cdef double mx, s, v
    cdef bint any_allowed
    cdef floating* orow
    cdef const floating* srow
    cdef const unsigned char* arow
    out = np.empty((B, H, T, K), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] o = out
    if K == 0:
        return out
    with nogil:
        for b in range(B):
            mb = b if M > 1 else 0
            for h in range(H):
                for i in range(T):
                    srow = &scores[b, h, i, 0]
                    orow = &o[b, h, i, 0]
                    arow = &allowed[mb, i, 0]
                    mx = -INFINITY
                    any_allowed = False
                    for j in range(K):
                        v = <floating>(srow[j] * <floating>scale)
                        if not arow[j]:
                            v = <floating>(v + MASK_OFFSET)
                        else:
                            any_allowed = True
                        orow[j] = <floating>v
                        if v > mx:
                            mx = v
                    s = 0.0
                    for j in range(K):
                        # masked entries sit ~1e9 below the max and underflow to exactly 0
                        if any_allowed and not arow[j]:
                            orow[j] = 0
                            continue
                        if floating is float:
                            orow[j] = expf(<float>(orow[j] - mx))
                        else:
                            orow[j] = exp(orow[j] - mx)
                        s += orow[j]
                    for j in range(K):
                        orow[j] = <floating>(orow[j] / s)
    return out


def softmax_bwd(floating[:, :, :, ::1] probs, floating[:, :, :, ::1] gout, double scale):
    cdef Py_ssize_t B = probs.shape[0], H = probs.shape[1]
    cdef Py_ssize_t T = probs.shape[2], K = probs.shape[3]
    cdef Py_ssize_t b, h, i, j
    cdef double dot
    out = np.empty((B, H, T, K), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    dot = 0.0
                    for j in range(K):
                        dot += gout[b, h, i, j] * probs[b, h, i, j]
                    for j in range(K):
                        o[b, h, i, j] = <floating>(probs[b, h, i, j] * (gout[b, h, i, j] - dot) * scale)
    return out


def rmsnorm_fwd(floating[:, ::1] x, floating[::1] w, double eps):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t n, d
    cdef double ss, r
    dt = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, D), dtype=dt)
    inv_arr = np.empty(N, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] inv = inv_arr
    with nogil:
        for n in range(N):
            ss = 0.0
            for d in range(D):
                ss += x[n, d] * x[n, d]
            r = 1.0 / sqrt(ss / D + eps)
            inv[n] = <floating>r
            for d in range(D):
                y[n, d] = <floating>(x[n, d] * inv[n] * w[d])
    return y_arr, inv_arr


def rmsnorm_bwd(floating[:, ::1] x, floating[::1] w, floating[::1] inv, floating[:, ::1] gy):
    cdef Py_ssize_t N = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t n, d
    cdef double dot, r, coef
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.empty((N, D), dtype=dt)
    gw_acc = np.zeros(D, dtype=np.float64)
    cdef floating[:, ::1] gx = gx_arr
    cdef double[::1] gw = gw_acc
    with nogil:
        for n in range(N):
            r = inv[n]
            dot = 0.0
            for d in range(D):
                dot += gy[n, d] * w[d] * x[n, d]
            coef = r * r * r * dot / D
            for d in range(D):
                gx[n, d] = <floating>(r * gy[n, d] * w[d] - x[n, d] * coef)
                gw[d] += gy[n, d] * x[n, d] * r
    return gx_arr, gw_acc.astype(dt)


def rope_apply(floating[:, :, :, ::1] x, floating[:, :, ::1] cos, floating[:, :, ::1] sin, bint inverse):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], T = x.shape[2], D = x.shape[3]
    cdef Py_ssize_t half = D // 2
    cdef Py_ssize_t P = cos.shape[0]
    cdef Py_ssize_t b, h, t, i, pb
    cdef double c, s, x1, x2
    cdef double sign = -1.0 if inverse else 1.0
    out = np.empty((B, H, T, D), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            pb = b if P > 1 else 0
            for h in range(H):
                for t in range(T):
                    for i in range(half):
                        c = cos[pb, t, i]
                        s = sign * sin[pb, t, i]
                        x1 = x[b, h, t, i]
                        x2 = x[b, h, t, i + half]
                        o[b, h, t, i] = <floating>(x1 * c - x2 * s)
                        o[b, h, t, i + half] = <floating>(x1 * s + x2 * c)
    return out


def xent_fwd(floating[:, ::1] logits, const long long[::1] targets):
    cdef Py_ssize_t N = logits.shape[0], V = logits.shape[1]
    cdef Py_ssize_t n, v
    cdef long long tg
    cdef double mx, s
    cdef const floating* lrow
    cdef floating* grow
    dt = np.float32 if floating is float else np.float64
    loss_arr = np.zeros(N, dtype=dt)
    grad_arr = np.zeros((N, V), dtype=dt)
    cdef floating[::1] loss = loss_arr
    cdef floating[:, ::1] g = grad_arr
    with nogil:
        for n in range(N):
            tg = targets[n]
            if tg < 0:
                continue
            lrow = &logits[n, 0]
            grow = &g[n, 0]
            mx = -INFINITY
            for v in range(V):
                if lrow[v] > mx:
                    mx = lrow[v]
            s = 0.0
            for v in range(V):
                if floating is float:
                    grow[v] = expf(<float>(lrow[v] - mx))
                else:
                    grow[v] = exp(lrow[v] - mx)
                s += grow[v]
            loss[n] = <floating>(log(s) - (lrow[tg] - mx))
            for v in range(V):
                grow[v] = <floating>(grow[v] / s)
            grow[tg] = <floating>(grow[tg] - 1.0)
    return loss_arr, grad_arr


def embed_bwd(const long long[::1] ids, floating[:, ::1] gout, Py_ssize_t vocab):
    cdef Py_ssize_t N = gout.shape[0], D = gout.shape[1]
    cdef Py_ssize_t n, d
    cdef long long r
    g_arr = np.zeros((vocab, D), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] g = g_arr
    with nogil:
        for n in range(N):
            r = ids[n]
            for d in range(D):
                g[r, d] += gout[n, d]
    return g_arr
