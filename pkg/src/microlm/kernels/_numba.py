"""Numba-compiled hot kernels.

Same signatures and semantics as ``_numpy.py``; explicit loops instead
of masked dense algebra, which is where the JIT pays off.  All loops are
serial so results are deterministic for a fixed backend.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def banded_attn_forward(q, k, v, pos, u, vb, window, n_mem):
    n, H, dk = q.shape
    dv = v.shape[2]
    out = np.zeros((n, H, dv), dtype=q.dtype)
    attn = np.zeros((n, H, window), dtype=q.dtype)
    scale = 1.0 / np.sqrt(dk)
    for i in range(n):
        g = n_mem + i
        lo = g - (window - 1)
        if lo < 0:
            lo = 0
        for h in range(H):
            mx = -np.inf
            for j in range(lo, g + 1):
                w = j - g + window - 1
                dist = g - j
                s = 0.0
                for c in range(dk):
                    qc = q[i, h, c]
                    s += (qc + u[h, c]) * k[j, h, c]
                    s += (qc + vb[h, c]) * pos[dist, h, c]
                s *= scale
                attn[i, h, w] = s
                if s > mx:
                    mx = s
            den = 0.0
            for j in range(lo, g + 1):
                w = j - g + window - 1
                e = np.exp(attn[i, h, w] - mx)
                attn[i, h, w] = e
                den += e
            for j in range(lo, g + 1):
                w = j - g + window - 1
                a = attn[i, h, w] / den
                attn[i, h, w] = a
                for c in range(dv):
                    out[i, h, c] += a * v[j, h, c]
    return out, attn


@njit(cache=True)
def banded_attn_backward(d_out, attn, q, k, v, pos, u, vb, window, n_mem):
    n, H, dk = q.shape
    dv = v.shape[2]
    dq = np.zeros_like(q)
    dkk = np.zeros_like(k)
    dvv = np.zeros_like(v)
    dpos = np.zeros_like(pos)
    du = np.zeros_like(u)
    dvb = np.zeros_like(vb)
    scale = 1.0 / np.sqrt(dk)
    dovbuf = np.zeros(window, dtype=np.float64)
    for i in range(n):
        g = n_mem + i
        lo = g - (window - 1)
        if lo < 0:
            lo = 0
        for h in range(H):
            inner = 0.0
            for j in range(lo, g + 1):
                w = j - g + window - 1
                dov = 0.0
                for c in range(dv):
                    dov += d_out[i, h, c] * v[j, h, c]
                dovbuf[w] = dov
                inner += attn[i, h, w] * dov
            for j in range(lo, g + 1):
                w = j - g + window - 1
                dist = g - j
                ds = attn[i, h, w] * (dovbuf[w] - inner) * scale
                for c in range(dk):
                    qu = q[i, h, c] + u[h, c]
                    qv = q[i, h, c] + vb[h, c]
                    dq[i, h, c] += ds * (k[j, h, c] + pos[dist, h, c])
                    du[h, c] += ds * k[j, h, c]
                    dvb[h, c] += ds * pos[dist, h, c]
                    dkk[j, h, c] += ds * qu
                    dpos[dist, h, c] += ds * qv
                a = attn[i, h, w]
                for c in range(dv):
                    dvv[j, h, c] += a * d_out[i, h, c]
    return dq, dkk, dvv, dpos, du, dvb


@njit(cache=True)
def scatter_add_rows(out, idx, rows):
    n, d = rows.shape
    for i in range(n):
        r = idx[i]
        for c in range(d):
            out[r, c] += rows[i, c]


@njit(cache=True)
def window_cache_forward(h, targets, theta, cap):
    n, d = h.shape
    p = np.zeros(n, dtype=h.dtype)
    buf = np.zeros(cap if cap > 0 else 1, dtype=np.float64)
    for t in range(1, n):
        lo = t - cap
        if lo < 0:
            lo = 0
        mx = -np.inf
        for s in range(lo, t):
            dot = 0.0
            for c in range(d):
                dot += h[s, c] * h[t, c]
            sc = theta * dot
            buf[s - lo] = sc
            if sc > mx:
                mx = sc
        num = 0.0
        den = 0.0
        for s in range(lo, t):
            e = np.exp(buf[s - lo] - mx)
            den += e
            if targets[s] == targets[t]:
                num += e
        p[t] = num / den
    return p


@njit(cache=True)
def window_cache_backward(h, targets, theta, cap, d_p):
    n, d = h.shape
    dh = np.zeros_like(h)
    dtheta = 0.0
    dots = np.zeros(cap if cap > 0 else 1, dtype=np.float64)
    wts = np.zeros(cap if cap > 0 else 1, dtype=np.float64)
    for t in range(1, n):
        lo = t - cap
        if lo < 0:
            lo = 0
        mx = -np.inf
        for s in range(lo, t):
            dot = 0.0
            for c in range(d):
                dot += h[s, c] * h[t, c]
            dots[s - lo] = dot
            sc = theta * dot
            wts[s - lo] = sc
            if sc > mx:
                mx = sc
        den = 0.0
        for s in range(lo, t):
            e = np.exp(wts[s - lo] - mx)
            wts[s - lo] = e
            den += e
        pt = 0.0
        for s in range(lo, t):
            wts[s - lo] /= den
            if targets[s] == targets[t]:
                pt += wts[s - lo]
        for s in range(lo, t):
            mtch = 1.0 if targets[s] == targets[t] else 0.0
            gs = d_p[t] * wts[s - lo] * (mtch - pt)
            dtheta += gs * dots[s - lo]
            for c in range(d):
                dh[t, c] += theta * gs * h[s, c]
                dh[s, c] += theta * gs * h[t, c]
    return dh, h.dtype.type(dtheta)


@njit(cache=True)
def _stream_dots_core(full, p, cap, dots):
    n = dots.shape[0]
    d = full.shape[1]
    for t in range(n):
        a = p + t
        occ = a if a < cap else cap
        for j in range(occ):
            s = 0.0
            for c in range(d):
                s += full[a, c] * full[a - 1 - j, c]
            dots[t, j] = s


def stream_dots(h, cap, h_prefix=None):
    n = h.shape[0]
    p = 0 if h_prefix is None else h_prefix.shape[0]
    full = h if p == 0 else np.concatenate([h_prefix, h], axis=0)
    dots = np.zeros((n, cap), dtype=h.dtype)
    _stream_dots_core(np.ascontiguousarray(full), p, cap, dots)
    occ = np.minimum(np.arange(p, p + n), cap).astype(np.int64)
    return dots, occ


@njit(cache=True)
def cache_probs_from_dots(dots, labels, occ, targets, theta):
    # labels[s] = token following state s; dots[t, j] pairs state t with
    # state t-1-j, so that entry's label is labels[t-1-j]
    n, cap = dots.shape
    p = np.zeros(n, dtype=dots.dtype)
    for t in range(n):
        o = occ[t]
        if o == 0:
            continue
        mx = -np.inf
        for j in range(o):
            sc = theta * dots[t, j]
            if sc > mx:
                mx = sc
        num = 0.0
        den = 0.0
        for j in range(o):
            e = np.exp(theta * dots[t, j] - mx)
            den += e
            if labels[t - 1 - j] == targets[t]:
                num += e
        p[t] = num / den
    return p


@njit(cache=True)
def recency_fill(base, use_prev, gap):
    n = base.shape[0]
    out = base.copy()
    for i in range(n):
        if use_prev[i] and i - gap[i] >= 0:
            out[i] = out[i - gap[i]]
    return out
