"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_numba.py`` with identical
signatures and semantics.  The numpy versions are the readable reference
and the fallback when numba is unavailable or disabled.
"""

import numpy as np


def _window_index(n, window, n_mem):
    """Key indices per query slot.

    Returns (J, valid): J[i, w] is the key row attended by query i at
    window slot w (clipped to 0), valid marks real slots.  Slot w maps to
    distance window-1-w, so the rightmost slot is the query itself.
    """
    g = np.arange(n_mem, n_mem + n)[:, None]
    J = g + np.arange(window)[None, :] - (window - 1)
    valid = J >= 0
    return np.where(valid, J, 0), valid


def banded_attn_forward(q, k, v, pos, u, vb, window, n_mem):
    """Windowed relative-position attention over a chunk.

    q: [n, H, dk] queries; k/v: [n_mem+n, H, dk|dv] with memory rows
    first; pos: [window, H, dk] position keys indexed by distance;
    u, vb: [H, dk] global content/position biases.

    Returns (out [n, H, dv], attn [n, H, window]); attn slots that fall
    before the stream start are zero.
    """
    n, H, dk = q.shape
    scale = 1.0 / np.sqrt(dk)
    J, valid = _window_index(n, window, n_mem)
    kw = k[J]            # [n, window, H, dk]
    vw = v[J]            # [n, window, H, dv]
    pos_rev = pos[::-1]  # slot w -> distance window-1-w
    scores = np.einsum("ihd,iwhd->ihw", q + u, kw)
    scores = scores + np.einsum("ihd,whd->ihw", q + vb, pos_rev)
    scores = scores * scale
    scores = np.where(valid[:, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=2, keepdims=True)
    attn = np.exp(scores)
    attn = np.where(valid[:, None, :], attn, 0.0)
    attn = attn / attn.sum(axis=2, keepdims=True)
    attn = attn.astype(q.dtype)
    out = np.einsum("ihw,iwhd->ihd", attn, vw).astype(q.dtype)
    return out, attn


def banded_attn_backward(d_out, attn, q, k, v, pos, u, vb, window, n_mem):
    """Backward pass matching banded_attn_forward.

    Returns (dq, dk, dv, dpos, du, dvb).  Gradients flow to memory rows
    of k/v as well; training passes n_mem=0 so every row is in-window.
    """
    n, H, dk = q.shape
    scale = q.dtype.type(1.0 / np.sqrt(dk))
    J, valid = _window_index(n, window, n_mem)
    kw = k[J]
    vw = v[J]
    pos_rev = pos[::-1]

    dov = np.einsum("ihd,iwhd->ihw", d_out, vw)
    dov = np.where(valid[:, None, :], dov, 0.0)
    # softmax backward inside each window
    inner = (attn * dov).sum(axis=2, keepdims=True)
    ds = (attn * (dov - inner)).astype(q.dtype) * scale

    dq = np.einsum("ihw,iwhd->ihd", ds, kw)
    dq += np.einsum("ihw,whd->ihd", ds, pos_rev)
    du = np.einsum("ihw,iwhd->hd", ds, kw)
    dvb = np.einsum("ihw,whd->hd", ds, pos_rev)

    dk_full = np.zeros_like(k)
    dv_full = np.zeros_like(v)
    qu = q + u
    # ds is zero on invalid slots, so clipped J rows receive nothing
    contrib_k = np.einsum("ihw,ihd->iwhd", ds, qu)
    contrib_v = np.einsum("ihw,ihd->iwhd", attn, d_out)
    np.add.at(dk_full, J.ravel(), contrib_k.reshape(n * window, H, dk))
    np.add.at(dv_full, J.ravel(), contrib_v.reshape(n * window, H, v.shape[2]))

    dpos_rev = np.einsum("ihw,ihd->whd", ds, q + vb)
    dpos = dpos_rev[::-1].copy()
    return (dq.astype(q.dtype), dk_full, dv_full, dpos.astype(q.dtype),
            du.astype(q.dtype), dvb.astype(q.dtype))


def scatter_add_rows(out, idx, rows):
    """out[idx[i]] += rows[i], duplicate indices accumulate."""
    np.add.at(out, idx, rows)


def window_cache_forward(h, targets, theta, cap):
    """Cache match probabilities inside one training window.

    h: [n, d] hidden states, h[t] predicts targets[t]; the cache seen by
    position t holds (h[s], targets[s]) for the previous min(t, cap)
    positions.  Returns p [n] with p[0] = 0 (empty cache).
    """
    n, _ = h.shape
    p = np.zeros(n, dtype=h.dtype)
    if n < 2:
        return p
    S = (h @ h.T) * theta          # [n, n] similarity logits
    t_idx = np.arange(n)[:, None]
    s_idx = np.arange(n)[None, :]
    band = (s_idx < t_idx) & (s_idx >= t_idx - cap)
    S = np.where(band, S, -np.inf)
    m = S[1:].max(axis=1, keepdims=True)
    E = np.exp(S[1:] - m)
    E = np.where(band[1:], E, 0.0)
    match = targets[None, :] == targets[1:, None]
    num = (E * match).sum(axis=1)
    den = E.sum(axis=1)
    p[1:] = (num / den).astype(h.dtype)
    return p


def window_cache_backward(h, targets, theta, cap, d_p):
    """Gradients of window_cache_forward wrt h and theta."""
    n, d = h.shape
    dh = np.zeros_like(h)
    dtheta = 0.0
    if n < 2:
        return dh, h.dtype.type(dtheta)
    dots = h @ h.T
    S = dots * theta
    t_idx = np.arange(n)[:, None]
    s_idx = np.arange(n)[None, :]
    band = (s_idx < t_idx) & (s_idx >= t_idx - cap)
    S = np.where(band, S, -np.inf)
    m = S.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    E = np.exp(S - m)
    E = np.where(band, E, 0.0)
    den = E.sum(axis=1)
    den = np.where(den > 0, den, 1.0)
    W = E / den[:, None]                     # normalized weights per row
    match = (targets[None, :] == targets[:, None]) & band
    p = (W * match).sum(axis=1)
    # dp/d(theta*dots_ts) = W_ts * (match - p_t)
    G = W * (match - p[:, None]) * d_p[:, None]
    G = np.where(band, G, 0.0)
    dtheta = float((G * dots).sum())
    dh += theta * (G @ h)                    # grad into h_t via each h_s
    dh += theta * (G.T @ h)                  # grad into h_s via each h_t
    return dh.astype(h.dtype), h.dtype.type(dtheta)


def stream_dots(h, cap, h_prefix=None):
    """Similarities against the previous min(t_abs, cap) hidden states.

    h: [n, d] chunk of hidden states; h_prefix: [p, d] states preceding
    the chunk (p <= cap).  Returns (dots [n, cap], occ [n]) where
    dots[t, j] pairs h[t] with the state j+1 steps back and occ[t] is the
    number of valid recency slots.
    """
    n, d = h.shape
    p = 0 if h_prefix is None else h_prefix.shape[0]
    full = h if p == 0 else np.concatenate([h_prefix, h], axis=0)
    dots = np.zeros((n, cap), dtype=h.dtype)
    occ = np.minimum(np.arange(p, p + n), cap).astype(np.int64)
    for j in range(cap):
        # pairs (t, t-1-j) in absolute chunk coordinates
        lo = max(0, j + 1 - p)
        if lo >= n:
            break
        a = full[p + lo:p + n]
        b = full[p + lo - 1 - j:p + n - 1 - j]
        dots[lo:, j] = (a * b).sum(axis=1)
    return dots, occ


def cache_probs_from_dots(dots, labels, occ, targets, theta):
    """Cache probability of each target from precomputed similarities.

    labels[s] is the token that followed state s, so the entry paired
    with dots[t, j] (the state j+1 steps back) carries labels[t-1-j].
    Positions with occ == 0 get probability 0.  No prefix support: row t
    of dots must describe the stream's own position t (occ[t] <= t).
    """
    n, cap = dots.shape
    S = dots * theta
    slot = np.arange(cap)[None, :]
    valid = slot < occ[:, None]
    S = np.where(valid, S, -np.inf)
    m = S.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    E = np.where(valid, np.exp(S - m), 0.0)
    den = E.sum(axis=1)
    den = np.where(den > 0, den, 1.0)
    match = np.zeros((n, cap), dtype=bool)
    for j in range(cap):
        lo = j + 1
        if lo >= n:
            break
        match[lo:, j] = labels[lo - 1 - j:n - 1 - j] == targets[lo:]
    num = (E * match).sum(axis=1)
    return (num / den).astype(dots.dtype)


def recency_fill(base, use_prev, gap):
    """Sequential overlay used by the synthetic corpus generator.

    out[i] copies out[i - gap[i]] when use_prev[i] and the source exists,
    else base[i].  Must run in stream order.
    """
    n = base.shape[0]
    out = base.copy()
    for i in range(n):
        if use_prev[i] and i - gap[i] >= 0:
            out[i] = out[i - gap[i]]
    return out
