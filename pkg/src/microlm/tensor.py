"""Tape-based reverse-mode autodiff over numpy arrays.

Design rules:
  * values are stored row-major in a single float dtype (float32 in
    production; float64 is allowed so gradient audits can run in double)
  * a Tape records nodes in creation order, which is already a valid
    topological order; backward walks it exactly once in reverse
  * gradient accumulation uses `+=` in that fixed order, so two backward
    passes over identical tapes produce bit-identical gradients
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A value in the graph; `tracked` marks it as differentiable."""

    __slots__ = ("data", "grad", "tracked", "produced_by")

    def __init__(self, data, tracked=False, produced_by=None):
        data = np.asarray(data)
        if not data.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would promote 0-d to 1-d; 0-d is already
            # contiguous, so scalars keep shape () here
            data = np.ascontiguousarray(data)
        self.data = data
        if self.data.dtype not in (np.float32, np.float64):
            raise ContractError(f"tensor dtype must be float32/float64, got {self.data.dtype}")
        self.grad = None
        self.tracked = tracked
        self.produced_by = produced_by

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"


def parameter(data):
    return Tensor(data, tracked=True, produced_by="parameter")


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Records operations while active; replays them in reverse."""

    def __init__(self):
        self.nodes = []
        self._used = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss):
        if loss.data.shape != ():
            raise ContractError("backward requires a scalar loss")
        if self._used:
            raise ContractError("tape already consumed by backward")
        self._used = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue
            grads = node.backward_fn(node.out.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.tracked:
                    continue
                if g.shape != parent.data.shape:
                    raise ContractError("gradient shape mismatch")
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g


def record(out_data, parents, backward_fn, produced_by=None):
    """Create an op output, registering it on the active tape.

    `backward_fn(upstream)` must return one gradient (or None) per
    parent.  Fused ops elsewhere in the package build on this hook.
    """
    tracked = bool(_ACTIVE_TAPES) and any(p.tracked for p in parents)
    out = Tensor(out_data, tracked=tracked, produced_by=produced_by)
    if tracked:
        _ACTIVE_TAPES[-1].nodes.append(_Node(out, list(parents), backward_fn))
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in op: {dtypes}")


# ---------------------------------------------------------------- basics


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), bwd, produced_by="linear")


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b)
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        def bwd(g):
            return g, g
    elif sb == () or (len(sa) == 2 and sb == (sa[1],)):
        def bwd(g):
            gb = g.sum() if sb == () else g.sum(axis=0)
            return g, gb
    elif sa == () or (len(sb) == 2 and sa == (sb[1],)):
        def bwd(g):
            ga = g.sum() if sa == () else g.sum(axis=0)
            return ga, g
    else:
        raise ContractError(f"add shapes {sa} + {sb}")
    return record(a.data + b.data, (a, b), bwd)


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def sub(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _as_tensor(a, like=b)
    a = _as_tensor(a)
    return add(a, neg(_as_tensor(b, like=a)))


def multiply(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b)
    sa, sb = a.data.shape, b.data.shape
    if not (sa == sb or sa == () or sb == ()):
        raise ContractError(f"multiply shapes {sa} * {sb}")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if sa == () and sb != ():
            ga = ga.sum()
        if sb == () and sa != ():
            gb = gb.sum()
        return ga, gb

    return record(out, (a, b), bwd)


def relu(a):
    mask = a.data > 0
    return record(np.where(mask, a.data, 0), (a,),
                  lambda g: (np.where(mask, g, 0),), produced_by="relu")


def gelu(a):
    # tanh approximation; kept so the activation is a config swap
    x = a.data
    c = float(np.sqrt(2.0 / np.pi))
    u = c * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = c * (1.0 + 3 * 0.044715 * x ** 2)
        return ((g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)).astype(x.dtype),)

    return record(out.astype(x.dtype), (a,), bwd, produced_by="gelu")


ACTIVATIONS = {"relu": relu, "gelu": gelu}


def log(a):
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def exponential(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return record(out.astype(a.data.dtype), (a,), lambda g: ((g * out * (1.0 - out)).astype(a.data.dtype),))


def transpose(a):
    if a.data.ndim != 2:
        raise ContractError("transpose expects 2-D")
    return record(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a, shape):
    old = a.data.shape
    return record(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def sum_all(a):
    return record(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                  lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a):
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return record(out, (a,),
                  lambda g: ((np.broadcast_to(g, a.data.shape) / n).astype(a.data.dtype),))


# ------------------------------------------------------- shape plumbing


def gather_rows(table, ids, produced_by=None):
    """Row lookup; backward scatter-adds, so duplicate ids accumulate."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or table.data.ndim != 2:
        raise ContractError("gather_rows expects 2-D table, 1-D ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError("gather_rows id out of range")
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        kernels.scatter_add_rows(dt, ids.astype(np.int64), np.ascontiguousarray(g))
        return (dt,)

    return record(out, (table,), bwd, produced_by=produced_by)


def scatter_rows(n_rows, idx, rows):
    """Place rows at distinct indices of a zero [n_rows, d] output."""
    idx = np.asarray(idx)
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_rows requires distinct indices")
    out = np.zeros((n_rows, rows.data.shape[1]), dtype=rows.data.dtype)
    out[idx] = rows.data
    return record(out, (rows,), lambda g: (g[idx],))


def concat(tensors, axis=0):
    parts = [t.data for t in tensors]
    out = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
                     for i in range(len(parts)))

    return record(out, tuple(tensors), bwd)


def slice_rows(a, start, stop):
    if a.data.ndim < 1 or not (0 <= start <= stop <= a.data.shape[0]):
        raise ContractError("slice_rows out of range")
    out = a.data[start:stop].copy()

    def bwd(g):
        da = np.zeros_like(a.data)
        da[start:stop] = g
        return (da,)

    return record(out, (a,), bwd)


def take_per_row(a, idx):
    """out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    n = a.data.shape[0]
    out = a.data[np.arange(n), idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        da[np.arange(n), idx] = g
        return (da,)

    return record(out, (a,), bwd)


def take_pairs(a, rows, cols):
    """out[i] = a[rows[i], cols[i]]; pairs may repeat (grads accumulate)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = a.data[rows, cols]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, cols), g)
        return (da,)

    return record(out, (a,), bwd)


def scatter_vec(n, idx, vals):
    """Place a 1-D tensor at distinct indices of a zero [n] output."""
    idx = np.asarray(idx)
    if np.unique(idx).size != idx.size:
        raise ContractError("scatter_vec requires distinct indices")
    out = np.zeros(n, dtype=vals.data.dtype)
    out[idx] = vals.data
    return record(out, (vals,), lambda g: (g[idx],))


# ------------------------------------------------------------ softmaxes


def softmax_rows(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bwd(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return ((s * (g - inner)).astype(x.dtype),)

    return record(s, (a,), bwd, produced_by="softmax")


def log_softmax_rows(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(x.dtype)
    soft = np.exp(out)

    def bwd(g):
        return ((g - soft * g.sum(axis=-1, keepdims=True)).astype(x.dtype),)

    return record(out, (a,), bwd, produced_by="softmax")


def cross_entropy_from_logprobs(logprobs, targets):
    """Mean negative log-probability of the target column per row."""
    targets = np.asarray(targets)
    n = logprobs.data.shape[0]
    if targets.shape != (n,):
        raise ContractError("targets must be [n]")
    picked = logprobs.data[np.arange(n), targets]
    out = np.asarray(-picked.mean(), dtype=logprobs.data.dtype)

    def bwd(g):
        d = np.zeros_like(logprobs.data)
        d[np.arange(n), targets] = -g / n
        return (d,)

    return record(out, (logprobs,), bwd)


# ----------------------------------------------------------- layer norm


def layer_norm(a, gain, bias, eps=1e-5):
    """Row-wise normalization; output tagged for the quantizer audit."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xc * inv).astype(x.dtype)
    out = xh * gain.data + bias.data

    def bwd(g):
        dgain = (g * xh).sum(axis=tuple(range(x.ndim - 1)))
        dbias = g.sum(axis=tuple(range(x.ndim - 1)))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xh * (gx * xh).mean(axis=-1, keepdims=True))
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return record(out.astype(x.dtype), (a, gain, bias), bwd, produced_by="layer_norm")


def dropout(a, p, rng):
    """Inverted dropout; exact identity at p = 0."""
    if p < 0 or p >= 1:
        raise ContractError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    keep = keep.astype(a.data.dtype)
    return record(a.data * keep, (a,), lambda g: (g * keep,))


# ------------------------------------------------------------ fused ops


def banded_attention(q, k, v, pos, u, vb, window, n_mem=0):
    """Windowed relative-position attention (see kernels for semantics).

    q: [n, H, dk]; k/v: [n_mem+n, H, dk|dv]; pos: [window, H, dk];
    u/vb: [H, dk].  Returns [n, H, dv].
    """
    _check_same_dtype(q, k, v, pos, u, vb)
    if window < 1:
        raise ContractError("window must be >= 1")
    out, attn = kernels.banded_attn_forward(
        q.data, k.data, v.data, pos.data, u.data, vb.data, window, n_mem)

    def bwd(g):
        return kernels.banded_attn_backward(
            np.ascontiguousarray(g), attn, q.data, k.data, v.data,
            pos.data, u.data, vb.data, window, n_mem)

    return record(out, (q, k, v, pos, u, vb), bwd, produced_by="attention")


def window_cache_probs(h, targets, theta, cap):
    """Differentiable cache match probability inside one window.

    h: [n, d] with h[t] predicting targets[t]; theta: scalar tensor.
    Position 0 (empty cache) gets probability 0 and is skipped by the
    mixture downstream.
    """
    targets = np.ascontiguousarray(np.asarray(targets, dtype=np.int64))
    if theta.data.size != 1:
        raise ContractError("theta must be scalar")
    if cap < 1:
        raise ContractError("cache capacity must be >= 1")
    th = float(theta.data)
    p = kernels.window_cache_forward(h.data, targets, th, int(cap))

    def bwd(g):
        dh, dth = kernels.window_cache_backward(
            h.data, targets, th, int(cap), np.ascontiguousarray(g))
        return dh, np.full(theta.data.shape, dth, dtype=theta.data.dtype)

    return record(p, (h, theta), bwd)
