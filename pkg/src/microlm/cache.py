"""Non-parametric cache over recent hidden states, plus eval drivers.

The cache stores (hidden, following-token) pairs for the most recent
positions.  When predicting, each stored entry votes for its token with
weight exp(theta * h_s . h_t); the normalized vote mass is mixed into
the model distribution with coefficient lambda:

    p(x) = (1 - lambda) * p_model(x) + lambda * p_cache(x)

Entries are labeled with the token that actually followed them, so a
label is only available one step later; both drivers push entries with
that one-step delay, which keeps occupancy at min(t, capacity) when
scoring the t-th prediction of a stream.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ContractError
from .model import StreamState


class CacheParams:
    """Inference-time cache settings (capacity is a deployment knob)."""

    def __init__(self, capacity, theta, lam):
        if capacity < 1:
            raise ContractError("cache capacity must be >= 1")
        if not 0.0 <= lam < 1.0:
            raise ContractError("lambda must be in [0, 1)")
        if theta <= 0.0:
            raise ContractError("theta must be positive")
        self.capacity = int(capacity)
        self.theta = float(theta)
        self.lam = float(lam)


class CacheState:
    """FIFO store of (hidden, label) pairs for streaming inference."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self.hiddens = []
        self.labels = []

    def __len__(self):
        return len(self.hiddens)

    def push(self, h, label):
        self.hiddens.append(np.asarray(h))
        self.labels.append(int(label))
        if len(self.hiddens) > self.capacity:
            self.hiddens.pop(0)
            self.labels.pop(0)

    def vote_weights(self, h_t, theta):
        """Normalized vote weight per stored entry, or None when empty."""
        occ = len(self.hiddens)
        if occ == 0:
            return None
        dots = np.empty(occ, dtype=np.float64)
        for i in range(occ):
            dots[i] = float(np.dot(self.hiddens[i], h_t))
        z = theta * dots
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()


def mix_distribution(dist, cache_state, h_t, params, meter=None):
    """Full mixed distribution for one step (streaming path)."""
    w = cache_state.vote_weights(h_t, params.theta)
    if w is None:
        return dist
    occ = len(cache_state)
    d = h_t.shape[-1]
    if meter:
        meter.cache_score(occ, d)
    mixed = (1.0 - params.lam) * dist.astype(np.float64)
    for i, lab in enumerate(cache_state.labels):
        mixed[lab - 1] += params.lam * w[i]
    if meter:
        meter.cache_mix(occ)
    return mixed


def collect_hiddens(state, inputs, chunk=None):
    """Run the chunked eval forward over a stream of input ids."""
    chunk = chunk or state.config.extended_context
    mems = None
    parts = []
    for s in range(0, len(inputs), chunk):
        h, mems = state.eval_chunk(inputs[s:s + chunk], mems)
        parts.append(h)
    return np.concatenate(parts, axis=0)


def evaluate_stream(state, ids, cache_params=None, chunk=None,
                    return_hiddens=False):
    """Per-token negative log-likelihood over a 1-based id stream.

    Scores ids[1:] given the preceding tokens.  Uses the chunked batch
    forward (numerically identical to streaming) and, when cache_params
    is given, the vectorized cache pass over precomputed hiddens.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] < 2:
        raise ContractError("need at least two tokens to evaluate")
    inputs = ids[:-1]
    targets = ids[1:]
    hid = collect_hiddens(state, inputs, chunk)
    lp = state.target_logprob_np(hid, targets).astype(np.float64)
    if cache_params is None:
        nll = -lp
    else:
        dots, occ = kernels.stream_dots(hid, cache_params.capacity)
        pc = kernels.cache_probs_from_dots(
            dots, targets, occ, targets,
            np.float32(cache_params.theta)).astype(np.float64)
        # The mixture only applies where the cache holds at least one
        # entry; at empty-cache positions the model distribution stands
        # alone (anything else would leave unnormalized mass).
        lam_t = np.where(occ > 0, cache_params.lam, 0.0)
        p = (1.0 - lam_t) * np.exp(lp) + lam_t * pc
        nll = -np.log(np.maximum(p, 1e-300))
    if return_hiddens:
        return nll, hid
    return nll


def stream_nll(state, ids, cache_params=None, meter=None):
    """Strictly streaming scoring: one token in, full distribution out.

    Slow path; exists to prove the chunked path equivalent and to give
    op meters something real to instrument.  Returns per-token NLL.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] < 2:
        raise ContractError("need at least two tokens to evaluate")
    ss = StreamState(state.config)
    cs = CacheState(cache_params.capacity) if cache_params else None
    nll = np.empty(ids.shape[0] - 1, dtype=np.float64)
    pending_h = None
    for t in range(ids.shape[0] - 1):
        tok = int(ids[t])
        h = state.infer_next(ss, tok, meter)
        if cs is not None and pending_h is not None:
            cs.push(pending_h, tok)
        dist = state.next_distribution(h, meter)
        if cs is not None:
            dist = mix_distribution(dist, cs, h, cache_params, meter)
        nll[t] = -math.log(max(float(dist[int(ids[t + 1]) - 1]), 1e-300))
        pending_h = h
    return nll


def perplexity(nll):
    return float(np.exp(np.mean(nll)))


# ---------------------------------------------------------------- search

def golden_section(f, lo, hi, rel_tol=1e-3, max_iter=80):
    """Minimize a unimodal scalar function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - (b - a) * invphi
    d = a + (b - a) * invphi
    fc, fd = f(c), f(d)
    span = max(abs(a), abs(b), 1e-9)
    it = 0
    while (b - a) > rel_tol * span and it < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - (b - a) * invphi
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + (b - a) * invphi
            fd = f(d)
        it += 1
    return (c, fc) if fc <= fd else (d, fd)


def coordinate_search(objective, start, brackets, order, rounds=3,
                      rel_tol=1e-3):
    """Cyclic one-dimensional refinement with monotone acceptance.

    objective takes keyword arguments named by `order`; a coordinate's
    minimizer is only adopted when it strictly improves the best value,
    so the search can never end worse than `start`.
    """
    best = dict(start)
    best_f = objective(**best)
    history = [(dict(best), best_f)]
    for _ in range(rounds):
        for name in order:
            lo, hi = brackets[name]

            def f1(x, _name=name):
                trial = dict(best)
                trial[_name] = x
                return objective(**trial)

            x, fx = golden_section(f1, lo, hi, rel_tol=rel_tol)
            if fx < best_f:
                best[name] = x
                best_f = fx
            history.append((dict(best), best_f))
    return best, best_f, history


def search_cache_params(state, ids, capacity, theta0=None, lam0=None,
                        rounds=3, rel_tol=1e-3, chunk=None):
    """Tune (theta, lambda) on a held-out stream at fixed capacity.

    Hiddens and dot products are computed once; each objective call is
    then just an exponential re-weighting, so the search is cheap even
    on long streams.  lambda is refined first, then theta (in log
    space), for `rounds` passes.
    """
    theta0 = state.cache_theta() if theta0 is None else float(theta0)
    lam0 = state.cache_lambda() if lam0 is None else float(lam0)
    ids = np.asarray(ids, dtype=np.int64)
    inputs, targets = ids[:-1], ids[1:]
    hid = collect_hiddens(state, inputs, chunk)
    lp = state.target_logprob_np(hid, targets).astype(np.float64)
    p_model = np.exp(lp)
    dots, occ = kernels.stream_dots(hid, capacity)

    def objective(log_theta, lam):
        pc = kernels.cache_probs_from_dots(
            dots, targets, occ, targets,
            np.float32(math.exp(log_theta))).astype(np.float64)
        p = (1.0 - lam) * p_model + lam * pc
        return float(-np.mean(np.log(np.maximum(p, 1e-300))))

    brackets = {
        "lam": (0.0, 0.99),
        "log_theta": (math.log(theta0 / 16.0), math.log(theta0 * 16.0)),
    }
    start = {"log_theta": math.log(theta0), "lam": lam0}
    best, best_f, history = coordinate_search(
        objective, start, brackets, order=("lam", "log_theta"),
        rounds=rounds, rel_tol=rel_tol)
    return {
        "theta": math.exp(best["log_theta"]),
        "lam": best["lam"],
        "nll": best_f,
        "start_nll": history[0][1],
        "evals": len(history),
    }
