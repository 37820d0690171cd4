"""Adam training over randomly sampled extended-context windows.

One step samples a batch of windows, builds every window's loss on a
single tape (cache-mixed hard loss plus optional soft-label loss), does
one backward pass, clips the global gradient norm, applies Adam with
warmup+cosine learning rate, re-applies any pruning masks, and finally
runs the non-gradient output-row interpolation.  Everything iterates
parameters in sorted-name order, so reruns are bit-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import cache as cache_mod
from . import corpus
from . import tensor as T
from .errors import ConfigError, InputError, NumericalError


@dataclass
class TrainSettings:
    steps: int
    batch_size: int = 8
    lr: float = 1e-4
    warmup: int = 1000
    clip_norm: float = 0.25
    seed: int = 0
    cache_cap: int = 2000          # training-time cache size
    hebbian: bool = True
    hebbian_gamma_min: float = 0.01
    hebbian_limit: int = 500
    lam_max: float = 0.0           # distillation off when both are 0
    lam_min: float = 0.0
    eval_every: int = 200
    eval_tokens: int = 20000

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if not 0.0 <= self.lam_min <= self.lam_max <= 1.0:
            raise ConfigError("need 0 <= lam_min <= lam_max <= 1")
        if self.batch_size < 1 or self.warmup < 0:
            raise ConfigError("bad batch size or warmup")


def lr_schedule(t, base, warmup, total):
    """Linear 0 -> base over `warmup` steps, then cosine base -> 0."""
    if warmup > 0 and t < warmup:
        return base * t / warmup
    if total <= warmup:
        return base
    frac = (t - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def lambda_soft(t, lam_max, lam_min, total):
    """Affine anneal from lam_max at t=0 to lam_min at t=total, clamped."""
    t = min(max(t, 0), total)
    return lam_max - (t / total) * (lam_max - lam_min)


class Adam:
    """Standard Adam with bias correction; state kept per parameter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def grad_global_norm(params):
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Scale all gradients so the global norm is at most max_norm."""
    norm = grad_global_norm(params)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= np.asarray(scale, dtype=g.dtype)
    return norm


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ----------------------------------------------------------- loss pieces

def hard_loss(state, h, targets, head_lp, cache_cap):
    """Mean NLL of the targets under the (optionally cache-mixed) model."""
    lp = state.target_logprobs_train(h, targets, head_lp)
    if not state.config.cache_enabled or cache_cap < 1:
        return T.neg(T.mean_all(lp))
    theta = T.exponential(state.params["cache.theta_raw"])
    lam = T.sigmoid(state.params["cache.lambda_raw"])
    p_model = T.exponential(lp)
    p_cache = T.window_cache_probs(h, np.asarray(targets, dtype=np.int64),
                                   theta, cache_cap)
    # Position 0 of the window sees an empty cache (p_cache is zero
    # there), so the mixture weight is masked off: the model keeps its
    # full mass instead of being scaled by (1 - lam).
    occupied = np.ones(len(targets), dtype=h.data.dtype)
    occupied[0] = 0.0
    lam_t = T.multiply(lam, T.Tensor(occupied))
    mixed = T.add(T.multiply(p_model, T.sub(1.0, lam_t)),
                  T.multiply(p_cache, lam_t))
    return T.neg(T.mean_all(T.log(mixed)))


def total_loss(hard, soft, lam):
    """(1 - lam) * hard + lam * soft; pass soft=None when not distilling."""
    if soft is None or lam == 0.0:
        return hard
    return T.add(T.multiply(hard, 1.0 - lam), T.multiply(soft, lam))


def window_loss(state, window_ids, cache_cap, teacher_slice=None,
                lam=0.0, drop_rng=None):
    """Loss for one extended-context window; returns (loss, h, targets).

    The soft loss reads the pre-mixture model distribution (the teacher
    never saw a cache); the hard loss reads the mixed probability.
    """
    inputs = window_ids[:-1]
    targets = window_ids[1:]
    h = state.forward_training(inputs, drop_rng)
    head_lp = state.head_logprobs_train(h)
    hard = hard_loss(state, h, targets, head_lp, cache_cap)
    soft = None
    if teacher_slice is not None and lam > 0.0:
        ids, probs = teacher_slice
        soft = state.soft_label_loss_train(h, ids, probs, head_lp)
    return total_loss(hard, soft, lam), h, targets


# ---------------------------------------------------------- teacher labels

TEACHER_FORMAT = "microlm-teacher-labels-v1"


class TeacherLabels:
    """Top-K teacher predictions per stream position.

    Row p-1 holds the teacher's K largest-probability (token id, prob)
    pairs for predicting stream position p (1-based; position 0 has no
    prediction).  Probabilities are raw, not renormalized.
    """

    def __init__(self, ids, probs, top_k):
        self.ids = ids            # [n_positions, K] uint32
        self.probs = probs        # [n_positions, K] float32
        self.top_k = int(top_k)

    def __len__(self):
        return self.ids.shape[0]

    def window(self, pos_start, n):
        """Label slice for targets at stream positions pos_start..+n-1."""
        i = pos_start - 1
        if i < 0 or i + n > len(self):
            raise InputError("teacher labels do not cover the window")
        return (self.ids[i:i + n].astype(np.int64),
                self.probs[i:i + n])

    def save(self, path):
        rec = np.dtype([("id", "<u4", (self.top_k,)),
                        ("prob", "<f4", (self.top_k,))])
        arr = np.empty(len(self), dtype=rec)
        arr["id"] = self.ids
        arr["prob"] = self.probs
        with open(str(path) + ".bin", "wb") as f:
            f.write(arr.tobytes())
        with open(path, "w") as f:
            json.dump({"format": TEACHER_FORMAT, "top_k": self.top_k,
                       "n_positions": len(self), "start_pos": 1}, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            meta = json.load(f)
        if meta.get("format") != TEACHER_FORMAT:
            raise InputError("not a teacher-label store")
        k = int(meta["top_k"])
        rec = np.dtype([("id", "<u4", (k,)), ("prob", "<f4", (k,))])
        with open(str(path) + ".bin", "rb") as f:
            buf = f.read()
        if len(buf) != int(meta["n_positions"]) * rec.itemsize:
            raise InputError("teacher-label store truncated")
        arr = np.frombuffer(buf, dtype=rec)
        return cls(arr["id"].copy(), arr["prob"].copy(), k)


def extract_teacher_labels(teacher_state, ids, top_k=30, chunk=None):
    """Offline pass: top-K of the teacher's full predictive distribution
    at every stream position (sorted descending by probability)."""
    ids = np.asarray(ids, dtype=np.int64)
    v = teacher_state.config.vocab_size
    if ids.max() > v or ids.min() < 1:
        raise InputError("stream ids outside teacher vocabulary")
    k = min(top_k, v)
    chunk = chunk or teacher_state.config.extended_context
    n = ids.shape[0] - 1
    out_ids = np.empty((n, k), dtype=np.uint32)
    out_probs = np.empty((n, k), dtype=np.float32)
    mems = None
    for s in range(0, n, chunk):
        h, mems = teacher_state.eval_chunk(ids[s:min(s + chunk, n)], mems)
        probs = np.exp(teacher_state.full_logprobs_np(h))
        part = np.argpartition(probs, v - k, axis=1)[:, v - k:]
        vals = np.take_along_axis(probs, part, axis=1)
        order = np.argsort(-vals, axis=1, kind="stable")
        top = np.take_along_axis(part, order, axis=1)
        out_ids[s:s + h.shape[0]] = top.astype(np.uint32) + 1
        out_probs[s:s + h.shape[0]] = np.take_along_axis(vals, order, axis=1)
    return TeacherLabels(out_ids, out_probs, k)


# ------------------------------------------------------------- main loop

def validate(state, val_ids, settings, max_tokens=None):
    n = max_tokens or settings.eval_tokens
    ids = np.asarray(val_ids[:n], dtype=np.int64)
    cp = None
    if state.config.cache_enabled and settings.cache_cap >= 1:
        cp = cache_mod.CacheParams(settings.cache_cap, state.cache_theta(),
                                   state.cache_lambda())
    nll = cache_mod.evaluate_stream(state, ids, cp)
    return cache_mod.perplexity(nll)


def train(state, train_ids, val_ids, settings, teacher_labels=None,
          metrics_path=None, checkpoint_fn=None, step_hook=None,
          frozen=()):
    """Run the full loop; returns a summary dict.

    teacher_labels: TeacherLabels covering the training stream (enables
    the annealed soft loss).  checkpoint_fn(state, step) is called after
    every validation so callers can persist the last good model;
    step_hook(state, step) runs before each step (the pruner uses it to
    tighten masks on schedule).  Parameters named in `frozen` get their
    gradients dropped after backward, so the optimizer never moves them.
    """
    cfg = state.config
    train_ids = np.asarray(train_ids, dtype=np.int64)
    val_ids = np.asarray(val_ids, dtype=np.int64)
    rng = np.random.default_rng(settings.seed)
    drop_rng = np.random.default_rng(settings.seed + 1) if cfg.dropout > 0 else None
    opt = Adam(state.params)
    log = open(metrics_path, "a") if metrics_path else None
    history = []
    skipped = 0
    t0 = time.time()
    try:
        for step in range(settings.steps):
            if step_hook is not None:
                step_hook(state, step)
            lr = lr_schedule(step, settings.lr, settings.warmup, settings.steps)
            lam = lambda_soft(step, settings.lam_max, settings.lam_min,
                              settings.steps)
            batch, starts = corpus.sample_training_windows(
                train_ids, cfg.extended_context, settings.batch_size, rng,
                return_starts=True)
            zero_grads(state.params)
            hebbian_batch = []
            with T.Tape() as tape:
                losses = []
                for b in range(settings.batch_size):
                    tslice = None
                    if teacher_labels is not None and lam > 0.0:
                        tslice = teacher_labels.window(
                            int(starts[b]) + 1, cfg.extended_context)
                    loss_b, h_b, targets_b = window_loss(
                        state, batch[b], settings.cache_cap, tslice, lam,
                        drop_rng)
                    losses.append(loss_b)
                    hebbian_batch.append((h_b.data.copy(), targets_b))
                total = losses[0]
                for lb in losses[1:]:
                    total = T.add(total, lb)
                total = T.multiply(total, 1.0 / settings.batch_size)
                loss_val = float(total.data)
                if not math.isfinite(loss_val):
                    raise NumericalError(
                        f"training loss diverged at step {step}: {loss_val}")
                tape.backward(total)
            for name in frozen:
                state.params[name].grad = None
            gnorm = grad_global_norm(state.params)
            if not math.isfinite(gnorm):
                skipped += 1
                history.append({"step": step, "loss": loss_val,
                                "event": "skipped non-finite gradients"})
                continue
            clip_gradients(state.params, settings.clip_norm)
            opt.step(lr)
            for name, mask in state.masks.items():
                data = state.params[name].data
                data[~mask] = 0
            if settings.hebbian:
                for h_np, targets_b in hebbian_batch:
                    state.hebbian_update(h_np, targets_b,
                                         settings.hebbian_gamma_min,
                                         settings.hebbian_limit)
            state.invalidate_caches()
            rec = {"step": step, "loss": round(loss_val, 6),
                   "lr": round(lr, 8), "grad_norm": round(gnorm, 6),
                   "lambda_soft": round(lam, 6)}
            last = step == settings.steps - 1
            if (step + 1) % settings.eval_every == 0 or last:
                ppl = validate(state, val_ids, settings)
                if not math.isfinite(ppl):
                    raise NumericalError(
                        f"validation perplexity diverged at step {step}")
                rec["val_ppl"] = round(ppl, 4)
                rec["elapsed_s"] = round(time.time() - t0, 2)
                history.append(rec)
                if checkpoint_fn is not None:
                    checkpoint_fn(state, step)
            if log and "val_ppl" in rec:
                log.write(json.dumps(rec) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    evals = [r for r in history if "val_ppl" in r]
    return {
        "steps": settings.steps,
        "final_loss": history[-1]["loss"] if history else None,
        "final_val_ppl": evals[-1]["val_ppl"] if evals else None,
        "best_val_ppl": min(r["val_ppl"] for r in evals) if evals else None,
        "skipped_steps": skipped,
        "history": history,
    }
