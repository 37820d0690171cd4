"""Symmetric linear fake-quantization with a mantissa-constrained scale.

Conventions:
  * q = clamp(round_half_away(x * inv_scale), -(2^(w-1)-1), 2^(w-1)-1)
  * inv_scale is the serialized quantity; its float32 significand has
    the lowest w bits cleared so dequantization stays cheap in fixed
    point (enforce_mantissa)
  * the straight-through estimator passes gradients unchanged inside
    the clamp range and zeroes them outside
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError

MIN_BITS, MAX_BITS = 2, 16


def qmax(bits):
    return 2 ** (bits - 1) - 1


def _check_bits(bits):
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ContractError(f"bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]")


def compute_scale(values, bits):
    """Per-tensor scale max|x| / (2^(w-1)-1); all-zero tensors get 1."""
    _check_bits(bits)
    m = float(np.max(np.abs(values))) if np.asarray(values).size else 0.0
    if m == 0.0:
        return np.float32(1.0)
    return np.float32(m / qmax(bits))


def enforce_mantissa(x, bits):
    """Clear the lowest `bits` significand bits of a positive float32.

    Rounds toward zero, is idempotent, and errors when bits >= 23 (the
    float32 significand is only 23 bits wide).
    """
    if bits >= 23:
        raise ContractError("mantissa constraint needs bits < 23")
    if bits < 0:
        raise ContractError("bits must be non-negative")
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ContractError("enforce_mantissa expects positive finite values")
    flat = np.atleast_1d(arr).view(np.uint32)
    mask = np.uint32(0xFFFFFFFF) ^ np.uint32((1 << bits) - 1)
    out = (flat & mask).view(np.float32)
    return np.float32(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def inv_scale_for(values, bits):
    """Constrained inverse scale used by all quantization math."""
    scale = compute_scale(values, bits)
    return enforce_mantissa(np.float32(1.0) / scale, bits)


def round_half_away(v):
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def fake_quantize(x, bits, inv_scale):
    """Quantize-dequantize keeping the input dtype.

    Idempotent and odd (fq(-x) == -fq(x)) bit for bit: integer points
    round back to themselves because the re-rounding error is far below
    half a step.
    """
    _check_bits(bits)
    x = np.asarray(x)
    lim = x.dtype.type(qmax(bits))
    inv = x.dtype.type(inv_scale)
    q = np.clip(round_half_away(x * inv), -lim, lim)
    return (q / inv).astype(x.dtype)


def quantize_to_int(x, bits, inv_scale):
    """Integer codes for storage (int32 container)."""
    _check_bits(bits)
    x = np.asarray(x)
    lim = x.dtype.type(qmax(bits))
    inv = x.dtype.type(inv_scale)
    q = np.clip(round_half_away(x * inv), -lim, lim)
    return q.astype(np.int32)


def dequantize(q, inv_scale, dtype=np.float32):
    return (q.astype(dtype) / dtype(inv_scale)).astype(dtype)


def fq_op(t, bits, inv_scale):
    """Autograd fake-quantization with straight-through backward."""
    x = t.data
    out = fake_quantize(x, bits, inv_scale)
    inside = np.abs(x * x.dtype.type(inv_scale)) <= x.dtype.type(qmax(bits))

    def bwd(g):
        return (np.where(inside, g, 0).astype(x.dtype),)

    return T.record(out, (t,), bwd, produced_by="fake_quant")


EXEMPT_PRODUCERS = ("layer_norm", "softmax", "embedding")


def audit_tape_exemptions(tape):
    """Static walk over a recorded tape: no fake-quant node may consume
    a layer-norm output, a softmax output, or an embedding lookup."""
    violations = []
    for node in tape.nodes:
        if node.out.produced_by != "fake_quant":
            continue
        for parent in node.parents:
            if parent.produced_by in EXEMPT_PRODUCERS:
                violations.append(parent.produced_by)
    return violations


# ------------------------------------------------------ model-level stage

def default_weight_flags(state):
    """Tensors that get quantized: 2-d non-embedding weight matrices
    (attention and feed-forward projections plus the tail cluster rows).
    Embedding tables and projections, biases, norm parameters, the
    global attention biases, and the cache scalars stay full precision.
    """
    names = []
    for name, t in sorted(state.params.items()):
        if t.data.ndim != 2 or name.startswith(("embed.", "attn.")):
            continue
        names.append(name)
    return names


def default_act_sites(config):
    out = []
    for l in range(config.n_layers):
        out += [f"layer{l}.attn_out", f"layer{l}.ffn_hidden", f"layer{l}.ffn_out"]
    return out


def calibrate_activations(state, train_ids, batches=10, seed=0):
    """Running max|x| at every activation site over sampled windows."""
    from . import corpus as corpus_mod

    rng = np.random.default_rng(seed)
    state.act_observer = {}
    try:
        for _ in range(batches):
            window = corpus_mod.sample_training_windows(
                train_ids, state.config.extended_context, 1, rng)[0]
            with T.Tape():
                state.forward_training(window[:-1])
        observed = dict(state.act_observer)
    finally:
        state.act_observer = None
    return observed


def quantize_model(state, train_ids, val_ids, bits, act_bits=None,
                   settings=None, calib_batches=10, weight_names=None,
                   metrics_path=None):
    """Quantize weights and activations with one quantization-aware step.

    Computes per-tensor weight scales, calibrates activation scales from
    `calib_batches` training windows, runs exactly one training step with
    fake-quantization active (cache scalars frozen — quantization pins
    them, so cache search must happen first), snaps weights to the grid,
    and records storage metadata for the scorer and the checkpoint.
    """
    from . import train as train_mod

    _check_bits(bits)
    act_bits = bits if act_bits is None else act_bits
    _check_bits(act_bits)
    weight_names = weight_names or default_weight_flags(state)
    for name in weight_names:
        if name.startswith("embed."):
            raise ContractError("embedding tables are exempt from quantization")

    inv_scales = {n: inv_scale_for(state.params[n].data, bits)
                  for n in weight_names}
    act_max = calibrate_activations(state, train_ids,
                                    batches=calib_batches,
                                    seed=settings.seed if settings else 0)
    act_inv = {}
    for site in default_act_sites(state.config):
        m = act_max.get(site, 0.0)
        scale = np.float32(1.0) if m == 0.0 else np.float32(m / qmax(act_bits))
        act_inv[site] = enforce_mantissa(np.float32(1.0) / scale, act_bits)

    state.weight_quant = {n: (bits, inv_scales[n]) for n in weight_names}
    state.act_quant = {s: (act_bits, act_inv[s]) for s in act_inv}

    if settings is None:
        settings = train_mod.TrainSettings(steps=1, batch_size=1, warmup=0,
                                           eval_every=10 ** 9)
    frozen = tuple(n for n in ("cache.theta_raw", "cache.lambda_raw")
                   if n in state.params)
    qat = train_mod.TrainSettings(
        steps=1, batch_size=settings.batch_size, lr=settings.lr, warmup=0,
        clip_norm=settings.clip_norm, seed=settings.seed,
        cache_cap=settings.cache_cap, hebbian=False,
        eval_every=10 ** 9, eval_tokens=settings.eval_tokens)
    summary = train_mod.train(state, train_ids, val_ids, qat,
                              metrics_path=metrics_path, frozen=frozen)

    for name in weight_names:
        p = state.params[name]
        p.data = fake_quantize(p.data, bits, inv_scales[name])
        if name in state.masks:
            p.data[~state.masks[name]] = 0
    state.weight_quant = None
    state.cache_frozen = True
    state.quantization = {
        "bits": {n: bits for n in weight_names},
        "inv_scale": {n: float(inv_scales[n]) for n in weight_names},
        "act_bits": {s: act_bits for s in act_inv},
        "act_inv_scale": {s: float(v) for s, v in act_inv.items()},
    }
    state.invalidate_caches()
    summary["quantized_tensors"] = len(weight_names)
    summary["weight_bits"] = bits
    summary["act_bits"] = act_bits
    return summary
