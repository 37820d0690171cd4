"""Challenge cost model: fractional parameter storage, per-token op
counts for streaming inference, and the normalized score

    score = param_storage / 159e6 + (mul_ops + add_ops) / 318e6.

Counting conventions (declared here, used everywhere):
  * a stored w-bit value costs w/32 of a parameter; per-tensor scale
    scalars cost one full parameter each
  * sparse storage defaults to a bitmask format: survivors at w bits
    plus one mask bit per original weight; a per-survivor w-bit index
    format is also available; the scorer takes the cheaper of dense
    and sparse per tensor
  * a multiply through a w-bit weight costs w/32; all other multiplies
    and all additions cost 1; transcendentals (exp, division, sqrt)
    cost 1 multiply-equivalent; precision conversions are free
  * pruned-away weights contribute neither multiplies nor accumulation
    additions: a linear with nnz surviving weights over n outputs costs
    nnz multiplies and max(nnz - n, 0) (+ n if biased) additions per row
  * embedding row lookup is free; bin up-projections pay their matmul
  * load-time transforms (projected positional keys, the assembled
    softmax head) are free per token
  * the cache pays occ*d similarity multiplies plus its exponentials
    and normalization; mixing folds the (1 - lambda) factor into the
    softmax normalizer, so it costs 1 + occ multiplies and occ adds

Every cost is a dyadic rational (denominator a power of two) far below
2**53, so float accumulation is exact and order-independent; that is
what lets the instrumented meter match the analytic count bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

PARAM_NORM = 159e6
OP_NORM = 318e6

COMPONENTS = ("embedding", "attention", "ffn", "layer_norm", "softmax", "cache")


class OpMeter:
    """Accumulates multiply/add counts under the declared conventions.

    The streaming inference path calls these methods with the shapes it
    actually uses; the analytic counter calls the same methods with
    multiplicities.  Both therefore share one definition of every cost.
    """

    def __init__(self, tensor_costs=None):
        self.muls = 0.0
        self.adds = 0.0
        self.by_component = {c: [0.0, 0.0] for c in COMPONENTS}
        self.tensor_costs = tensor_costs or {}

    def _acc(self, comp, muls, adds, times):
        m, a = muls * times, adds * times
        self.muls += m
        self.adds += a
        slot = self.by_component.setdefault(comp, [0.0, 0.0])
        slot[0] += m
        slot[1] += a

    def _cost(self, weight, dense):
        if weight is None or weight not in self.tensor_costs:
            return 32, dense
        bits, nnz = self.tensor_costs[weight]
        return bits, dense if nnz is None else nnz

    # each method documents its cost; `times` scales a whole call

    def linear(self, m, k, n, bias=False, weight=None, comp="ffn", times=1):
        bits, nnz = self._cost(weight, k * n)
        muls = m * nnz * (bits / 32.0)
        adds = m * max(nnz - n, 0) + (m * n if bias else 0)
        self._acc(comp, muls, adds, times)

    def attention_scores(self, win, H, dk, times=1):
        """Content and position dot products, combine, and 1/sqrt(dk)."""
        muls = 2 * win * H * dk + win * H
        adds = 2 * H * dk + 2 * win * H * (dk - 1) + win * H
        self._acc("attention", muls, adds, times)

    def softmax(self, n, rows=1, comp="softmax", times=1):
        """exp per entry, sum, one reciprocal, normalize."""
        muls = rows * (2 * n + 1)
        adds = rows * (n - 1)
        self._acc(comp, muls, adds, times)

    def attention_combine(self, win, H, dk, times=1):
        muls = win * H * dk
        adds = (win - 1) * H * dk
        self._acc("attention", muls, adds, times)

    def layer_norm(self, d, times=1):
        """mean, variance, sqrt, reciprocal, scale, gain, bias."""
        muls = 3 * d + 4
        adds = 4 * d - 1
        self._acc("layer_norm", muls, adds, times)

    def add(self, n, comp="attention", times=1):
        self._acc(comp, 0, n, times)

    def mul(self, n, comp="softmax", times=1):
        self._acc(comp, n, 0, times)

    def cache_score(self, occ, d, times=1):
        """Similarities, temperature, exps, denominator, normalization."""
        muls = occ * d + 3 * occ + 1
        adds = occ * (d - 1) + (occ - 1)
        self._acc("cache", muls, adds, times)

    def cache_mix(self, occ, times=1):
        """(1-lambda) folded into the softmax normalizer; lambda * vote
        accumulated per stored entry."""
        self._acc("cache", 1 + occ, occ, times)

    def totals(self):
        return self.muls, self.adds


# ------------------------------------------------------------ parameters

def sparse_param_cost(n_total, n_survivors, bits, fmt="bitmask"):
    """Fractional 32-bit-parameter cost of one pruned tensor."""
    if not 0 <= n_survivors <= n_total:
        raise ContractError("survivors out of range")
    dense = n_total * bits / 32.0
    if fmt == "bitmask":
        sparse = n_survivors * bits / 32.0 + n_total / 32.0
    elif fmt == "survivor_index":
        sparse = n_survivors * (bits + bits) / 32.0
    else:
        raise ContractError(f"unknown sparse format {fmt!r}")
    return min(dense, sparse)


def compressed_param_cost(n_total, sparsity, bits, fmt="bitmask"):
    """Cost after pruning `sparsity` of n_total weights to `bits` bits."""
    zeros = int(np.floor(sparsity * n_total))
    return sparse_param_cost(n_total, n_total - zeros, bits, fmt)


def count_params(arrays, masks=None, bits=None, sparse_format="bitmask"):
    """Fractional parameter storage of a checkpoint's arrays.

    arrays: name -> ndarray; masks: name -> bool ndarray for pruned
    tensors; bits: name -> stored bit width for quantized tensors (each
    quantized tensor also pays one 32-bit scale scalar).  Training-only
    state (counters, the masks themselves) is excluded: mask overhead
    is what the bitmask term of the sparse format already charges.
    """
    masks = masks or {}
    bits = bits or {}
    total = 0.0
    for name, arr in sorted(arrays.items()):
        if name == "state.counters" or name.startswith("mask:"):
            continue
        n = int(arr.size)
        w = int(bits.get(name, 32))
        if name in masks:
            s = int(np.count_nonzero(masks[name]))
            total += sparse_param_cost(n, s, w, sparse_format)
        else:
            total += n * w / 32.0
        if name in bits:
            total += 1.0      # the tensor's scale, stored at 32 bits
    return total


def costs_from_state(state, quant_bits=None):
    """tensor name -> (bits, nnz) map for op metering."""
    out = {}
    for name, t in state.params.items():
        w = 32
        if isinstance(quant_bits, int):
            w = quant_bits
        elif quant_bits and name in quant_bits:
            w = quant_bits[name]
        nnz = None
        if name in state.masks:
            nnz = int(np.count_nonzero(state.masks[name]))
        out[name] = (w, nnz)
    return out


# ------------------------------------------------------------- op counts

def _min_histogram(n, cap):
    """Multiplicity of each value of min(t, cap) for t = 1..n."""
    out = {}
    for w in range(1, min(cap, n) + 1):
        out[w] = 1
    if n > cap:
        out[cap] += n - cap
    return out


def count_ops(config, n_tokens, bin_counts, cache_capacity=None,
              tensor_costs=None, meter=None):
    """Analytic per-stream op count for streaming inference.

    Mirrors the metered path call for call: embedding up-projections by
    bin, per-layer windowed attention at window min(t, C), feed-forward,
    layer norms, the full output distribution, and cache scoring at
    occupancy min(t-1, capacity).  bin_counts describes the composition
    of the n_tokens INPUT positions (the output distribution always
    touches every bin, so target composition never matters).  Returns
    the meter (totals are for the whole stream; divide by n_tokens for
    per-token numbers).
    """
    cfg = config
    if sum(bin_counts) != n_tokens:
        raise ContractError("bin_counts must sum to n_tokens")
    meter = meter or OpMeter(tensor_costs)
    d, H, dk = cfg.d_model, cfg.n_heads, cfg.d_head
    hd = H * dk
    N = n_tokens
    sizes = cfg.bin_sizes()
    v0 = sizes[0]
    n_tail = len(cfg.bins) - 1

    for b, cnt in enumerate(bin_counts):
        if cnt and cfg.bin_dims[b] != d:
            meter.linear(1, cfg.bin_dims[b], d, weight=f"embed.proj{b}",
                         comp="embedding", times=cnt)

    win_hist = _min_histogram(N, cfg.context)
    for l in range(cfg.n_layers):
        meter.linear(1, d, hd, weight=f"layer{l}.attn.wq", comp="attention", times=N)
        meter.linear(1, d, hd, weight=f"layer{l}.attn.wk", comp="attention", times=N)
        meter.linear(1, d, hd, weight=f"layer{l}.attn.wv", comp="attention", times=N)
        for w, mult in win_hist.items():
            meter.attention_scores(w, H, dk, times=mult)
            meter.softmax(w, rows=H, comp="attention", times=mult)
            meter.attention_combine(w, H, dk, times=mult)
        meter.linear(1, hd, d, weight=f"layer{l}.attn.wo", comp="attention", times=N)
        meter.add(d, comp="attention", times=N)
        meter.layer_norm(d, times=N)
        meter.linear(1, d, cfg.d_ff, bias=True, weight=f"layer{l}.ffn.w1",
                     comp="ffn", times=N)
        meter.linear(1, cfg.d_ff, d, bias=True, weight=f"layer{l}.ffn.w2",
                     comp="ffn", times=N)
        meter.add(d, comp="ffn", times=N)
        meter.layer_norm(d, times=N)

    meter.linear(1, d, v0, weight="embed.table0", comp="softmax", times=N)
    if n_tail:
        meter.linear(1, d, n_tail, weight="softmax.cluster", comp="softmax", times=N)
    meter.softmax(v0 + n_tail, times=N)
    for b in range(1, len(cfg.bins)):
        if cfg.bin_dims[b] != d:
            meter.linear(1, d, cfg.bin_dims[b], weight=f"embed.proj{b}",
                         comp="softmax", times=N)
        meter.linear(1, cfg.bin_dims[b], sizes[b], weight=f"embed.table{b}",
                     comp="softmax", times=N)
        meter.softmax(sizes[b], times=N)
        meter.mul(sizes[b], comp="softmax", times=N)

    if cache_capacity:
        d_hidden = d
        for occ, mult in _min_histogram(N - 1, cache_capacity).items():
            meter.cache_score(occ, d_hidden, times=mult)
            meter.cache_mix(occ, times=mult)
    return meter


# --------------------------------------------------------------- scoring

def micronet_score(param_storage, total_ops):
    return param_storage / PARAM_NORM + total_ops / OP_NORM


@dataclass
class ScoreReport:
    param_storage: float
    mul_ops: float          # mean per token
    add_ops: float          # mean per token
    breakdown: dict = field(default_factory=dict)  # comp -> (muls, adds)/token

    @property
    def total_ops(self):
        return self.mul_ops + self.add_ops

    @property
    def score(self):
        return micronet_score(self.param_storage, self.total_ops)

    def validate(self):
        if min(self.param_storage, self.mul_ops, self.add_ops) < 0:
            raise ContractError("report fields must be nonnegative")

    def format(self):
        lines = [
            "cost report",
            "===========",
            f"param storage : {self.param_storage:,.2f} 32-bit equivalents",
            f"mul ops/token : {self.mul_ops:,.2f}",
            f"add ops/token : {self.add_ops:,.2f}",
            f"ops/token     : {self.mul_ops + self.add_ops:,.2f}",
            f"score         : {self.score:.6f}",
            "",
            "per-component ops per token",
            f"{'component':<12}{'muls':>16}{'adds':>16}",
        ]
        for comp in COMPONENTS:
            m, a = self.breakdown.get(comp, (0.0, 0.0))
            lines.append(f"{comp:<12}{m:>16,.2f}{a:>16,.2f}")
        return "\n".join(lines)


def score_state(state, n_tokens, bin_counts, cache_capacity=None,
                quant_bits=None, sparse_format="bitmask"):
    """Full report for a model state under given eval-stream statistics."""
    costs = costs_from_state(state, quant_bits)
    meter = count_ops(state.config, n_tokens, bin_counts, cache_capacity,
                      tensor_costs=costs)
    bits_map = {}
    if isinstance(quant_bits, int):
        bits_map = {n: quant_bits for n in state.params}
    elif quant_bits:
        bits_map = dict(quant_bits)
    params = count_params(state.to_arrays(), masks=state.masks, bits=bits_map,
                          sparse_format=sparse_format)
    breakdown = {c: (m / n_tokens, a / n_tokens)
                 for c, (m, a) in meter.by_component.items()}
    report = ScoreReport(param_storage=params,
                         mul_ops=meter.muls / n_tokens,
                         add_ops=meter.adds / n_tokens,
                         breakdown=breakdown)
    report.validate()
    return report


REFERENCE_BIN_FRACTIONS = (0.89, 0.09, 0.02)


def reference_bin_counts(n_tokens, n_bins):
    """Declared typical composition of a frequency-binned eval stream:
    head tokens dominate.  Used when real stream statistics are not
    supplied; any remainder goes to the head bin."""
    fr = REFERENCE_BIN_FRACTIONS[:n_bins]
    counts = [int(n_tokens * f) for f in fr]
    counts[0] += n_tokens - sum(counts)
    return counts
