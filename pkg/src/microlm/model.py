"""Windowed relative-attention transformer LM with adaptive input/output.

Architecture notes:
  * each position attends to a window of `context` positions (itself
    plus up to context-1 predecessors), so the receptive field after
    n_layers is n_layers * (context - 1) + 1 tokens
  * relative positions use fixed sinusoidal encodings projected per
    layer, plus two trainable global bias vectors shared by all layers
  * the adaptive embedding and adaptive softmax share their per-bin
    tables and projections (tied); the softmax head also carries one
    cluster row per tail bin
  * post-norm residual blocks, no biases on attention projections

Three forward paths coexist and agree numerically: the autograd path
for training, a chunked numpy path for fast evaluation, and a strictly
streaming path (one token at a time, bounded buffers) that op meters
hook into.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import quant
from . import tensor as T
from .errors import ConfigError, ContractError


@dataclass
class ModelConfig:
    vocab_size: int
    bins: list            # [[lo, hi], ...] 1-based inclusive, contiguous
    bin_dims: list        # embedding width per bin
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    context: int          # per-layer attention window C
    extended_context: int  # training/eval window C_e
    activation: str = "relu"
    dropout: float = 0.0
    cache_enabled: bool = True
    theta_init: float = 0.016
    lambda_init: float = 0.07

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.context < 2:
            raise ConfigError("context must be >= 2")
        if self.d_model % 2:
            raise ConfigError("d_model must be even (sinusoidal encodings)")
        lo_expect = 1
        for (lo, hi), dim in zip(self.bins, self.bin_dims):
            if lo != lo_expect or hi < lo:
                raise ConfigError(f"bins must tile [1, vocab_size]; bad bin [{lo}, {hi}]")
            if dim < 1 or dim > self.d_model:
                raise ConfigError("bin dims must be in [1, d_model]")
            lo_expect = hi + 1
        if lo_expect != self.vocab_size + 1:
            raise ConfigError("bins must cover exactly [1, vocab_size]")
        if len(self.bins) != len(self.bin_dims):
            raise ConfigError("bins and bin_dims must align")
        min_ext = self.n_layers * (self.context - 1) + 1
        if self.extended_context < min_ext:
            raise ConfigError(
                f"extended_context {self.extended_context} < n_layers*(context-1)+1 = {min_ext}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def receptive_field(self):
        return self.n_layers * (self.context - 1) + 1

    def bin_sizes(self):
        return [hi - lo + 1 for lo, hi in self.bins]

    def bin_of(self, ids_1based):
        """Bin index for each 1-based id."""
        his = np.asarray([hi for _, hi in self.bins])
        return np.searchsorted(his, np.asarray(ids_1based), side="left")

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size, "bins": [list(b) for b in self.bins],
            "bin_dims": list(self.bin_dims), "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_head": self.d_head, "d_ff": self.d_ff, "context": self.context,
            "extended_context": self.extended_context, "activation": self.activation,
            "dropout": self.dropout, "cache_enabled": self.cache_enabled,
            "theta_init": self.theta_init, "lambda_init": self.lambda_init,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoid_encodings(n_positions, d_model, dtype=np.float32):
    """R[d, 2i] = sin(d * w_i), R[d, 2i+1] = cos(d * w_i)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (idx / d_model))
    enc = np.zeros((n_positions, d_model), dtype=np.float64)
    enc[:, 0::2] = np.sin(pos * freq)
    enc[:, 1::2] = np.cos(pos * freq)
    return enc.astype(dtype)


class StreamState:
    """Bounded per-layer FIFO buffers for strictly streaming inference.

    Buffers hold each layer's last context-1 input hidden states; the
    current token's state is staged in `pending` and committed when the
    next token arrives, so after k tokens the buffers hold k-1 entries
    (capped).  Projected keys/values are memoized alongside so memory
    tokens are never re-projected.
    """

    def __init__(self, config):
        cap = config.context - 1
        self.cap = cap
        self.position = 0
        self.hidden = [[] for _ in range(config.n_layers)]
        self.keys = [[] for _ in range(config.n_layers)]
        self.values = [[] for _ in range(config.n_layers)]
        self.pending = None

    def occupancy(self, layer=0):
        return len(self.hidden[layer])

    def commit_pending(self):
        if self.pending is None:
            return
        for l, (h, k, v) in enumerate(self.pending):
            self.hidden[l].append(h)
            self.keys[l].append(k)
            self.values[l].append(v)
            if len(self.hidden[l]) > self.cap:
                self.hidden[l].pop(0)
                self.keys[l].pop(0)
                self.values[l].pop(0)
        self.pending = None


class ModelState:
    """Parameters plus derived caches; all arrays share one dtype."""

    def __init__(self, config, params=None, rng=None, dtype=np.float32,
                 counters=None, masks=None):
        self.config = config
        self.dtype = np.dtype(dtype).type
        if params is None:
            if rng is None:
                raise ContractError("need rng to initialize parameters")
            params = self._init_params(rng)
        self.params = params
        self.counters = counters if counters is not None else np.zeros(
            config.vocab_size, dtype=np.int64)
        self.masks = masks or {}
        self.weight_quant = None   # {name: (bits, inv_scale)} during QAT
        self.act_quant = None      # {site: (bits, inv_scale)}
        self.act_observer = None   # {site: running max|x|} during calibration
        self.quantization = None   # storage metadata after the quantize stage
        self.cache_frozen = False
        self.stages = []
        self._derived = {}

    # ------------------------------------------------------------ setup

    def _init_params(self, rng):
        cfg = self.config
        dt = self.dtype

        def normal(*shape):
            return rng.normal(0.0, 0.02, shape).astype(dt)

        p = {}
        for b, ((lo, hi), dim) in enumerate(zip(cfg.bins, cfg.bin_dims)):
            p[f"embed.table{b}"] = T.parameter(normal(hi - lo + 1, dim))
            if dim != cfg.d_model:
                p[f"embed.proj{b}"] = T.parameter(normal(dim, cfg.d_model))
        n_tail = len(cfg.bins) - 1
        if n_tail:
            p["softmax.cluster"] = T.parameter(normal(n_tail, cfg.d_model))
        hd = cfg.n_heads * cfg.d_head
        for l in range(cfg.n_layers):
            p[f"layer{l}.attn.wq"] = T.parameter(normal(cfg.d_model, hd))
            p[f"layer{l}.attn.wk"] = T.parameter(normal(cfg.d_model, hd))
            p[f"layer{l}.attn.wv"] = T.parameter(normal(cfg.d_model, hd))
            p[f"layer{l}.attn.wo"] = T.parameter(normal(hd, cfg.d_model))
            p[f"layer{l}.attn.wr"] = T.parameter(normal(cfg.d_model, hd))
            for ln in ("ln1", "ln2"):
                p[f"layer{l}.{ln}.gain"] = T.parameter(np.ones(cfg.d_model, dtype=dt))
                p[f"layer{l}.{ln}.bias"] = T.parameter(np.zeros(cfg.d_model, dtype=dt))
            p[f"layer{l}.ffn.w1"] = T.parameter(normal(cfg.d_model, cfg.d_ff))
            p[f"layer{l}.ffn.b1"] = T.parameter(np.zeros(cfg.d_ff, dtype=dt))
            p[f"layer{l}.ffn.w2"] = T.parameter(normal(cfg.d_ff, cfg.d_model))
            p[f"layer{l}.ffn.b2"] = T.parameter(np.zeros(cfg.d_model, dtype=dt))
        p["attn.u"] = T.parameter(np.zeros((cfg.n_heads, cfg.d_head), dtype=dt))
        p["attn.v"] = T.parameter(np.zeros((cfg.n_heads, cfg.d_head), dtype=dt))
        if cfg.cache_enabled:
            p["cache.theta_raw"] = T.parameter(
                np.asarray(math.log(cfg.theta_init), dtype=dt))
            p["cache.lambda_raw"] = T.parameter(
                np.asarray(math.log(cfg.lambda_init / (1 - cfg.lambda_init)), dtype=dt))
        return p

    def invalidate_caches(self):
        self._derived.clear()

    def _pos_keys_np(self, layer):
        """Projected sinusoidal keys, [context, H, dk]; rebuilt after any
        weight change (load-time transform, not a per-token cost)."""
        key = ("pos", layer)
        if key not in self._derived:
            cfg = self.config
            enc = sinusoid_encodings(cfg.context, cfg.d_model, self.dtype)
            wr = self.params[f"layer{layer}.attn.wr"].data
            self._derived[key] = np.ascontiguousarray(
                (enc @ wr).reshape(cfg.context, cfg.n_heads, cfg.d_head))
        return self._derived[key]

    def _head_rows_np(self):
        """Tied softmax head rows: bin-0 table (up-projected if needed)
        stacked over the tail cluster rows."""
        if "head_rows" not in self._derived:
            cfg = self.config
            t0 = self.params["embed.table0"].data
            if cfg.bin_dims[0] != cfg.d_model:
                t0 = t0 @ self.params["embed.proj0"].data
            rows = [t0]
            if len(cfg.bins) > 1:
                rows.append(self.params["softmax.cluster"].data)
            self._derived["head_rows"] = np.ascontiguousarray(np.vstack(rows))
        return self._derived["head_rows"]

    # --------------------------------------------------- cache scalars

    def cache_theta(self):
        return float(np.exp(self.params["cache.theta_raw"].data))

    def cache_lambda(self):
        raw = float(self.params["cache.lambda_raw"].data)
        return 1.0 / (1.0 + math.exp(-raw))

    def set_cache_params(self, theta, lam):
        if self.cache_frozen:
            raise ContractError("cache parameters are frozen")
        if theta <= 0.0:
            raise ContractError("theta must be positive")
        lam = min(max(float(lam), 1e-6), 1.0 - 1e-6)
        self.params["cache.theta_raw"].data = np.asarray(
            math.log(theta), dtype=self.dtype)
        self.params["cache.lambda_raw"].data = np.asarray(
            math.log(lam / (1.0 - lam)), dtype=self.dtype)

    # --------------------------------------------------- QAT weight view

    def _w(self, name):
        t = self.params[name]
        if self.weight_quant and name in self.weight_quant:
            bits, inv = self.weight_quant[name]
            return quant.fq_op(t, bits, inv)
        return t

    def _wnp(self, name):
        arr = self.params[name].data
        if self.weight_quant and name in self.weight_quant:
            bits, inv = self.weight_quant[name]
            arr = quant.fake_quantize(arr, bits, inv)
        return arr

    def _aq(self, site, x):
        if self.act_observer is not None:
            m = float(np.max(np.abs(x.data))) if x.data.size else 0.0
            self.act_observer[site] = max(self.act_observer.get(site, 0.0), m)
            return x
        if self.act_quant and site in self.act_quant:
            bits, inv = self.act_quant[site]
            return quant.fq_op(x, bits, inv)
        return x

    def _aq_np(self, site, x):
        if self.act_observer is not None:
            m = float(np.max(np.abs(x))) if x.size else 0.0
            self.act_observer[site] = max(self.act_observer.get(site, 0.0), m)
            return x
        if self.act_quant and site in self.act_quant:
            bits, inv = self.act_quant[site]
            return quant.fake_quantize(x, bits, inv)
        return x

    # -------------------------------------------------- training forward

    def embed_train(self, ids_1based):
        cfg = self.config
        ids0 = np.asarray(ids_1based, dtype=np.int64) - 1
        if ids0.size == 0 or ids0.min() < 0 or ids0.max() >= cfg.vocab_size:
            raise ContractError("token ids must lie in [1, vocab_size]")
        n = ids0.shape[0]
        bins = cfg.bin_of(ids0 + 1)
        parts = []
        for b, (lo, _hi) in enumerate(cfg.bins):
            sel = np.nonzero(bins == b)[0]
            if sel.size == 0:
                continue
            local = ids0[sel] - (lo - 1)
            rows = T.gather_rows(self._w(f"embed.table{b}"), local,
                                 produced_by="embedding")
            if cfg.bin_dims[b] != cfg.d_model:
                rows = T.matmul(rows, self._w(f"embed.proj{b}"))
            parts.append(T.scatter_rows(n, sel, rows))
        x = parts[0]
        for part in parts[1:]:
            x = T.add(x, part)
        return x

    def _layer_train(self, l, x, drop_rng):
        cfg = self.config
        n = x.data.shape[0]
        H, dk = cfg.n_heads, cfg.d_head
        q = T.reshape(T.matmul(x, self._w(f"layer{l}.attn.wq")), (n, H, dk))
        k = T.reshape(T.matmul(x, self._w(f"layer{l}.attn.wk")), (n, H, dk))
        v = T.reshape(T.matmul(x, self._w(f"layer{l}.attn.wv")), (n, H, dk))
        enc = T.Tensor(sinusoid_encodings(cfg.context, cfg.d_model, self.dtype))
        pos = T.reshape(T.matmul(enc, self._w(f"layer{l}.attn.wr")),
                        (cfg.context, H, dk))
        att = T.banded_attention(q, k, v, pos,
                                 self.params["attn.u"], self.params["attn.v"],
                                 cfg.context, n_mem=0)
        out = T.matmul(T.reshape(att, (n, H * dk)), self._w(f"layer{l}.attn.wo"))
        out = self._aq(f"layer{l}.attn_out", out)
        if cfg.dropout > 0 and drop_rng is not None:
            out = T.dropout(out, cfg.dropout, drop_rng)
        x = T.layer_norm(T.add(x, out), self.params[f"layer{l}.ln1.gain"],
                         self.params[f"layer{l}.ln1.bias"])
        act = T.ACTIVATIONS[cfg.activation]
        hid = act(T.add(T.matmul(x, self._w(f"layer{l}.ffn.w1")),
                        self.params[f"layer{l}.ffn.b1"]))
        hid = self._aq(f"layer{l}.ffn_hidden", hid)
        ff = T.add(T.matmul(hid, self._w(f"layer{l}.ffn.w2")),
                   self.params[f"layer{l}.ffn.b2"])
        ff = self._aq(f"layer{l}.ffn_out", ff)
        if cfg.dropout > 0 and drop_rng is not None:
            ff = T.dropout(ff, cfg.dropout, drop_rng)
        return T.layer_norm(T.add(x, ff), self.params[f"layer{l}.ln2.gain"],
                            self.params[f"layer{l}.ln2.bias"])

    def forward_training(self, ids_1based, drop_rng=None):
        """Hidden states for a training window; no memory, so position i
        sees exactly the window positions [max(0, i-C+1), i] per layer."""
        if len(ids_1based) > self.config.extended_context:
            raise ContractError("window longer than extended_context")
        x = self.embed_train(ids_1based)
        for l in range(self.config.n_layers):
            x = self._layer_train(l, x, drop_rng)
        return x

    # ------------------------------------------- adaptive softmax (train)

    def _head_rows_train(self):
        cfg = self.config
        t0 = self._w("embed.table0")
        if cfg.bin_dims[0] != cfg.d_model:
            t0 = T.matmul(t0, self._w("embed.proj0"))
        if len(cfg.bins) > 1:
            return T.concat([t0, self._w("softmax.cluster")], axis=0)
        return t0

    def head_logprobs_train(self, h):
        logits = T.matmul(h, T.transpose(self._head_rows_train()))
        return T.log_softmax_rows(logits)

    def target_logprobs_train(self, h, targets_1based, head_lp=None):
        """Log-probability of each position's target, [n] tensor."""
        cfg = self.config
        t0 = np.asarray(targets_1based, dtype=np.int64) - 1
        n = t0.shape[0]
        if head_lp is None:
            head_lp = self.head_logprobs_train(h)
        bins = cfg.bin_of(t0 + 1)
        v0 = cfg.bin_sizes()[0]
        pieces = []
        sel0 = np.nonzero(bins == 0)[0]
        if sel0.size:
            vals = T.take_pairs(head_lp, sel0, t0[sel0])
            pieces.append(T.scatter_vec(n, sel0, vals))
        for b in range(1, len(cfg.bins)):
            selb = np.nonzero(bins == b)[0]
            if selb.size == 0:
                continue
            lo, _ = cfg.bins[b]
            cluster_col = v0 + b - 1
            cl = T.take_pairs(head_lp, selb, np.full(selb.size, cluster_col))
            hb = T.gather_rows(h, selb)
            if cfg.bin_dims[b] != cfg.d_model:
                hb = T.matmul(hb, T.transpose(self._w(f"embed.proj{b}")))
            tail_lp = T.log_softmax_rows(
                T.matmul(hb, T.transpose(self._w(f"embed.table{b}"))))
            tl = T.take_per_row(tail_lp, t0[selb] - (lo - 1))
            pieces.append(T.scatter_vec(n, selb, T.add(cl, tl)))
        out = pieces[0]
        for piece in pieces[1:]:
            out = T.add(out, piece)
        return out

    def soft_label_loss_train(self, h, label_ids, label_probs, head_lp=None):
        """Mass-weighted NLL over per-position label sets.

        label_ids: [n, K] 1-based token ids; label_probs: [n, K] teacher
        masses.  Returns the scalar mean over positions.
        """
        cfg = self.config
        ids0 = np.asarray(label_ids, dtype=np.int64) - 1
        probs = np.asarray(label_probs, dtype=h.data.dtype)
        n, K = ids0.shape
        if head_lp is None:
            head_lp = self.head_logprobs_train(h)
        bins = cfg.bin_of(ids0.ravel() + 1).reshape(n, K)
        rows_all = np.repeat(np.arange(n), K).reshape(n, K)
        v0 = cfg.bin_sizes()[0]
        total = None
        m0 = bins == 0
        if m0.any():
            vals = T.take_pairs(head_lp, rows_all[m0], ids0[m0])
            term = T.sum_all(T.multiply(vals, T.Tensor(probs[m0])))
            total = term
        for b in range(1, len(cfg.bins)):
            mb = bins == b
            if not mb.any():
                continue
            lo, _ = cfg.bins[b]
            rows_b = rows_all[mb]
            uniq, inv = np.unique(rows_b, return_inverse=True)
            hb = T.gather_rows(h, uniq)
            if cfg.bin_dims[b] != cfg.d_model:
                hb = T.matmul(hb, T.transpose(self._w(f"embed.proj{b}")))
            tail_lp = T.log_softmax_rows(
                T.matmul(hb, T.transpose(self._w(f"embed.table{b}"))))
            cl = T.take_pairs(head_lp, rows_b, np.full(rows_b.size, v0 + b - 1))
            tl = T.take_pairs(tail_lp, inv, ids0[mb] - (lo - 1))
            term = T.sum_all(T.multiply(T.add(cl, tl), T.Tensor(probs[mb])))
            total = term if total is None else T.add(total, term)
        return T.multiply(T.neg(total), np.asarray(1.0 / n, dtype=h.data.dtype))

    # --------------------------------------------------- numpy eval paths

    def _log_softmax_np(self, x):
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _ln_np(self, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return (xc / np.sqrt(var + eps)) * gain + bias

    def embed_np(self, ids_1based):
        cfg = self.config
        ids0 = np.asarray(ids_1based, dtype=np.int64) - 1
        bins = cfg.bin_of(ids0 + 1)
        out = np.zeros((ids0.shape[0], cfg.d_model), dtype=self.dtype)
        for b, (lo, _hi) in enumerate(cfg.bins):
            sel = np.nonzero(bins == b)[0]
            if sel.size == 0:
                continue
            rows = self._wnp(f"embed.table{b}")[ids0[sel] - (lo - 1)]
            if cfg.bin_dims[b] != cfg.d_model:
                rows = rows @ self._wnp(f"embed.proj{b}")
            out[sel] = rows
        return out

    def eval_chunk(self, ids_1based, mems=None):
        """Chunked no-grad forward with carried memory.

        mems: per-layer arrays of the last context-1 layer inputs from
        the preceding stream (None at stream start).  Returns (hiddens,
        new_mems); numerically equivalent to streaming one token at a
        time because every position still sees exactly its context
        window regardless of chunk boundaries.
        """
        cfg = self.config
        H, dk = cfg.n_heads, cfg.d_head
        x = self.embed_np(ids_1based)
        n = x.shape[0]
        keep = cfg.context - 1
        new_mems = []
        for l in range(cfg.n_layers):
            x_in = x
            mem = None if mems is None else mems[l]
            p = 0 if mem is None else mem.shape[0]
            kin = x_in if p == 0 else np.concatenate([mem, x_in], axis=0)
            q = np.ascontiguousarray((x_in @ self._wnp(f"layer{l}.attn.wq")).reshape(n, H, dk))
            k = np.ascontiguousarray((kin @ self._wnp(f"layer{l}.attn.wk")).reshape(p + n, H, dk))
            v = np.ascontiguousarray((kin @ self._wnp(f"layer{l}.attn.wv")).reshape(p + n, H, dk))
            att, _ = kernels.banded_attn_forward(
                q, k, v, self._pos_keys_np(l),
                self.params["attn.u"].data, self.params["attn.v"].data,
                cfg.context, p)
            out = att.reshape(n, H * dk) @ self._wnp(f"layer{l}.attn.wo")
            out = self._aq_np(f"layer{l}.attn_out", out)
            x = self._ln_np(x_in + out, self.params[f"layer{l}.ln1.gain"].data,
                            self.params[f"layer{l}.ln1.bias"].data)
            hid = x @ self._wnp(f"layer{l}.ffn.w1") + self.params[f"layer{l}.ffn.b1"].data
            if cfg.activation == "relu":
                hid = np.maximum(hid, 0)
            else:
                c = float(np.sqrt(2.0 / np.pi))
                hid = 0.5 * hid * (1.0 + np.tanh(c * (hid + 0.044715 * hid ** 3)))
            hid = self._aq_np(f"layer{l}.ffn_hidden", hid)
            ff = hid @ self._wnp(f"layer{l}.ffn.w2") + self.params[f"layer{l}.ffn.b2"].data
            ff = self._aq_np(f"layer{l}.ffn_out", ff)
            x = self._ln_np(x + ff, self.params[f"layer{l}.ln2.gain"].data,
                            self.params[f"layer{l}.ln2.bias"].data)
            tail = kin[-keep:] if kin.shape[0] >= keep else kin
            new_mems.append(np.ascontiguousarray(tail.astype(self.dtype)))
        return x.astype(self.dtype), new_mems

    def target_logprob_np(self, h, targets_1based):
        """Fast per-position target log-probabilities (no grad)."""
        cfg = self.config
        t0 = np.asarray(targets_1based, dtype=np.int64) - 1
        n = t0.shape[0]
        head_lp = self._log_softmax_np(h @ self._head_rows_np().T)
        bins = cfg.bin_of(t0 + 1)
        v0 = cfg.bin_sizes()[0]
        out = np.zeros(n, dtype=h.dtype)
        sel0 = np.nonzero(bins == 0)[0]
        if sel0.size:
            out[sel0] = head_lp[sel0, t0[sel0]]
        for b in range(1, len(cfg.bins)):
            selb = np.nonzero(bins == b)[0]
            if selb.size == 0:
                continue
            lo, _ = cfg.bins[b]
            hb = h[selb]
            if cfg.bin_dims[b] != cfg.d_model:
                hb = hb @ self._wnp(f"embed.proj{b}").T
            tail_lp = self._log_softmax_np(hb @ self._wnp(f"embed.table{b}").T)
            out[selb] = head_lp[selb, v0 + b - 1] + \
                tail_lp[np.arange(selb.size), t0[selb] - (lo - 1)]
        return out

    def full_logprobs_np(self, h):
        """Complete [n, vocab] log-probability matrix (tiny configs and
        teacher-label extraction)."""
        cfg = self.config
        n = h.shape[0]
        head_lp = self._log_softmax_np(h @ self._head_rows_np().T)
        v0 = cfg.bin_sizes()[0]
        out = np.empty((n, cfg.vocab_size), dtype=h.dtype)
        out[:, :v0] = head_lp[:, :v0]
        for b in range(1, len(cfg.bins)):
            lo, hi = cfg.bins[b]
            hb = h
            if cfg.bin_dims[b] != cfg.d_model:
                hb = hb @ self._wnp(f"embed.proj{b}").T
            tail_lp = self._log_softmax_np(hb @ self._wnp(f"embed.table{b}").T)
            out[:, lo - 1:hi] = head_lp[:, v0 + b - 1:v0 + b] + tail_lp
        return out

    # ----------------------------------------------- streaming inference

    def infer_next(self, state, token_id, meter=None):
        """Feed one token; returns the hidden state that predicts the
        next token.  Strictly streaming: bounded buffers, no lookahead."""
        cfg = self.config
        H, dk = cfg.n_heads, cfg.d_head
        d = cfg.d_model
        state.commit_pending()
        b = int(cfg.bin_of([token_id])[0])
        lo, _ = cfg.bins[b]
        row = self._wnp(f"embed.table{b}")[token_id - lo]
        if cfg.bin_dims[b] != cfg.d_model:
            row = row @ self._wnp(f"embed.proj{b}")
            if meter:
                meter.linear(1, cfg.bin_dims[b], d, weight=f"embed.proj{b}",
                             comp="embedding")
        x = row.astype(self.dtype)
        u = self.params["attn.u"].data
        vb = self.params["attn.v"].data
        pending = []
        for l in range(cfg.n_layers):
            x_in = x
            q = (x_in @ self._wnp(f"layer{l}.attn.wq")).reshape(H, dk)
            k_cur = (x_in @ self._wnp(f"layer{l}.attn.wk")).reshape(H, dk)
            v_cur = (x_in @ self._wnp(f"layer{l}.attn.wv")).reshape(H, dk)
            if meter:
                meter.linear(1, d, H * dk, weight=f"layer{l}.attn.wq", comp="attention")
                meter.linear(1, d, H * dk, weight=f"layer{l}.attn.wk", comp="attention")
                meter.linear(1, d, H * dk, weight=f"layer{l}.attn.wv", comp="attention")
            kwin = state.keys[l] + [k_cur]
            vwin = state.values[l] + [v_cur]
            win = len(kwin)
            pos = self._pos_keys_np(l)
            qu = q + u
            qv = q + vb
            scale = self.dtype(1.0 / np.sqrt(dk))
            scores = np.empty((win, H), dtype=self.dtype)
            for j in range(win):
                dist = win - 1 - j
                scores[j] = ((qu * kwin[j]).sum(axis=1)
                             + (qv * pos[dist]).sum(axis=1)) * scale
            if meter:
                meter.attention_scores(win, H, dk)
            scores -= scores.max(axis=0, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=0, keepdims=True)
            if meter:
                meter.softmax(win, rows=H, comp="attention")
            att = np.zeros((H, dk), dtype=self.dtype)
            for j in range(win):
                att += attn[j][:, None] * vwin[j]
            if meter:
                meter.attention_combine(win, H, dk)
            out = att.reshape(H * dk) @ self._wnp(f"layer{l}.attn.wo")
            if meter:
                meter.linear(1, H * dk, d, weight=f"layer{l}.attn.wo", comp="attention")
            out = self._aq_np(f"layer{l}.attn_out", out)
            x = self._ln_np(x_in + out, self.params[f"layer{l}.ln1.gain"].data,
                            self.params[f"layer{l}.ln1.bias"].data)
            if meter:
                meter.add(d, comp="attention")   # residual
                meter.layer_norm(d)
            hid = x @ self._wnp(f"layer{l}.ffn.w1") + self.params[f"layer{l}.ffn.b1"].data
            hid = np.maximum(hid, 0) if cfg.activation == "relu" else hid
            hid = self._aq_np(f"layer{l}.ffn_hidden", hid)
            ff = hid @ self._wnp(f"layer{l}.ffn.w2") + self.params[f"layer{l}.ffn.b2"].data
            ff = self._aq_np(f"layer{l}.ffn_out", ff)
            if meter:
                meter.linear(1, d, cfg.d_ff, bias=True, weight=f"layer{l}.ffn.w1",
                             comp="ffn")
                meter.linear(1, cfg.d_ff, d, bias=True, weight=f"layer{l}.ffn.w2",
                             comp="ffn")
            x2 = self._ln_np(x + ff, self.params[f"layer{l}.ln2.gain"].data,
                             self.params[f"layer{l}.ln2.bias"].data)
            if meter:
                meter.add(d, comp="ffn")
                meter.layer_norm(d)
            pending.append((x_in, k_cur, v_cur))
            x = x2.astype(self.dtype)
        state.pending = pending
        state.position += 1
        return x

    def next_distribution(self, h, meter=None):
        """Full probability vector over the vocabulary for one hidden
        state (the streaming path computes the whole distribution: the
        next token must be scored before it is seen)."""
        cfg = self.config
        d = cfg.d_model
        sizes = cfg.bin_sizes()
        v0 = sizes[0]
        n_tail = len(cfg.bins) - 1
        head_logits = h @ self._head_rows_np().T
        if meter:
            # the up-projected head is assembled at load time, so the
            # logits pay only the [v0 + n_tail, d] product
            meter.linear(1, d, v0, weight="embed.table0", comp="softmax")
            if n_tail:
                meter.linear(1, d, n_tail, weight="softmax.cluster", comp="softmax")
        e = np.exp(head_logits - head_logits.max())
        head_probs = e / e.sum()
        if meter:
            meter.softmax(v0 + n_tail)
        out = np.empty(cfg.vocab_size, dtype=h.dtype)
        out[:v0] = head_probs[:v0]
        for b in range(1, len(cfg.bins)):
            lo, hi = cfg.bins[b]
            hb = h
            if cfg.bin_dims[b] != cfg.d_model:
                hb = hb @ self._wnp(f"embed.proj{b}").T
                if meter:
                    meter.linear(1, d, cfg.bin_dims[b], weight=f"embed.proj{b}",
                                 comp="softmax")
            logits = hb @ self._wnp(f"embed.table{b}").T
            if meter:
                meter.linear(1, cfg.bin_dims[b], sizes[b], weight=f"embed.table{b}",
                             comp="softmax")
            eb = np.exp(logits - logits.max())
            tail_probs = eb / eb.sum()
            if meter:
                meter.softmax(sizes[b])
            out[lo - 1:hi] = head_probs[v0 + b - 1] * tail_probs
            if meter:
                meter.mul(sizes[b])   # cluster mass scaling
        return out

    # ------------------------------------------------------------ hebbian

    def hebbian_gamma(self, count, gamma_min):
        return max(1.0 / count, gamma_min)

    def hebbian_update(self, h_final, targets_1based, gamma_min=0.01, limit=500):
        """Interpolate output rows toward the hidden states that predicted
        them.  Counters increment first; a class stops being smoothed once
        it has been seen `limit` times.  In-place on the tied tables."""
        cfg = self.config
        h_final = np.asarray(h_final)
        targets = np.asarray(targets_1based, dtype=np.int64)
        bins = cfg.bin_of(targets)
        for i in range(targets.shape[0]):
            tok = int(targets[i])
            self.counters[tok - 1] += 1
            c = int(self.counters[tok - 1])
            if c > limit:
                continue
            g = self.dtype(self.hebbian_gamma(c, gamma_min))
            b = int(bins[i])
            lo, _ = cfg.bins[b]
            hbar = h_final[i]
            if cfg.bin_dims[b] != cfg.d_model:
                hbar = hbar @ self.params[f"embed.proj{b}"].data.T
            table = self.params[f"embed.table{b}"].data
            table[tok - lo] = (1 - g) * table[tok - lo] + g * hbar.astype(self.dtype)
        self.invalidate_caches()

    # --------------------------------------------------------- persistence

    def to_arrays(self):
        out = {name: t.data for name, t in self.params.items()}
        out["state.counters"] = self.counters
        for name, mask in self.masks.items():
            out[f"mask:{name}"] = mask.astype(np.uint8)
        return out

    def num_params(self):
        return int(sum(t.data.size for t in self.params.values()))


def state_from_arrays(config, arrays, dtype=np.float32):
    """Rebuild a ModelState from checkpoint arrays."""
    params = {}
    masks = {}
    counters = None
    for name, arr in arrays.items():
        if name == "state.counters":
            counters = arr.astype(np.int64)
        elif name.startswith("mask:"):
            masks[name[5:]] = arr.astype(bool)
        else:
            params[name] = T.parameter(arr.astype(dtype))
    return ModelState(config, params=params, counters=counters, masks=masks,
                      dtype=dtype)


# ------------------------------------------------------------- checkpoints

MODEL_KIND = "microlm-model"


def save_model(state, path, extra_meta=None):
    """Persist parameters, counters, masks (packed bitsets), and any
    quantization metadata; quantized tensors are stored as integer codes
    at the smallest byte width that holds their bit width."""
    from . import checkpoint as ckpt

    arrays = {}
    tensor_meta = {}
    qz = state.quantization or {}
    wbits = qz.get("bits", {})
    winv = qz.get("inv_scale", {})
    for name, t in state.params.items():
        if name in wbits:
            w = int(wbits[name])
            inv = np.float32(winv[name])
            codes = quant.quantize_to_int(t.data, w, inv)
            arrays[name] = codes.astype(np.int8 if w <= 8 else np.int16)
            tensor_meta[name] = {"quant_bits": w, "inv_scale": float(inv)}
        else:
            arrays[name] = t.data
    arrays["state.counters"] = state.counters
    for name, mask in state.masks.items():
        arrays[f"mask:{name}"] = np.packbits(mask.ravel())
        tensor_meta[f"mask:{name}"] = {"role": "mask",
                                       "mask_shape": list(mask.shape)}
    meta = {
        "kind": MODEL_KIND,
        "config": state.config.to_dict(),
        "stages": list(state.stages),
        "cache_frozen": bool(state.cache_frozen),
    }
    if qz.get("act_bits"):
        meta["act_quant"] = {
            "bits": {k: int(v) for k, v in qz["act_bits"].items()},
            "inv_scale": {k: float(v) for k, v in qz["act_inv_scale"].items()},
        }
    if extra_meta:
        meta.update(extra_meta)
    ckpt.save_checkpoint(path, arrays, meta, tensor_meta)


def load_model(path, dtype=np.float32):
    from . import checkpoint as ckpt

    tensors, meta, tensor_meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != MODEL_KIND:
        raise ContractError(f"{path} is not a model checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    params = {}
    masks = {}
    counters = None
    qbits = {}
    qinv = {}
    for name, arr in tensors.items():
        tm = tensor_meta.get(name, {})
        if name == "state.counters":
            counters = arr.astype(np.int64)
        elif name.startswith("mask:"):
            shape = tm["mask_shape"]
            n = int(np.prod(shape))
            masks[name[5:]] = np.unpackbits(arr)[:n].astype(bool).reshape(shape)
        elif "quant_bits" in tm:
            w = int(tm["quant_bits"])
            inv = np.float32(tm["inv_scale"])
            params[name] = T.parameter(quant.dequantize(arr, inv, dtype))
            qbits[name] = w
            qinv[name] = float(inv)
        else:
            params[name] = T.parameter(arr.astype(dtype))
    state = ModelState(config, params=params, counters=counters, masks=masks,
                       dtype=dtype)
    state.stages = list(meta.get("stages", []))
    state.cache_frozen = bool(meta.get("cache_frozen", False))
    if qbits or meta.get("act_quant"):
        state.quantization = {"bits": qbits, "inv_scale": qinv}
        aq = meta.get("act_quant")
        if aq:
            state.quantization["act_bits"] = {k: int(v) for k, v in aq["bits"].items()}
            state.quantization["act_inv_scale"] = {
                k: float(v) for k, v in aq["inv_scale"].items()}
            state.act_quant = {
                site: (int(aq["bits"][site]), np.float32(aq["inv_scale"][site]))
                for site in aq["bits"]}
    return state
