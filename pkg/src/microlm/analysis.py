"""Token-level evaluation diagnostics.

Two views of where one model beats another on the same stream: loss
binned by token id (ids are frequency ranks, so low id = frequent) and
loss binned by the gap back to the previous occurrence of the same
token.  Both report per-bin loss-difference sums plus cumulative curves,
alongside cumulative bin sizes as a reference line.

Conventions:
  * gap = position - previous position of the same id, so gaps are >= 1
    where defined; first occurrences carry gap 0 and live in a dedicated
    "no-previous" bin that is excluded from gap-binned difference curves
  * default bin edges are logarithmic: powers of ten over token ids,
    powers of two over gaps
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError

TRACE_DTYPE = np.dtype([("pos", "<u8"), ("id", "<u4"), ("loss", "<f4")])

NO_PREVIOUS = 0  # sentinel gap for a token's first occurrence


@dataclass
class LossTrace:
    """One record per scored target position."""

    positions: np.ndarray  # u64, position of the target within the stream
    ids: np.ndarray        # u32, 1-based target token id
    losses: np.ndarray     # f32, per-target negative log-likelihood

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.uint64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        self.losses = np.ascontiguousarray(self.losses, dtype=np.float32)
        n = self.positions.shape[0]
        if self.ids.shape[0] != n or self.losses.shape[0] != n:
            raise InputError("trace fields must have equal lengths")
        if n and not np.all(np.isfinite(self.losses)):
            raise InputError("trace contains non-finite losses")

    def __len__(self):
        return self.positions.shape[0]

    def save(self, path):
        rec = np.empty(len(self), dtype=TRACE_DTYPE)
        rec["pos"] = self.positions
        rec["id"] = self.ids
        rec["loss"] = self.losses
        with open(path, "wb") as f:
            f.write(rec.tobytes())

    @classmethod
    def load(cls, path):
        size = os.path.getsize(path)
        if size % TRACE_DTYPE.itemsize:
            raise InputError(f"{path}: size {size} is not a whole number of "
                             f"{TRACE_DTYPE.itemsize}-byte records")
        rec = np.fromfile(path, dtype=TRACE_DTYPE)
        return cls(rec["pos"].copy(), rec["id"].copy(), rec["loss"].copy())


def collect_trace(state, ids, cache_params=None, chunk=None):
    """Evaluate a stream and keep the per-target loss with its context."""
    from . import cache as cache_mod

    ids = np.asarray(ids, dtype=np.int64)
    nll = cache_mod.evaluate_stream(state, ids, cache_params, chunk)
    positions = np.arange(1, ids.shape[0], dtype=np.uint64)
    return LossTrace(positions, ids[1:].astype(np.uint32), nll)


# ------------------------------------------------------------------ gaps

def token_gaps(stream):
    """Distance back to the previous occurrence of each token.

    Returns one value per position: position - last position holding the
    same id, or NO_PREVIOUS (0) for a first occurrence.
    """
    stream = np.asarray(stream, dtype=np.int64)
    gaps = np.zeros(stream.shape[0], dtype=np.int64)
    last = {}
    for pos, tok in enumerate(stream):
        prev = last.get(int(tok))
        if prev is not None:
            gaps[pos] = pos - prev
        last[int(tok)] = pos
    return gaps


# ------------------------------------------------------------------ bins

def log_bin_edges(max_value, base):
    """Edges [1, base, base^2, ...] covering values in [1, max_value]."""
    if max_value < 1:
        raise InputError("max_value must be >= 1")
    edges = [1]
    while edges[-1] <= max_value:
        edges.append(edges[-1] * base)
    return np.asarray(edges, dtype=np.int64)


def _assign_bins(values, edges):
    """Index of the half-open bin [edges[i], edges[i+1]) holding each value."""
    idx = np.searchsorted(edges, values, side="right") - 1
    if np.any(idx < 0) or np.any(idx >= len(edges) - 1):
        raise InputError("value outside the binning range")
    return idx


@dataclass
class DiffCurves:
    """Per-bin and cumulative loss differences between two traces."""

    label: str             # "id" or "gap"
    lo: np.ndarray         # inclusive lower edge per bin
    hi: np.ndarray         # exclusive upper edge per bin
    count: np.ndarray      # records per bin
    diff: np.ndarray       # sum(loss_a - loss_b) per bin
    cum_diff: np.ndarray   # cumulative over bins
    cum_count: np.ndarray  # cumulative bin sizes (reference line)
    excluded: int = 0      # records in the no-previous bin (gap binning)
    excluded_diff: float = 0.0

    def to_text(self):
        cols = [self.label + "_lo", self.label + "_hi", "count", "diff",
                "cum_diff", "cum_count"]
        lines = ["\t".join(cols)]
        for i in range(len(self.lo)):
            lines.append("\t".join([
                str(int(self.lo[i])), str(int(self.hi[i])),
                str(int(self.count[i])),
                f"{self.diff[i]:.6f}", f"{self.cum_diff[i]:.6f}",
                str(int(self.cum_count[i])),
            ]))
        if self.excluded:
            lines.append(f"# no-previous bin: {self.excluded} records, "
                         f"diff {self.excluded_diff:.6f} (not in curves)")
        return "\n".join(lines) + "\n"


def _check_same_stream(trace_a, trace_b):
    if (len(trace_a) != len(trace_b)
            or not np.array_equal(trace_a.positions, trace_b.positions)
            or not np.array_equal(trace_a.ids, trace_b.ids)):
        raise InputError("traces cover different streams")


def binned_loss_diff(trace_a, trace_b, binning, edges=None, stream=None):
    """Cumulative curves of sum(loss_a - loss_b) over id or gap bins.

    binning "by_index" bins on the token id (a frequency rank, so the
    curve runs from frequent to rare); "by_gap" bins on the distance to
    the previous occurrence and needs the original `stream` to recover
    the gaps.  First occurrences are reported separately, never binned.
    """
    _check_same_stream(trace_a, trace_b)
    d = trace_a.losses.astype(np.float64) - trace_b.losses.astype(np.float64)

    if binning == "by_index":
        values = trace_a.ids.astype(np.int64)
        keep = np.ones(values.shape[0], dtype=bool)
        label = "id"
        if edges is None:
            edges = log_bin_edges(int(values.max()) if values.size else 1, 10)
    elif binning == "by_gap":
        if stream is None:
            raise InputError("by_gap binning needs the token stream")
        stream = np.asarray(stream, dtype=np.int64)
        if stream.shape[0] != len(trace_a) + 1:
            raise InputError("stream length does not match the traces")
        values = token_gaps(stream)[1:]  # gap of each target position
        keep = values != NO_PREVIOUS
        label = "gap"
        if edges is None:
            top = int(values[keep].max()) if keep.any() else 1
            edges = log_bin_edges(top, 2)
    else:
        raise InputError(f"unknown binning {binning!r}")

    edges = np.asarray(edges, dtype=np.int64)
    if edges.ndim != 1 or edges.shape[0] < 2 or np.any(np.diff(edges) <= 0):
        raise InputError("bin edges must be strictly increasing, length >= 2")

    n_bins = edges.shape[0] - 1
    idx = _assign_bins(values[keep], edges)
    count = np.bincount(idx, minlength=n_bins).astype(np.int64)
    diff = np.bincount(idx, weights=d[keep], minlength=n_bins)
    return DiffCurves(
        label=label,
        lo=edges[:-1], hi=edges[1:],
        count=count, diff=diff,
        cum_diff=np.cumsum(diff), cum_count=np.cumsum(count),
        excluded=int((~keep).sum()),
        excluded_diff=float(d[~keep].sum()),
    )


def write_curves(curves, path):
    with open(path, "w") as f:
        f.write(curves.to_text())


def analysis_summary(trace_a, trace_b, stream, out_dir,
                     id_edges=None, gap_edges=None):
    """Run both binnings, write TSV tables, return the summary dict."""
    os.makedirs(out_dir, exist_ok=True)
    by_id = binned_loss_diff(trace_a, trace_b, "by_index", edges=id_edges)
    by_gap = binned_loss_diff(trace_a, trace_b, "by_gap", edges=gap_edges,
                              stream=stream)
    write_curves(by_id, os.path.join(out_dir, "loss_diff_by_id.tsv"))
    write_curves(by_gap, os.path.join(out_dir, "loss_diff_by_gap.tsv"))
    summary = {
        "tokens": len(trace_a),
        "mean_loss_a": float(np.mean(trace_a.losses)) if len(trace_a) else 0.0,
        "mean_loss_b": float(np.mean(trace_b.losses)) if len(trace_b) else 0.0,
        "total_diff": float(np.sum(trace_a.losses.astype(np.float64)
                                   - trace_b.losses.astype(np.float64))),
        "first_occurrences": by_gap.excluded,
    }
    with open(os.path.join(out_dir, "analysis_summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    return summary
