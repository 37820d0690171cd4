"""Magnitude pruning: sensitivity curves, threshold search, gradual ramp.

Sparsity is allocated per parameter matrix by measuring how validation
perplexity degrades as each matrix is pruned alone (a sensitivity
curve), then binary-searching a shared perplexity threshold xi* whose
per-matrix sparsities average (weighted by size) to the target.  The
ramp from initial to final sparsity follows the cubic gradual-pruning
schedule, tightening magnitude masks every `frequency` steps while
fine-tuning continues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cache as cache_mod
from . import train as train_mod
from .errors import ConfigError, ContractError, InputError

DEFAULT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def isotonic_non_decreasing(values):
    """Pool-adjacent-violators: least-squares monotone fit, in order."""
    vals = [float(v) for v in values]
    weights = [1.0] * len(vals)
    blocks = []                      # (mean, weight, count)
    for v, w in zip(vals, weights):
        blocks.append([v, w, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            w = w1 + w2
            blocks.append([(m1 * w1 + m2 * w2) / w, w, c1 + c2])
    out = []
    for m, _w, c in blocks:
        out.extend([m] * c)
    return np.asarray(out, dtype=np.float64)


@dataclass
class SensitivityCurve:
    name: str
    sparsities: np.ndarray       # strictly increasing, in [0, 1)
    perplexities: np.ndarray     # raw measurements
    fitted: np.ndarray = field(default=None)  # isotonic, same length

    def __post_init__(self):
        s = np.asarray(self.sparsities, dtype=np.float64)
        if s.ndim != 1 or s.size < 2 or np.any(np.diff(s) <= 0):
            raise ContractError("sparsities must be strictly increasing")
        if np.any(s < 0) or np.any(s >= 1):
            raise ContractError("sparsities must lie in [0, 1)")
        self.sparsities = s
        self.perplexities = np.asarray(self.perplexities, dtype=np.float64)
        if self.fitted is None:
            self.fitted = isotonic_non_decreasing(self.perplexities)

    def sparsity_at(self, xi):
        """Largest sparsity whose fitted perplexity stays at or below xi
        (clamped to the sampled range)."""
        if xi < self.fitted[0]:
            return float(self.sparsities[0])
        if xi >= self.fitted[-1]:
            return float(self.sparsities[-1])
        # rightmost sparsity per fitted value makes the inverse well
        # defined across the flat runs isotonic fitting creates
        idx = np.searchsorted(self.fitted, xi, side="right") - 1
        lo = idx
        hi = idx + 1
        if self.fitted[hi] == self.fitted[lo]:
            return float(self.sparsities[hi])
        frac = (xi - self.fitted[lo]) / (self.fitted[hi] - self.fitted[lo])
        return float(self.sparsities[lo]
                     + frac * (self.sparsities[hi] - self.sparsities[lo]))

    def to_text(self):
        lines = [f"# parameter\t{self.name}", "sparsity\tperplexity\tfitted"]
        for s, p, f in zip(self.sparsities, self.perplexities, self.fitted):
            lines.append(f"{s:.4f}\t{p:.6f}\t{f:.6f}")
        return "\n".join(lines) + "\n"


def curves_to_text(curves):
    return "\n".join(c.to_text() for c in curves)


def parse_curves(text):
    curves = []
    name, rows = None, []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("# parameter"):
            if name is not None:
                curves.append(_curve_from_rows(name, rows))
            name, rows = line.split("\t", 1)[1], []
        elif line and not line.startswith("sparsity"):
            rows.append([float(x) for x in line.split("\t")])
    if name is not None:
        curves.append(_curve_from_rows(name, rows))
    return curves


def _curve_from_rows(name, rows):
    arr = np.asarray(rows, dtype=np.float64)
    return SensitivityCurve(name, arr[:, 0], arr[:, 1], arr[:, 2])


# ------------------------------------------------------------------ masks

def apply_magnitude_mask(values, sparsity):
    """Boolean keep-mask zeroing the floor(s*|phi|) smallest-magnitude
    entries; ties go to the lowest flat index."""
    if not 0.0 <= sparsity < 1.0:
        raise ContractError("sparsity must be in [0, 1)")
    flat = np.abs(np.asarray(values)).ravel()
    k = int(math.floor(sparsity * flat.size))
    mask = np.ones(flat.size, dtype=bool)
    if k > 0:
        order = np.argsort(flat, kind="stable")
        mask[order[:k]] = False
    return mask.reshape(np.asarray(values).shape)


def prunable_names(state, include_embeddings=False):
    """Weight matrices eligible for pruning; 1-d vectors, norm gains,
    and position biases stay dense.  Embedding tables (and the tied
    output head) join only when include_embeddings is set."""
    out = []
    for name, t in sorted(state.params.items()):
        if t.data.ndim != 2:
            continue
        if name.startswith(("embed.", "softmax.")):
            if include_embeddings:
                out.append(name)
        elif ".attn.w" in name or ".ffn.w" in name:
            out.append(name)
    return out


# ------------------------------------------------------- sensitivity pass

def sensitivity_analysis(state, name, val_ids, grid=DEFAULT_GRID,
                         cache_params=None, eval_tokens=None):
    """Measure validation perplexity with `name` masked at each grid
    sparsity (weights restored afterwards)."""
    ids = np.asarray(val_ids if eval_tokens is None else val_ids[:eval_tokens])
    param = state.params[name]
    original = param.data.copy()
    ppls = []
    try:
        for s in grid:
            mask = apply_magnitude_mask(original, s)
            param.data = np.where(mask, original, 0).astype(original.dtype)
            state.invalidate_caches()
            nll = cache_mod.evaluate_stream(state, ids, cache_params)
            ppls.append(cache_mod.perplexity(nll))
    finally:
        param.data = original
        state.invalidate_caches()
    return SensitivityCurve(name, np.asarray(grid, dtype=np.float64), ppls)


# ------------------------------------------------------- threshold search

def weighted_sparsity(curves, sizes, xi):
    num = sum(sizes[c.name] * c.sparsity_at(xi) for c in curves)
    den = sum(sizes[c.name] for c in curves)
    return num / den


def solve_threshold(curves, sizes, rho_target, tol=1e-3, max_iter=200):
    """Binary-search the shared perplexity threshold xi*.

    Returns (xi*, {name: rho_phi}).  The weighted average of the
    returned sparsities reproduces rho_target within tol; raises when
    the target exceeds what the sampled curve ranges can reach, naming
    the parameter whose range binds first.
    """
    lo = min(float(c.fitted[0]) for c in curves)
    hi = max(float(c.fitted[-1]) for c in curves)
    reach = weighted_sparsity(curves, sizes, hi)
    if rho_target > reach + tol:
        binding = min(curves, key=lambda c: c.sparsities[-1])
        raise InputError(
            f"target sparsity {rho_target} unreachable (max {reach:.4f}); "
            f"binding parameter: {binding.name} "
            f"(curve tops out at {binding.sparsities[-1]})")
    floor = weighted_sparsity(curves, sizes, lo)
    if rho_target < floor - tol:
        raise InputError(
            f"target sparsity {rho_target} below the curves' floor {floor:.4f}")
    xi = (lo + hi) / 2
    for _ in range(max_iter):
        xi = (lo + hi) / 2
        rho = weighted_sparsity(curves, sizes, xi)
        if abs(rho - rho_target) <= tol:
            break
        if rho < rho_target:
            lo = xi
        else:
            hi = xi
    targets = {c.name: c.sparsity_at(xi) for c in curves}
    return xi, targets


# ----------------------------------------------------------- AGP schedule

@dataclass
class PruneSchedule:
    s_initial: float
    s_final: float
    t_start: int
    t_end: int
    frequency: int

    def __post_init__(self):
        if not 0.0 <= self.s_initial <= self.s_final < 1.0:
            raise ConfigError("need 0 <= s_i <= s_f < 1")
        if self.t_end <= self.t_start or self.frequency < 1:
            raise ConfigError("bad schedule range")
        if (self.t_end - self.t_start) % self.frequency:
            raise ConfigError("frequency must divide the step range")


def agp_sparsity(t, schedule):
    """Cubic ramp evaluated at pruning-frequency boundaries and held
    constant in between; clamped outside [t_start, t_end]."""
    sc = schedule
    t = min(max(t, sc.t_start), sc.t_end)
    tq = sc.t_start + ((t - sc.t_start) // sc.frequency) * sc.frequency
    frac = (tq - sc.t_start) / (sc.t_end - sc.t_start)
    return sc.s_final + (sc.s_initial - sc.s_final) * (1.0 - frac) ** 3


# -------------------------------------------------------------- prune run

def global_sparsity(state, names):
    zeros = sum(int(np.count_nonzero(~state.masks[n])) for n in names
                if n in state.masks)
    total = sum(state.params[n].data.size for n in names)
    return zeros / total if total else 0.0


def prune_train(state, train_ids, val_ids, settings, rho_targets,
                schedule_range, rho_initial=None, metrics_path=None):
    """Fine-tune while tightening per-parameter magnitude masks.

    rho_targets: {name: final sparsity} (from solve_threshold).
    schedule_range: (t_end, frequency) inside the settings.steps run;
    after t_end the masks stay at their final sparsity while training
    continues.  Initial sparsities scale each target so that the
    size-weighted global sparsity starts near rho_initial.
    """
    names = sorted(rho_targets)
    sizes = {n: state.params[n].data.size for n in names}
    rho_final = (sum(sizes[n] * rho_targets[n] for n in names)
                 / sum(sizes.values()))
    t_end, freq = schedule_range
    if t_end > settings.steps - 1:
        raise ConfigError("schedule must end within the training run")
    schedules = {}
    for n in names:
        s_f = rho_targets[n]
        s_i = s_f * (rho_initial / rho_final) if rho_initial else 0.0
        schedules[n] = PruneSchedule(min(s_i, s_f), s_f, 0, t_end, freq)

    def tighten(st, step):
        if step > t_end or step % freq:
            return
        for n in names:
            s = agp_sparsity(step, schedules[n])
            mask = apply_magnitude_mask(st.params[n].data, s)
            st.masks[n] = mask
            st.params[n].data[~mask] = 0
        st.invalidate_caches()

    summary = train_mod.train(state, train_ids, val_ids, settings,
                              metrics_path=metrics_path, step_hook=tighten)
    # land exactly on the final targets
    for n in names:
        mask = apply_magnitude_mask(state.params[n].data, rho_targets[n])
        state.masks[n] = mask
        state.params[n].data[~mask] = 0
    state.invalidate_caches()
    summary["global_sparsity"] = global_sparsity(state, names)
    summary["rho_final"] = rho_final
    return summary
