"""Pipeline configuration: one JSON document, sections per stage.

The default configuration is the full-scale recipe; `desk_config()`
shrinks every knob to something a laptop CPU finishes in minutes while
keeping every ratio (warmup fraction, prune schedule shape, cache sizes
relative to context) recognizable.

Rules:
  * unknown sections or keys are rejected, as are wrong value types
  * overrides come in as "section.key=value" strings; the file is the
    single source of truth otherwise
  * a short hash of the canonical JSON names the run directory, so the
    same settings always land in the same place
"""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError
from .model import ModelConfig

DEFAULTS = {
    "corpus": {
        "source": "synthetic",      # "synthetic" or "text"
        "text_path": "",            # used when source == "text"
        "tokens": 2_000_000,
        "vocab": 30_000,
        "zipf_s": 1.1,
        "recency_p": 0.35,
        "recency_window": 400,
        "line_words": 18,
        "seed": 1234,
        "fractions": [0.9, 0.05, 0.05],
    },
    "model": {
        "vocab_size": 267_735,      # 0 = take the prepared corpus size
        "bins": [[1, 3_500], [3_501, 25_000], [25_001, 267_735]],
        "bin_dims": [256, 64, 4],
        "d_model": 256,
        "n_layers": 8,
        "n_heads": 8,
        "d_head": 24,
        "d_ff": 768,
        "context": 97,
        "extended_context": 1152,
        "activation": "relu",
        "dropout": 0.0,
        "cache_enabled": True,
        "theta_init": 0.016,
        "lambda_init": 0.07,
    },
    "train": {
        "steps": 200_000,
        "batch_size": 8,
        "lr": 0.0001,
        "warmup": 1000,
        "clip_norm": 0.25,
        "seed": 0,
        "cache_cap": 2000,
        "hebbian": True,
        "hebbian_gamma_min": 0.01,
        "hebbian_limit": 500,
        "eval_every": 200,
        "eval_tokens": 20_000,
    },
    "distill": {
        "lam_max": 0.5,
        "lam_min": 0.05,
        "top_k": 30,
        "teacher_n_layers": 16,
        "teacher_d_model": 512,
        "teacher_d_head": 64,
        "teacher_d_ff": 1536,
        "teacher_bin_dims": [512, 256, 16],
        "teacher_lr": 0.0005,
        "teacher_dropout": 0.1,
        "teacher_steps": 200_000,
    },
    "prune": {
        "rho": 0.358,
        "rho0": 0.16,
        "steps": 175_000,
        "freq": 1000,
        # Fine-tuning lr while the mask tightens.  Kept well below the
        # main run's peak: a fresh optimizer at peak lr shoves a
        # converged model out of its minimum, drowning the sparsity
        # signal in re-training noise.
        "ft_lr": 1e-4,
        "sensitivity_tokens": 20_000,
        "threshold_tol": 0.001,
    },
    "cache": {
        "search_capacity": 3000,
        "rounds": 3,
        "rel_tol": 0.001,
        "eval_tokens": 20_000,
    },
    "quantize": {
        "bits": 9,
        "act_bits": 9,
        "calib_batches": 10,
        # lr for the single quantization-aware step; one fresh-optimizer
        # step at the main peak lr costs several perplexity points on a
        # converged model, far more than the quantization itself.
        "qat_lr": 1e-5,
    },
    "score": {
        "sparse_format": "bitmask",
        "n_tokens": 20_000,
        "bin_fractions": [0.89, 0.09, 0.02],
    },
}

# Later stages may require earlier ones; searching the cache after
# quantization is forbidden (quantization pins the cache parameters).
STAGE_ORDER = ("prepare-data", "train-teacher", "train", "distill",
               "prune", "search-cache", "quantize", "eval", "score",
               "analyze")


def _check_section(section, values, defaults):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {section}.{key}")
        want = defaults[key]
        if isinstance(want, bool):
            ok = isinstance(value, bool)
        elif isinstance(want, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(want, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(want, str):
            ok = isinstance(value, str)
        elif isinstance(want, list):
            ok = isinstance(value, list)
        else:
            ok = True
        if not ok:
            raise ConfigError(
                f"{section}.{key}: expected {type(want).__name__}, "
                f"got {type(value).__name__}")


class PipelineConfig:
    """Validated settings document. Access sections as attributes."""

    def __init__(self, data=None):
        merged = copy.deepcopy(DEFAULTS)
        for section, values in (data or {}).items():
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            _check_section(section, values, merged[section])
            for key, value in values.items():
                if isinstance(merged[section][key], float) and isinstance(value, int):
                    value = float(value)
                merged[section][key] = value
        self.sections = merged

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def to_dict(self):
        return copy.deepcopy(self.sections)

    def to_json(self):
        return json.dumps(self.sections, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls(data)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def hash(self):
        canon = json.dumps(self.sections, sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def apply_overrides(self, overrides):
        """Apply "section.key=value" strings in order; returns self."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not section.key=value")
            dotted, _, raw = item.partition("=")
            if dotted.count(".") != 1:
                raise ConfigError(f"override key {dotted!r} must be section.key")
            section, key = dotted.split(".")
            if section not in self.sections:
                raise ConfigError(f"unknown config section {section!r}")
            if key not in self.sections[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            self.sections[section][key] = _coerce(
                raw, self.sections[section][key], f"{section}.{key}")
        return self


def _coerce(raw, current, where):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: {raw!r} is not a boolean")
    try:
        if isinstance(current, int) and not isinstance(current, bool):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            value = json.loads(raw)
            if not isinstance(value, list):
                raise ConfigError(f"{where}: {raw!r} is not a list")
            return value
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as "
                          f"{type(current).__name__}") from None
    return raw


# ------------------------------------------------------- derived configs

def _fit_bins(bins, dims, vocab_size):
    """Rescale bin boundaries proportionally onto [1, vocab_size]."""
    full = bins[-1][1]
    edges = [0]
    for lo, hi in bins[:-1]:
        cut = max(edges[-1] + 1, round(hi * vocab_size / full))
        edges.append(min(cut, vocab_size - (len(bins) - len(edges))))
    edges.append(vocab_size)
    out_bins, out_dims = [], []
    for i in range(len(edges) - 1):
        if edges[i] >= edges[i + 1]:
            continue
        out_bins.append([edges[i] + 1, edges[i + 1]])
        out_dims.append(dims[i])
    return out_bins, out_dims


def model_config(cfg, vocab_size=None):
    """ModelConfig for the student; vocab_size 0 adopts the corpus size."""
    m = dict(cfg.model)
    if m["vocab_size"] == 0:
        if vocab_size is None:
            raise ConfigError("model.vocab_size 0 needs a prepared corpus")
        bins, dims = _fit_bins(m["bins"], m["bin_dims"], vocab_size)
        m["vocab_size"], m["bins"], m["bin_dims"] = vocab_size, bins, dims
    elif vocab_size is not None and m["vocab_size"] != vocab_size:
        raise ConfigError(
            f"model.vocab_size {m['vocab_size']} != corpus vocab {vocab_size}")
    return ModelConfig.from_dict(m)


def teacher_config(cfg, vocab_size=None):
    """Teacher: wider and deeper per the distill section, no cache."""
    student = model_config(cfg, vocab_size)
    d = cfg.distill
    dims = list(d["teacher_bin_dims"])[:len(student.bins)]
    dims = [min(dim, d["teacher_d_model"]) for dim in dims]
    return ModelConfig(
        vocab_size=student.vocab_size,
        bins=[list(b) for b in student.bins],
        bin_dims=dims,
        d_model=d["teacher_d_model"],
        n_layers=d["teacher_n_layers"],
        n_heads=student.n_heads,
        d_head=d["teacher_d_head"],
        d_ff=d["teacher_d_ff"],
        context=student.context,
        extended_context=max(student.extended_context,
                             d["teacher_n_layers"] * (student.context - 1) + 1),
        activation=student.activation,
        dropout=d["teacher_dropout"],
        cache_enabled=False,
    )


def desk_config():
    """Small enough to train on a CPU in minutes, same moving parts."""
    return PipelineConfig({
        "corpus": {"tokens": 200_000, "vocab": 2000, "seed": 1234},
        "model": {
            "vocab_size": 0,
            "bins": [[1, 64], [65, 512], [513, 2000]],
            "bin_dims": [64, 16, 4],
            "d_model": 64,
            "n_layers": 2,
            "n_heads": 2,
            "d_head": 16,
            "d_ff": 128,
            "context": 33,
            "extended_context": 96,
        },
        "train": {
            "steps": 300,
            "batch_size": 4,
            "lr": 0.001,
            "warmup": 30,
            "cache_cap": 100,
            "eval_every": 100,
            "eval_tokens": 3000,
            "hebbian_limit": 50,
        },
        "distill": {
            "teacher_n_layers": 4,
            "teacher_d_model": 128,
            "teacher_d_head": 32,
            "teacher_d_ff": 256,
            "teacher_bin_dims": [128, 32, 8],
            "teacher_dropout": 0.0,
            "teacher_steps": 300,
        },
        "prune": {"steps": 200, "freq": 20, "sensitivity_tokens": 2000},
        "cache": {"search_capacity": 150, "eval_tokens": 3000},
        # qat_lr: at desk scale the converged model sits in a minimum so
        # sharp that even a 1e-5 step moves perplexity more than the
        # quantization grid does; keep the step truly symbolic.
        "quantize": {"calib_batches": 4, "qat_lr": 1e-6},
        "score": {"n_tokens": 2000},
    })
