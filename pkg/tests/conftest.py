"""Shared fixtures and gradient-audit helpers.

The expensive end-to-end runs (training comparisons for the directional
acceptance checks) live in session-scoped fixtures so one `pytest`
invocation pays for them once; everything else uses throwaway tiny
models.
"""

import json
import os

import numpy as np
import pytest

import microlm.tensor as T
from microlm import cli
from microlm.config import PipelineConfig, desk_config
from microlm.model import ModelConfig, ModelState

# ------------------------------------------------------------------ FD audit

# Central differences on an f64 forward have a noise floor around
# eps * |f| / (2h); with |f| ~ 1 and h = 1e-5 that is ~1e-11.  ATOL sits
# safely above it so comparisons of near-zero derivatives (e.g. a
# saturated softmax's score path) measure agreement, not cancellation.
FD_RTOL = 1e-4
FD_ATOL = 5e-9
FD_STEP = 1e-5


def fd_coordinate_audit(build_loss, params, h=FD_STEP, rtol=FD_RTOL,
                        atol=FD_ATOL, max_coords=None, rng=None):
    """Per-coordinate central-difference audit of d(loss)/d(param).

    build_loss() must run the forward pass under the active tape and
    return the scalar loss tensor.  params maps name -> leaf Tensor; all
    must be float64 for the tolerances to make sense.  Returns the worst
    (name, index, rel_error) triple among the checked coordinates.
    """
    with T.Tape() as tape:
        tape.backward(build_loss())
    grads = {}
    for name, p in params.items():
        assert p.grad is not None, f"{name} received no gradient"
        assert p.grad.shape == p.data.shape
        grads[name] = np.array(p.grad, dtype=np.float64)
        p.grad = None

    def value():
        with T.Tape():
            return float(build_loss().data)

    worst = ("", -1, 0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gf = grads[name].reshape(-1)
        idx_iter = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx_iter = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in idx_iter:
            old = flat[idx]
            flat[idx] = old + h
            f1 = value()
            flat[idx] = old - h
            f2 = value()
            flat[idx] = old
            fd = (f1 - f2) / (2.0 * h)
            err = abs(fd - gf[idx])
            tol = max(rtol * max(abs(fd), abs(gf[idx])), atol)
            rel = err / max(abs(fd), abs(gf[idx]), atol)
            if rel > worst[2]:
                worst = (name, int(idx), rel)
            assert err <= tol, (
                f"{name}[{idx}]: analytic {gf[idx]:.6e} vs central-diff "
                f"{fd:.6e} (err {err:.2e} > tol {tol:.2e})")
    return worst


def fd_directional_audit(build_loss, params, h=FD_STEP, rtol=FD_RTOL,
                         atol=FD_ATOL, seed=0, invalidate=None):
    """Directional central-difference audit, one random direction per tensor.

    Aggregating a whole tensor into one directional derivative keeps the
    compared quantities well above the finite-difference noise floor even
    when individual coordinates have vanishing gradients.
    """
    with T.Tape() as tape:
        tape.backward(build_loss())
    grads = {}
    for name, p in params.items():
        assert p.grad is not None, f"{name} received no gradient"
        grads[name] = np.array(p.grad, dtype=np.float64)
        p.grad = None

    def value():
        if invalidate is not None:
            invalidate()
        with T.Tape():
            return float(build_loss().data)

    rng = np.random.default_rng(seed)
    worst = ("", 0.0)
    for name, p in params.items():
        direction = rng.standard_normal(p.data.shape)
        norm = float(np.sqrt((direction ** 2).sum()))
        direction = direction / norm
        old = p.data.copy()
        p.data += h * direction
        f1 = value()
        p.data[...] = old - h * direction
        f2 = value()
        p.data[...] = old
        if invalidate is not None:
            invalidate()
        fd = (f1 - f2) / (2.0 * h)
        an = float((grads[name] * direction).sum())
        err = abs(fd - an)
        tol = max(rtol * max(abs(fd), abs(an)), atol)
        rel = err / max(abs(fd), abs(an), atol)
        if rel > worst[1]:
            worst = (name, rel)
        assert err <= tol, (
            f"{name}: analytic directional {an:.6e} vs central-diff "
            f"{fd:.6e} (err {err:.2e} > tol {tol:.2e})")
    return worst


# --------------------------------------------------------------- tiny models

TINY_KW = dict(vocab_size=50, bins=[[1, 10], [11, 50]], bin_dims=[8, 4],
               d_model=8, n_layers=2, n_heads=2, d_head=3, d_ff=16,
               context=5, extended_context=2 * (5 - 1) + 1 + 3)


def make_tiny_state(dtype=np.float64, seed=3, **overrides):
    kw = dict(TINY_KW)
    kw.update(overrides)
    cfg = ModelConfig(**kw)
    return ModelState(cfg, rng=np.random.default_rng(seed), dtype=dtype)


@pytest.fixture
def tiny_state():
    return make_tiny_state()


@pytest.fixture
def tiny_ids():
    return np.random.default_rng(11).integers(1, 51, size=60)


# ------------------------------------------------- session pipeline fixtures
#
# One corpus (about 2M synthetic tokens) and a family of training runs on
# it, shared by the directional acceptance checks.  Every run goes
# through the real CLI so the artifact plumbing is exercised too.

RUN_STEPS = 350


def _desk_dict(**section_updates):
    base = desk_config().to_dict()
    base["corpus"]["tokens"] = 2_000_000
    base["train"]["steps"] = RUN_STEPS
    base["train"]["eval_every"] = 10 ** 9  # skip mid-run evals
    for section, kv in section_updates.items():
        base[section].update(kv)
    return base


def run_stages(runs_root, config_dict, stages, extra_args=()):
    """Drive CLI stages against one config; returns the run directory."""
    cfg = PipelineConfig(config_dict)
    cfg_path = os.path.join(str(runs_root), f"config_{cfg.hash()}.json")
    with open(cfg_path, "w") as f:
        f.write(cfg.to_json())
    old = os.environ.get(cli.ENV_RUNS)
    os.environ[cli.ENV_RUNS] = str(runs_root)
    try:
        for stage in stages:
            rc = cli.main([stage, "--config", cfg_path, *extra_args])
            assert rc == 0, f"stage {stage} exited {rc}"
    finally:
        if old is None:
            os.environ.pop(cli.ENV_RUNS, None)
        else:
            os.environ[cli.ENV_RUNS] = old
    return os.path.join(str(runs_root), cfg.hash())


def read_metrics(run_dir):
    records = []
    with open(os.path.join(run_dir, "metrics.jsonl")) as f:
        for line in f:
            records.append(json.loads(line))
    return records


def stage_metric(run_dir, stage, key):
    vals = [r[key] for r in read_metrics(run_dir)
            if r.get("stage") == stage and key in r]
    assert vals, f"no {stage} record with {key} in {run_dir}"
    return vals[-1]


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def cache_run(runs_root):
    """Student trained with the cache in the loss (the main pipeline run)."""
    return run_stages(runs_root, _desk_dict(),
                      ["prepare-data", "train", "search-cache"])


@pytest.fixture(scope="session")
def nocache_run(runs_root):
    """Same budget, cache disabled end to end."""
    cfg = _desk_dict(model={"cache_enabled": False}, train={"cache_cap": 0})
    return run_stages(runs_root, cfg, ["prepare-data", "train"])


@pytest.fixture(scope="session")
def distill_run(runs_root):
    """Hard-label student, a much stronger teacher, and a distilled
    student at the same 200-step budget.  The shorter student budget
    (compared with cache_run) keeps the teacher-student gap wide enough
    for the soft labels to carry signal on the tiny synthetic corpus.
    """
    cfg = _desk_dict(train={"steps": 200}, distill={"teacher_steps": 1800})
    return run_stages(runs_root, cfg,
                      ["prepare-data", "train", "train-teacher", "distill"])


@pytest.fixture(scope="session")
def pipeline_corpus(cache_run):
    """The prepared corpus splits behind the session runs."""
    from microlm.corpus import load_corpus
    vocab, streams, _ = load_corpus(os.path.join(cache_run, "corpus"))
    return vocab, streams


@pytest.fixture(scope="session")
def trained_student(cache_run):
    """Loader for the cache run's tuned student checkpoint."""
    from microlm.model import load_model

    def load():
        return load_model(os.path.join(cache_run, "searched.ckpt"))

    return load
