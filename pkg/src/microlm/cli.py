"""Command-line pipeline driver.

One stage per invocation; artifacts live under a run directory named by
the config hash, so identical settings always resume the same run:

    runs/<hash>/corpus/            prepared id streams + vocab
    runs/<hash>/teacher.ckpt       trained teacher
    runs/<hash>/student.ckpt       hard-label-trained student
    runs/<hash>/distilled.ckpt     soft-label-trained student
    runs/<hash>/pruned.ckpt        sparsified student
    runs/<hash>/searched.ckpt      cache parameters tuned
    runs/<hash>/quantized.ckpt     weights/activations quantized
    runs/<hash>/metrics.jsonl      one record per completed stage

Stages that find their output already present are no-ops unless --force
is given.  Exit codes: 0 ok, 2 configuration error, 3 input error, 4
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import analysis
from . import cache as cache_mod
from . import config as config_mod
from . import corpus
from . import model as model_mod
from . import prune
from . import quant
from . import score
from . import train as train_mod
from .errors import ConfigError, ContractError, InputError, NumericalError

ENV_RUNS = "MICROLM_RUNS"

# newest pipeline product first
CHECKPOINT_PRECEDENCE = ("quantized.ckpt", "searched.ckpt", "pruned.ckpt",
                         "distilled.ckpt", "student.ckpt")


# ------------------------------------------------------------- plumbing

def _run_dir(cfg, args):
    root = args.runs or os.environ.get(ENV_RUNS, "runs")
    rd = os.path.join(root, cfg.hash())
    os.makedirs(rd, exist_ok=True)
    cfg.save(os.path.join(rd, "config.json"))
    return rd


def _skip_existing(path, args):
    if os.path.exists(path) and not args.force:
        print(f"{path} exists; skipping (use --force to redo)")
        return True
    return False


def _require(rd, *names):
    """First existing artifact out of `names`, else an input error."""
    for name in names:
        path = os.path.join(rd, name)
        if os.path.exists(path):
            return path
    raise InputError(f"missing input artifact: need one of {names} in {rd} "
                     f"(run the earlier stages first)")


def _load_corpus(rd):
    return corpus.load_corpus(os.path.join(rd, "corpus"))


def _emit(rd, cfg, stage, record):
    rec = {"stage": stage, "config_hash": cfg.hash(),
           "time": round(time.time(), 3)}
    rec.update(record)
    with open(os.path.join(rd, "metrics.jsonl"), "a") as fh:
        fh.write(json.dumps(rec) + "\n")
    shown = {k: v for k, v in rec.items() if k not in ("time", "config_hash")}
    print(json.dumps(shown))


def _eval_cache_params(cfg, state):
    """Evaluation-time cache: the search capacity once tuned, otherwise
    the training capacity; None when the model has no cache."""
    if not state.config.cache_enabled:
        return None
    if "search-cache" in state.stages:
        cap = cfg.cache["search_capacity"]
    else:
        cap = cfg.train["cache_cap"]
    if cap < 1:
        return None
    return cache_mod.CacheParams(cap, state.cache_theta(),
                                 state.cache_lambda())


def _val_ppl(cfg, state, val_ids):
    n = min(cfg.cache["eval_tokens"], len(val_ids))
    ids = np.asarray(val_ids[:n], dtype=np.int64)
    nll = cache_mod.evaluate_stream(state, ids, _eval_cache_params(cfg, state))
    return cache_mod.perplexity(nll)


def _score_report(cfg, state, val_ids):
    n_tok = min(cfg.score["n_tokens"], len(val_ids) - 1)
    inputs = np.asarray(val_ids[:n_tok], dtype=np.int64)
    bin_counts = np.bincount(state.config.bin_of(inputs),
                             minlength=len(state.config.bins)).tolist()
    cp = _eval_cache_params(cfg, state)
    qbits = (state.quantization or {}).get("bits") or None
    return score.score_state(state, n_tok, bin_counts,
                             cache_capacity=cp.capacity if cp else None,
                             quant_bits=qbits,
                             sparse_format=cfg.score["sparse_format"])


def _model_metrics(cfg, rd, stage, state, val_ids, extra=None):
    report = _score_report(cfg, state, val_ids)
    record = {
        "params_storage": round(report.param_storage, 2),
        "ops_per_token": round(report.total_ops, 2),
        "val_ppl": round(_val_ppl(cfg, state, val_ids), 4),
    }
    if extra:
        record.update(extra)
    _emit(rd, cfg, stage, record)


def _train_settings(cfg, steps=None, lr=None, distill=False, seed=None):
    t = cfg.train
    kwargs = dict(
        steps=steps if steps is not None else t["steps"],
        batch_size=t["batch_size"],
        lr=lr if lr is not None else t["lr"],
        warmup=t["warmup"],
        clip_norm=t["clip_norm"],
        seed=seed if seed is not None else t["seed"],
        cache_cap=t["cache_cap"],
        hebbian=t["hebbian"],
        hebbian_gamma_min=t["hebbian_gamma_min"],
        hebbian_limit=t["hebbian_limit"],
        eval_every=t["eval_every"],
        eval_tokens=t["eval_tokens"],
    )
    if distill:
        kwargs["lam_max"] = cfg.distill["lam_max"]
        kwargs["lam_min"] = cfg.distill["lam_min"]
    if kwargs["warmup"] >= kwargs["steps"]:
        kwargs["warmup"] = max(kwargs["steps"] - 1, 0)
    return train_mod.TrainSettings(**kwargs)


def _save(state, path, cfg, stage, source=None):
    state.stages.append(stage)
    meta = {"config_hash": cfg.hash(), "stage": stage}
    if source:
        meta["source"] = os.path.basename(source)
    model_mod.save_model(state, path, extra_meta=meta)


# --------------------------------------------------------------- stages

def cmd_prepare_data(cfg, rd, args):
    out = os.path.join(rd, "corpus")
    if _skip_existing(os.path.join(out, corpus.MANIFEST_NAME), args):
        return
    c = cfg.corpus
    if c["source"] == "synthetic":
        text = corpus.synthetic_text(corpus.SyntheticSpec(
            tokens=c["tokens"], vocab=c["vocab"], zipf_s=c["zipf_s"],
            recency_p=c["recency_p"], recency_window=c["recency_window"],
            line_words=c["line_words"], seed=c["seed"]))
    elif c["source"] == "text":
        path = c["text_path"]
        if not path or not os.path.exists(path):
            raise InputError(f"corpus.text_path not found: {path!r}")
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    else:
        raise ConfigError(f"corpus.source must be synthetic or text, "
                          f"got {c['source']!r}")
    vocab, streams = corpus.prepare_splits(text, tuple(c["fractions"]))
    corpus.save_corpus(out, vocab, streams,
                       extra={"config_hash": cfg.hash()})
    _emit(rd, cfg, "prepare-data", {
        "vocab": vocab.size,
        "tokens": {k: int(len(v)) for k, v in streams.items()},
    })


def cmd_train_teacher(cfg, rd, args):
    out = os.path.join(rd, "teacher.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    tcfg = config_mod.teacher_config(cfg, vocab.size)
    state = model_mod.ModelState(
        tcfg, rng=np.random.default_rng(cfg.train["seed"]))
    settings = _train_settings(cfg, steps=cfg.distill["teacher_steps"],
                               lr=cfg.distill["teacher_lr"])
    summary = train_mod.train(state, streams["train"], streams["valid"],
                              settings,
                              metrics_path=os.path.join(rd, "teacher_log.jsonl"))
    _save(state, out, cfg, "train-teacher")
    _model_metrics(cfg, rd, "train-teacher", state, streams["valid"],
                   {"final_val_ppl": summary["final_val_ppl"]})


def cmd_train(cfg, rd, args):
    out = os.path.join(rd, "student.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    mcfg = config_mod.model_config(cfg, vocab.size)
    state = model_mod.ModelState(
        mcfg, rng=np.random.default_rng(cfg.train["seed"]))
    settings = _train_settings(cfg)
    summary = train_mod.train(state, streams["train"], streams["valid"],
                              settings,
                              metrics_path=os.path.join(rd, "train_log.jsonl"))
    _save(state, out, cfg, "train")
    _model_metrics(cfg, rd, "train", state, streams["valid"],
                   {"final_val_ppl": summary["final_val_ppl"]})


def cmd_distill(cfg, rd, args):
    out = os.path.join(rd, "distilled.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    teacher_path = _require(rd, "teacher.ckpt")
    labels_path = os.path.join(rd, "teacher_labels.json")
    if not os.path.exists(labels_path) or args.force:
        teacher = model_mod.load_model(teacher_path)
        labels = train_mod.extract_teacher_labels(
            teacher, streams["train"], top_k=cfg.distill["top_k"])
        labels.save(labels_path)
        del teacher
    else:
        labels = train_mod.TeacherLabels.load(labels_path)
    mcfg = config_mod.model_config(cfg, vocab.size)
    state = model_mod.ModelState(
        mcfg, rng=np.random.default_rng(cfg.train["seed"]))
    settings = _train_settings(cfg, distill=True)
    summary = train_mod.train(state, streams["train"], streams["valid"],
                              settings, teacher_labels=labels,
                              metrics_path=os.path.join(rd, "distill_log.jsonl"))
    _save(state, out, cfg, "distill", source=teacher_path)
    _model_metrics(cfg, rd, "distill", state, streams["valid"],
                   {"final_val_ppl": summary["final_val_ppl"]})


def cmd_prune(cfg, rd, args):
    out = os.path.join(rd, "pruned.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    src = _require(rd, "distilled.ckpt", "student.ckpt")
    state = model_mod.load_model(src)
    p = cfg.prune
    names = prune.prunable_names(state)
    sens_ids = streams["valid"][:p["sensitivity_tokens"]]
    cp = _eval_cache_params(cfg, state)
    curves = [prune.sensitivity_analysis(state, n, sens_ids, cache_params=cp)
              for n in names]
    with open(os.path.join(rd, "sensitivity.tsv"), "w") as fh:
        fh.write(prune.curves_to_text(curves))
    sizes = {n: state.params[n].data.size for n in names}
    xi, rho_targets = prune.solve_threshold(curves, sizes, p["rho"],
                                            tol=p["threshold_tol"])
    settings = _train_settings(cfg, steps=p["steps"], lr=p["ft_lr"])
    t_end = ((p["steps"] - 1) // p["freq"]) * p["freq"]
    summary = prune.prune_train(
        state, streams["train"], streams["valid"], settings, rho_targets,
        schedule_range=(t_end, p["freq"]), rho_initial=p["rho0"],
        metrics_path=os.path.join(rd, "prune_log.jsonl"))
    _save(state, out, cfg, "prune", source=src)
    _model_metrics(cfg, rd, "prune", state, streams["valid"], {
        "threshold": round(xi, 4),
        "global_sparsity": round(summary["global_sparsity"], 4),
        "final_val_ppl": summary["final_val_ppl"],
    })


def cmd_search_cache(cfg, rd, args):
    out = os.path.join(rd, "searched.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    src = _require(rd, "pruned.ckpt", "distilled.ckpt", "student.ckpt")
    state = model_mod.load_model(src)
    if not state.config.cache_enabled:
        raise ConfigError("model has no cache to search")
    if state.cache_frozen or "quantize" in state.stages:
        raise ConfigError("stage order: cache search must run before "
                          "quantization (quantization freezes the cache)")
    c = cfg.cache
    ids = streams["valid"][:c["eval_tokens"]]
    result = cache_mod.search_cache_params(
        state, ids, c["search_capacity"],
        rounds=c["rounds"], rel_tol=c["rel_tol"])
    state.set_cache_params(result["theta"], result["lam"])
    with open(os.path.join(rd, "cache_search.json"), "w") as fh:
        json.dump(result, fh, indent=2, default=float)
        fh.write("\n")
    _save(state, out, cfg, "search-cache", source=src)
    _model_metrics(cfg, rd, "search-cache", state, streams["valid"], {
        "theta": round(result["theta"], 6),
        "lambda": round(result["lam"], 6),
        "search_nll": round(result["nll"], 6),
    })


def cmd_quantize(cfg, rd, args):
    out = os.path.join(rd, "quantized.ckpt")
    if _skip_existing(out, args):
        return
    vocab, streams, _ = _load_corpus(rd)
    src = _require(rd, "searched.ckpt", "pruned.ckpt", "distilled.ckpt",
                   "student.ckpt")
    state = model_mod.load_model(src)
    if state.config.cache_enabled and "search-cache" not in state.stages:
        raise ConfigError("stage order: run search-cache before quantize "
                          "(quantization freezes the cache parameters)")
    q = cfg.quantize
    summary = quant.quantize_model(
        state, streams["train"], streams["valid"], bits=q["bits"],
        act_bits=q["act_bits"],
        settings=_train_settings(cfg, steps=1, lr=q["qat_lr"]),
        calib_batches=q["calib_batches"])
    _save(state, out, cfg, "quantize", source=src)
    _model_metrics(cfg, rd, "quantize", state, streams["valid"], {
        "weight_bits": summary["weight_bits"],
        "act_bits": summary["act_bits"],
        "quantized_tensors": summary["quantized_tensors"],
    })


def cmd_eval(cfg, rd, args):
    vocab, streams, _ = _load_corpus(rd)
    src = (os.path.join(rd, args.checkpoint) if args.checkpoint
           else _require(rd, *CHECKPOINT_PRECEDENCE))
    if not os.path.exists(src):
        raise InputError(f"checkpoint not found: {src}")
    state = model_mod.load_model(src)
    record = {"checkpoint": os.path.basename(src)}
    for split in ("valid", "test"):
        if split in streams and len(streams[split]) >= 2:
            record[f"{split}_ppl"] = round(
                _val_ppl(cfg, state, streams[split]), 4)
    _emit(rd, cfg, "eval", record)


def cmd_score(cfg, rd, args):
    vocab, streams, _ = _load_corpus(rd)
    src = (os.path.join(rd, args.checkpoint) if args.checkpoint
           else _require(rd, *CHECKPOINT_PRECEDENCE))
    if not os.path.exists(src):
        raise InputError(f"checkpoint not found: {src}")
    state = model_mod.load_model(src)
    report = _score_report(cfg, state, streams["valid"])
    text = report.format()
    with open(os.path.join(rd, "score.txt"), "w") as fh:
        fh.write(text)
    print(text)
    _emit(rd, cfg, "score", {
        "checkpoint": os.path.basename(src),
        "params_storage": round(report.param_storage, 2),
        "ops_per_token": round(report.total_ops, 2),
        "score": round(report.score, 6),
    })


def cmd_analyze(cfg, rd, args):
    vocab, streams, _ = _load_corpus(rd)
    path_a = (os.path.join(rd, args.a) if args.a
              else _require(rd, *CHECKPOINT_PRECEDENCE))
    path_b = os.path.join(rd, args.b) if args.b else _require(rd, "student.ckpt")
    for p in (path_a, path_b):
        if not os.path.exists(p):
            raise InputError(f"checkpoint not found: {p}")
    state_a = model_mod.load_model(path_a)
    state_b = model_mod.load_model(path_b)
    n = min(cfg.cache["eval_tokens"], len(streams["valid"]))
    ids = np.asarray(streams["valid"][:n], dtype=np.int64)
    out_dir = os.path.join(rd, "analysis")
    trace_a = analysis.collect_trace(state_a, ids,
                                     _eval_cache_params(cfg, state_a))
    trace_b = analysis.collect_trace(state_b, ids,
                                     _eval_cache_params(cfg, state_b))
    summary = analysis.analysis_summary(trace_a, trace_b, ids, out_dir)
    trace_a.save(os.path.join(out_dir, "trace_a.bin"))
    trace_b.save(os.path.join(out_dir, "trace_b.bin"))
    _emit(rd, cfg, "analyze", {
        "a": os.path.basename(path_a), "b": os.path.basename(path_b),
        "tokens": summary["tokens"],
        "total_loss_diff": round(summary["total_diff"], 4),
    })


STAGE_FUNCS = {
    "prepare-data": cmd_prepare_data,
    "train-teacher": cmd_train_teacher,
    "train": cmd_train,
    "distill": cmd_distill,
    "prune": cmd_prune,
    "search-cache": cmd_search_cache,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "score": cmd_score,
    "analyze": cmd_analyze,
}


# ------------------------------------------------------------ arg parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="microlm",
        description="Train, compress, and cost-score a small windowed "
                    "transformer language model.")
    parser.add_argument("--version", action="version",
                        version=f"microlm {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.json",
                        help="pipeline config file (JSON)")
    common.add_argument("--set", action="append", default=[],
                        dest="overrides", metavar="SECTION.KEY=VALUE",
                        help="override one config value")
    common.add_argument("--runs", default=None,
                        help=f"artifact root (default ${ENV_RUNS} or ./runs)")
    common.add_argument("--force", action="store_true",
                        help="redo the stage even if its output exists")

    for name in STAGE_FUNCS:
        p = sub.add_parser(name, parents=[common])
        if name in ("eval", "score"):
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint file name inside the run dir")
        if name == "analyze":
            p.add_argument("--a", default=None,
                           help="trace A checkpoint (default: newest)")
            p.add_argument("--b", default=None,
                           help="trace B checkpoint (default: student.ckpt)")

    init = sub.add_parser("init-config",
                          help="write a starter config file")
    init.add_argument("--out", default="config.json")
    init.add_argument("--desk", action="store_true",
                      help="desk-scale preset instead of the full recipe")
    init.add_argument("--force", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "init-config":
            if os.path.exists(args.out) and not args.force:
                raise InputError(f"{args.out} exists (use --force)")
            cfg = (config_mod.desk_config() if args.desk
                   else config_mod.PipelineConfig())
            cfg.save(args.out)
            print(f"wrote {args.out} (hash {cfg.hash()})")
            return 0
        cfg = config_mod.PipelineConfig.load(args.config)
        cfg.apply_overrides(args.overrides)
        rd = _run_dir(cfg, args)
        STAGE_FUNCS[args.cmd](cfg, rd, args)
        return 0
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (InputError, ContractError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
