"""Training loop pieces: schedules, Adam, clipping, the cache-mixed
hard loss, the soft-label loss, teacher label extraction/storage, and
the loop's freezing/masking/determinism contracts."""

import json
import math

import numpy as np
import pytest

import microlm.tensor as T
from microlm import cache as cache_mod
from microlm.errors import ConfigError, InputError
from microlm.train import (Adam, TeacherLabels, TrainSettings,
                           clip_gradients, extract_teacher_labels,
                           grad_global_norm, hard_loss, lambda_soft,
                           lr_schedule, total_loss, train, validate,
                           window_loss)

from conftest import make_tiny_state

V = 50  # tiny vocab from make_tiny_state


# ------------------------------------------------------------- schedules

def test_lr_schedule_warmup_and_cosine_endpoints():
    base, warmup, total = 2.0, 10, 110
    assert lr_schedule(0, base, warmup, total) == 0.0
    assert lr_schedule(5, base, warmup, total) == pytest.approx(1.0)
    assert lr_schedule(10, base, warmup, total) == pytest.approx(base)
    # halfway through the cosine leg: base/2
    assert lr_schedule(60, base, warmup, total) == pytest.approx(1.0)
    assert lr_schedule(110, base, warmup, total) == pytest.approx(0.0, abs=1e-15)


def test_lr_schedule_degenerate_shapes():
    # no warmup: starts at full rate
    assert lr_schedule(0, 3.0, 0, 100) == pytest.approx(3.0)
    # total inside warmup: flat at base once past the ramp
    assert lr_schedule(10, 3.0, 10, 10) == pytest.approx(3.0)
    assert lr_schedule(5, 3.0, 10, 10) == pytest.approx(1.5)


def test_lambda_soft_affine_anneal_and_clamps():
    assert lambda_soft(0, 0.5, 0.05, 100) == pytest.approx(0.5)
    assert lambda_soft(100, 0.5, 0.05, 100) == pytest.approx(0.05)
    assert lambda_soft(50, 0.5, 0.05, 100) == pytest.approx(0.275)
    assert lambda_soft(-7, 0.5, 0.05, 100) == pytest.approx(0.5)
    assert lambda_soft(900, 0.5, 0.05, 100) == pytest.approx(0.05)


def test_train_settings_validation():
    with pytest.raises(ConfigError):
        TrainSettings(steps=0)
    with pytest.raises(ConfigError):
        TrainSettings(steps=1, lam_max=0.1, lam_min=0.2)
    with pytest.raises(ConfigError):
        TrainSettings(steps=1, batch_size=0)


# ------------------------------------------------------------- optimizer

def test_adam_skips_parameters_without_gradients():
    p = T.parameter(np.array([1.0, 2.0]))
    opt = Adam({"p": p})
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_matches_bias_corrected_formula():
    data = np.array([0.5, -1.5, 2.0])
    g = np.array([1e-3, -2.0, 0.7])
    p = T.parameter(data.copy())
    p.grad = g.copy()
    opt = Adam({"p": p})
    opt.step(0.01)
    # fresh moments: m-hat = g, v-hat = g^2 -> update = lr * g/(|g|+eps)
    expected = data - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_grad_global_norm_and_clipping():
    a = T.parameter(np.zeros(1))
    b = T.parameter(np.zeros(1))
    c = T.parameter(np.zeros(1))  # no gradient: ignored
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    params = {"a": a, "b": b, "c": c}
    assert grad_global_norm(params) == pytest.approx(5.0)
    returned = clip_gradients(params, 0.25)
    assert returned == pytest.approx(5.0)  # reports the pre-clip norm
    np.testing.assert_allclose(a.grad, [0.15])
    np.testing.assert_allclose(b.grad, [0.20])
    assert grad_global_norm(params) == pytest.approx(0.25)
    # already inside the bound: untouched
    clip_gradients(params, 10.0)
    np.testing.assert_allclose(a.grad, [0.15])


# ------------------------------------------------------------ loss pieces

def test_total_loss_convex_combination():
    hard = T.Tensor(np.asarray(2.0))
    soft = T.Tensor(np.asarray(4.0))
    assert total_loss(hard, soft, 0.25).data == pytest.approx(2.5)
    assert total_loss(hard, None, 0.7) is hard
    assert total_loss(hard, soft, 0.0) is hard


def test_hard_loss_without_cache_is_mean_target_nll():
    state = make_tiny_state()
    ids = np.random.default_rng(5).integers(1, V + 1, size=13)
    inputs, targets = ids[:-1], ids[1:]
    with T.Tape():
        h = state.forward_training(inputs)
        loss = hard_loss(state, h, targets, None, cache_cap=0)
        expected = -state.target_logprob_np(h.data, targets).mean()
    assert abs(float(loss.data) - expected) < 1e-10


def test_hard_loss_cache_mixture_matches_hand_computation():
    state = make_tiny_state()
    cap = 3
    ids = np.random.default_rng(6).integers(1, 9, size=12)  # dense repeats
    inputs, targets = ids[:-1], ids[1:]
    with T.Tape():
        h = state.forward_training(inputs)
        loss = hard_loss(state, h, targets, None, cache_cap=cap)
        hv = h.data.copy()
    theta = math.exp(float(state.params["cache.theta_raw"].data))
    lam = 1.0 / (1.0 + math.exp(-float(state.params["cache.lambda_raw"].data)))
    p_model = np.exp(state.target_logprob_np(hv, targets))
    n = len(targets)
    mixed = np.empty(n)
    mixed[0] = p_model[0]  # empty cache: model keeps full mass
    for t in range(1, n):
        lo = max(0, t - cap)
        z = np.array([theta * float(hv[s] @ hv[t]) for s in range(lo, t)])
        e = np.exp(z - z.max())
        pc = e[[targets[s] == targets[t]
                for s in range(lo, t)]].sum() / e.sum()
        mixed[t] = (1.0 - lam) * p_model[t] + lam * pc
    expected = -np.log(mixed).mean()
    assert abs(float(loss.data) - expected) < 1e-10


def test_soft_label_loss_matches_full_distribution_enumeration():
    state = make_tiny_state()
    rng = np.random.default_rng(7)
    ids = rng.integers(1, V + 1, size=9)
    inputs = ids[:-1]
    K = 4
    label_ids = rng.integers(1, V + 1, size=(len(inputs), K))
    label_probs = rng.uniform(0.01, 0.5, size=(len(inputs), K))
    with T.Tape():
        h = state.forward_training(inputs)
        loss = state.soft_label_loss_train(h, label_ids,
                                           label_probs.astype(np.float64))
        flp = state.full_logprobs_np(h.data)
    picked = np.take_along_axis(flp, label_ids - 1, axis=1)
    expected = -(label_probs * picked).sum(axis=1).mean()
    assert abs(float(loss.data) - expected) < 1e-10


def test_window_loss_ignores_teacher_slice_at_lambda_zero():
    state = make_tiny_state()
    ids = np.random.default_rng(8).integers(1, V + 1, size=10)
    tslice = (np.ones((9, 2), dtype=np.int64),
              np.full((9, 2), 0.1, dtype=np.float64))
    with T.Tape():
        loss_plain, _, targets = window_loss(state, ids, cache_cap=0)
    with T.Tape():
        loss_soft0, _, _ = window_loss(state, ids, cache_cap=0,
                                       teacher_slice=tslice, lam=0.0)
    np.testing.assert_array_equal(targets, ids[1:])
    assert float(loss_plain.data) == float(loss_soft0.data)


# --------------------------------------------------------- teacher labels

def test_extract_teacher_labels_matches_enumeration():
    state = make_tiny_state(seed=9)
    ids = np.random.default_rng(10).integers(1, V + 1, size=26)
    k = 5
    labels = extract_teacher_labels(state, ids, top_k=k)
    assert len(labels) == len(ids) - 1
    assert labels.ids.shape == (25, k) and labels.probs.shape == (25, k)
    hid = cache_mod.collect_hiddens(state, ids[:-1])
    probs_full = np.exp(state.full_logprobs_np(hid))
    for t in (0, 7, 24):
        order = np.argsort(-probs_full[t], kind="stable")[:k]
        assert set(labels.ids[t]) == set(order + 1)
        np.testing.assert_allclose(
            np.sort(labels.probs[t])[::-1],
            np.sort(probs_full[t][order].astype(np.float32))[::-1],
            rtol=2e-6)
        assert (np.diff(labels.probs[t]) <= 0).all()  # sorted descending


def test_extract_teacher_labels_rejects_foreign_ids():
    state = make_tiny_state()
    with pytest.raises(InputError):
        extract_teacher_labels(state, np.array([1, 0, 3]), top_k=3)
    with pytest.raises(InputError):
        extract_teacher_labels(state, np.array([1, V + 1, 3]), top_k=3)


def test_teacher_labels_window_slicing_and_bounds():
    ids = np.arange(1, 13, dtype=np.uint32).reshape(6, 2)
    probs = np.linspace(0.9, 0.1, 12, dtype=np.float32).reshape(6, 2)
    labels = TeacherLabels(ids, probs, top_k=2)
    w_ids, w_probs = labels.window(pos_start=2, n=3)
    np.testing.assert_array_equal(w_ids, ids[1:4].astype(np.int64))
    np.testing.assert_array_equal(w_probs, probs[1:4])
    with pytest.raises(InputError):
        labels.window(0, 1)  # position 0 has no prediction
    with pytest.raises(InputError):
        labels.window(5, 3)  # runs past the end


def test_teacher_labels_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(11)
    labels = TeacherLabels(
        rng.integers(1, V + 1, size=(7, 3)).astype(np.uint32),
        rng.uniform(0, 1, size=(7, 3)).astype(np.float32), top_k=3)
    path = tmp_path / "labels.json"
    labels.save(path)
    back = TeacherLabels.load(path)
    assert back.top_k == 3
    np.testing.assert_array_equal(back.ids, labels.ids)
    np.testing.assert_array_equal(back.probs, labels.probs)

    meta = json.loads(path.read_text())
    meta["format"] = "something-else"
    path.write_text(json.dumps(meta))
    with pytest.raises(InputError):
        TeacherLabels.load(path)

    meta["format"] = "microlm-teacher-labels-v1"
    path.write_text(json.dumps(meta))
    raw = (tmp_path / "labels.json.bin").read_bytes()
    (tmp_path / "labels.json.bin").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(InputError):
        TeacherLabels.load(path)


# -------------------------------------------------------------- main loop

def _tiny_streams(seed=12, n_train=2500, n_val=300):
    rng = np.random.default_rng(seed)
    return (rng.integers(1, V + 1, size=n_train),
            rng.integers(1, V + 1, size=n_val))


def _settings(**kw):
    base = dict(steps=4, batch_size=2, lr=1e-3, warmup=1, clip_norm=0.25,
                seed=0, cache_cap=4, hebbian=True, hebbian_gamma_min=0.01,
                hebbian_limit=5, eval_every=2, eval_tokens=120)
    base.update(kw)
    return TrainSettings(**base)


def test_validate_matches_cache_mixed_stream_eval():
    state = make_tiny_state(dtype=np.float32)
    _, val = _tiny_streams()
    s = _settings()
    ppl = validate(state, val, s, max_tokens=80)
    cp = cache_mod.CacheParams(s.cache_cap, state.cache_theta(),
                               state.cache_lambda())
    nll = cache_mod.evaluate_stream(state, val[:80].astype(np.int64), cp)
    assert ppl == pytest.approx(float(np.exp(nll.mean())), rel=1e-7)


def test_train_freezes_named_params_and_reapplies_masks(tmp_path):
    state = make_tiny_state(dtype=np.float32)
    train_ids, val_ids = _tiny_streams()
    mask = np.ones_like(state.params["layer0.ffn.w1"].data, dtype=bool)
    mask[::3] = False
    state.masks["layer0.ffn.w1"] = mask
    theta_before = state.params["cache.theta_raw"].data.copy()
    lam_before = state.params["cache.lambda_raw"].data.copy()
    wq_before = state.params["layer0.attn.wq"].data.copy()
    metrics = tmp_path / "log.jsonl"
    summary = train(state, train_ids, val_ids, _settings(),
                    metrics_path=str(metrics),
                    frozen=("cache.theta_raw", "cache.lambda_raw"))
    np.testing.assert_array_equal(state.params["cache.theta_raw"].data,
                                  theta_before)
    np.testing.assert_array_equal(state.params["cache.lambda_raw"].data,
                                  lam_before)
    assert not np.array_equal(state.params["layer0.attn.wq"].data, wq_before)
    assert (state.params["layer0.ffn.w1"].data[~mask] == 0).all()
    assert summary["steps"] == 4
    assert summary["skipped_steps"] == 0
    assert math.isfinite(summary["final_val_ppl"])
    assert summary["best_val_ppl"] <= summary["final_val_ppl"]
    lines = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert lines and all("val_ppl" in r for r in lines)


def test_train_hooks_fire_on_schedule():
    state = make_tiny_state(dtype=np.float32)
    train_ids, val_ids = _tiny_streams()
    seen_steps, checkpoints = [], []
    train(state, train_ids, val_ids, _settings(),
          step_hook=lambda st, t: seen_steps.append(t),
          checkpoint_fn=lambda st, t: checkpoints.append(t))
    assert seen_steps == [0, 1, 2, 3]
    assert checkpoints == [1, 3]  # every eval_every=2 steps and the last


def test_train_with_teacher_labels_runs_and_anneals():
    state = make_tiny_state(dtype=np.float32)
    train_ids, val_ids = _tiny_streams()
    n = len(train_ids) - 1
    labels = TeacherLabels(
        np.tile(np.array([1, 2, 3], dtype=np.uint32), (n, 1)),
        np.tile(np.array([0.3, 0.2, 0.1], dtype=np.float32), (n, 1)),
        top_k=3)
    summary = train(state, train_ids, val_ids,
                    _settings(lam_max=0.5, lam_min=0.1),
                    teacher_labels=labels)
    assert math.isfinite(summary["final_val_ppl"])


def test_train_is_deterministic_across_reruns():
    results = []
    for _ in range(2):
        state = make_tiny_state(dtype=np.float32, seed=3)
        train_ids, val_ids = _tiny_streams()
        train(state, train_ids, val_ids, _settings(steps=3))
        results.append({k: p.data.copy() for k, p in state.params.items()})
    assert sorted(results[0]) == sorted(results[1])
    for k in results[0]:
        np.testing.assert_array_equal(results[0][k], results[1][k])
