"""Model structure: parameter accounting, causality, receptive field,
streaming equivalence, adaptive softmax correctness, Hebbian updates."""

import numpy as np
import pytest

import microlm.tensor as T
from microlm.errors import ConfigError, ContractError
from microlm.model import (ModelConfig, ModelState, StreamState, load_model,
                           save_model, sinusoid_encodings)

from conftest import make_tiny_state

FULL_KW = dict(vocab_size=267_735,
               bins=[[1, 3_500], [3_501, 25_000], [25_001, 267_735]],
               bin_dims=[256, 64, 4], d_model=256, n_layers=8, n_heads=8,
               d_head=24, d_ff=768, context=97, extended_context=1152)

# storage at full precision, counted once and frozen: embedding tables
# (3500*256 + 21500*64 + 242735*4), tail projections into d_model,
# cluster rows, 8 transformer layers, global attention biases, and the
# two scalar cache parameters
FULL_PARAM_COUNT = 8_389_438


def full_state():
    return ModelState(ModelConfig(**FULL_KW), rng=np.random.default_rng(0))


def test_full_scale_parameter_count_exact():
    assert full_state().num_params() == FULL_PARAM_COUNT


def test_full_scale_meets_reduction_targets():
    count = FULL_PARAM_COUNT
    assert abs(count - 8.3e6) / 8.3e6 <= 0.03
    assert 159e6 / count >= 17


def test_parameter_names_cover_every_component():
    state = make_tiny_state()
    names = set(state.params)
    for expect in ("embed.table0", "embed.table1", "embed.proj1",
                   "softmax.cluster", "attn.u", "attn.v",
                   "layer0.attn.wq", "layer0.attn.wr", "layer0.ffn.w1",
                   "layer1.ln2.gain", "cache.theta_raw", "cache.lambda_raw"):
        assert expect in names


def test_receptive_field_formula():
    cfg = ModelConfig(**FULL_KW)
    assert cfg.receptive_field == 8 * (97 - 1) + 1


def test_config_rejects_window_longer_than_extended_context():
    kw = dict(FULL_KW)
    kw["extended_context"] = 8 * (97 - 1)  # one short of the receptive field
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_rejects_mismatched_bins_and_dims():
    kw = dict(FULL_KW)
    kw["bin_dims"] = [256, 64]
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_bin_membership_total():
    cfg = ModelConfig(**FULL_KW)
    ids = np.array([1, 3500, 3501, 25000, 25001, 267735])
    np.testing.assert_array_equal(cfg.bin_of(ids), [0, 0, 1, 1, 2, 2])


def test_sinusoid_encodings_structure():
    enc = sinusoid_encodings(16, 8, np.float64)
    assert enc.shape == (16, 8)
    np.testing.assert_allclose(enc[0, 0::2], 0.0, atol=1e-12)  # sin(0)
    np.testing.assert_allclose(enc[0, 1::2], 1.0, atol=1e-12)  # cos(0)


# ------------------------------------------------------- causal structure

def hiddens_for(state, ids):
    h, _ = state.eval_chunk(np.asarray(ids, dtype=np.int64))
    return h


def test_causality_future_token_cannot_influence_past():
    state = make_tiny_state(dtype=np.float32)
    rng = np.random.default_rng(0)
    ids = rng.integers(1, 51, size=20)
    h0 = hiddens_for(state, ids)
    for s in (10, 15, 19):
        mod = ids.copy()
        mod[s] = (mod[s] % 50) + 1
        h1 = hiddens_for(state, mod)
        np.testing.assert_array_equal(h0[:s], h1[:s])


def test_receptive_field_edge_is_exact():
    # L layers of window C see exactly L(C-1)+1 positions
    state = make_tiny_state(dtype=np.float32)  # L=2, C=5 -> field 9
    field = state.config.receptive_field
    assert field == 9
    rng = np.random.default_rng(1)
    ids = rng.integers(1, 51, size=24)
    t = 20
    h0 = hiddens_for(state, ids)

    inside = ids.copy()
    inside[t - (field - 1)] = (inside[t - (field - 1)] % 50) + 1
    assert np.any(hiddens_for(state, inside)[t] != h0[t])

    outside = ids.copy()
    outside[t - field] = (outside[t - field] % 50) + 1
    np.testing.assert_array_equal(hiddens_for(state, outside)[t], h0[t])


def test_chunked_eval_matches_single_chunk():
    state = make_tiny_state(dtype=np.float32)
    ids = np.random.default_rng(2).integers(1, 51, size=33)
    h_once = hiddens_for(state, ids)
    mems = None
    parts = []
    for start in range(0, len(ids), 7):
        h, mems = state.eval_chunk(ids[start:start + 7], mems)
        parts.append(h)
    h_chunked = np.concatenate(parts, axis=0)
    np.testing.assert_allclose(h_chunked, h_once, atol=1e-4)


def test_streaming_matches_batch_eval():
    state = make_tiny_state(dtype=np.float32)
    ids = np.random.default_rng(3).integers(1, 51, size=30)
    h_batch = hiddens_for(state, ids)
    stream = StreamState(state.config)
    h_stream = np.stack([state.infer_next(stream, int(t)) for t in ids])
    np.testing.assert_allclose(h_stream, h_batch, atol=1e-4)


def test_training_forward_matches_eval_forward():
    state = make_tiny_state()  # float64
    ids = np.random.default_rng(4).integers(1, 51, size=12)
    with T.Tape():
        h_train = state.forward_training(ids).data
    h_eval = hiddens_for(state, ids)
    np.testing.assert_allclose(h_train, h_eval, atol=1e-10)


# ------------------------------------------------------ adaptive softmax

def test_full_logprobs_are_normalized():
    state = make_tiny_state()
    ids = np.random.default_rng(5).integers(1, 51, size=8)
    h = hiddens_for(state, ids)
    lp = state.full_logprobs_np(h)
    assert lp.shape == (8, 50)
    np.testing.assert_allclose(np.logaddexp.reduce(lp, axis=1), 0.0,
                               atol=1e-10)


def test_target_logprob_matches_full_enumeration():
    state = make_tiny_state()
    rng = np.random.default_rng(6)
    ids = rng.integers(1, 51, size=10)
    targets = rng.integers(1, 51, size=10)
    h = hiddens_for(state, ids)
    lp_full = state.full_logprobs_np(h)
    lp_tgt = state.target_logprob_np(h, targets)
    np.testing.assert_allclose(
        lp_tgt, lp_full[np.arange(10), targets - 1], atol=1e-12)


def test_training_softmax_matches_numpy_path():
    state = make_tiny_state()
    rng = np.random.default_rng(7)
    ids = rng.integers(1, 51, size=9)
    targets = rng.integers(1, 51, size=9)
    h_eval = hiddens_for(state, ids)
    with T.Tape():
        h = state.forward_training(ids)
        lp_train = state.target_logprobs_train(h, targets).data
    np.testing.assert_allclose(lp_train,
                               state.target_logprob_np(h_eval, targets),
                               atol=1e-10)


def test_next_distribution_matches_full_logprobs():
    state = make_tiny_state()
    ids = np.random.default_rng(8).integers(1, 51, size=6)
    h = hiddens_for(state, ids)
    dist = state.next_distribution(h[-1])
    np.testing.assert_allclose(dist.sum(), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.log(dist), state.full_logprobs_np(h[-1:]).ravel(),
                               atol=1e-10)


def test_embed_rejects_out_of_range_ids():
    state = make_tiny_state()
    with T.Tape():
        with pytest.raises(ContractError):
            state.embed_train(np.array([0]))
        with pytest.raises(ContractError):
            state.embed_train(np.array([51]))


# -------------------------------------------------------------- hebbian

def test_hebbian_update_is_exact_convex_combination():
    state = make_tiny_state()
    cfg = state.config
    gamma_min = 0.05
    tok = 30  # lives in bin 1 (dims 4) behind a projection
    b = int(cfg.bin_of([tok])[0])
    assert b == 1
    lo, _ = cfg.bins[b]
    old = state.params["embed.table1"].data[tok - lo].copy()
    h_row = np.random.default_rng(9).standard_normal(cfg.d_model)
    state.counters[tok - 1] = 2  # becomes 3 inside the update
    state.hebbian_update(h_row[None, :], np.array([tok]),
                         gamma_min=gamma_min, limit=500)
    g = max(1.0 / 3.0, gamma_min)
    hbar = h_row @ state.params["embed.proj1"].data.T
    expect = (1 - g) * old + g * hbar
    np.testing.assert_array_equal(
        state.params["embed.table1"].data[tok - lo],
        expect.astype(state.dtype))
    assert state.counters[tok - 1] == 3


def test_hebbian_gamma_floor():
    state = make_tiny_state()
    assert state.hebbian_gamma(2, 0.01) == 0.5
    assert state.hebbian_gamma(1000, 0.01) == 0.01


def test_hebbian_respects_limit():
    state = make_tiny_state()
    tok = 5
    state.counters[tok - 1] = 7
    before = state.params["embed.table0"].data[tok - 1].copy()
    state.hebbian_update(np.ones((1, state.config.d_model)), np.array([tok]),
                         gamma_min=0.01, limit=7)  # count becomes 8 > limit
    np.testing.assert_array_equal(
        state.params["embed.table0"].data[tok - 1], before)
    assert state.counters[tok - 1] == 8  # still counted


# ------------------------------------------------------- cache parameters

def test_cache_params_raw_values_round_trip():
    state = make_tiny_state()
    state.set_cache_params(0.25, 0.4)
    assert abs(state.cache_theta() - 0.25) < 1e-12
    assert abs(state.cache_lambda() - 0.4) < 1e-12


def test_cache_params_rejected_when_frozen():
    state = make_tiny_state()
    state.cache_frozen = True
    with pytest.raises(ContractError):
        state.set_cache_params(0.5, 0.2)


def test_cache_params_require_positive_theta():
    state = make_tiny_state()
    with pytest.raises(ContractError):
        state.set_cache_params(0.0, 0.2)


# ----------------------------------------------------------- persistence

def test_model_save_load_round_trip(tmp_path):
    state = make_tiny_state(dtype=np.float32)
    state.masks["layer0.ffn.w1"] = (
        np.random.default_rng(0).random(state.params["layer0.ffn.w1"].data.shape)
        > 0.3)
    state.params["layer0.ffn.w1"].data[~state.masks["layer0.ffn.w1"]] = 0
    state.counters[:5] = [3, 1, 4, 1, 5]
    state.stages = ["train"]
    path = tmp_path / "model.ckpt"
    save_model(state, str(path))
    loaded = load_model(str(path))
    assert loaded.config.to_dict() == state.config.to_dict()
    assert loaded.stages == ["train"]
    for name, p in state.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data,
                                      err_msg=name)
        assert loaded.params[name].data.shape == p.data.shape
    np.testing.assert_array_equal(loaded.counters, state.counters)
    np.testing.assert_array_equal(loaded.masks["layer0.ffn.w1"],
                                  state.masks["layer0.ffn.w1"])
