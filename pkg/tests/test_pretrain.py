import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcmodel import model as nn
from rcmodel.chansim import SimConfig, generate_channel
from rcmodel.pretrain import (Adam, PretrainConfig, TrainingExample, build_example, evaluate, loss, lr_schedule,
                              make_mlm_example, make_nfp_pair, negative_frame, pretrain, write_metrics_log)
from rcmodel.tokenizer import CLS, MASK, NUM_SPECIALS, SEP, assemble_sequence, build_vocabulary


@pytest.fixture(scope="module")
def data():
    grids = [generate_channel(SimConfig(num_subcarriers=4, num_frames=40, user_speed=3.0, seed=s)) for s in range(2)]
    return grids, build_vocabulary(grids, 64)


def _sample():
    g = generate_channel(SimConfig(num_subcarriers=8, num_frames=2))
    v = build_vocabulary([g], 40)
    return assemble_sequence(g, (0, 1), v), v


SEQ_VOCAB = _sample()


def small_model(vocab):
    return nn.ModelConfig(num_layers=1, hidden_size=16, num_heads=2, ffn_size=32, vocab_size=vocab.size,
                          max_freq_features=4, max_seq_len=21)


# -- schedule --------------------------------------------------------------------

def test_lr_schedule_endpoints():
    cfg = PretrainConfig(warmup_steps=10, total_steps=100)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(10, cfg) == 5e-5
    assert lr_schedule(100, cfg) == 0.0
    assert lr_schedule(5, cfg) == pytest.approx(2.5e-5)
    assert lr_schedule(55, cfg) == pytest.approx(2.5e-5)


def test_lr_schedule_out_of_range():
    cfg = PretrainConfig(warmup_steps=0, total_steps=10)
    with pytest.raises(ValueError):
        lr_schedule(11, cfg)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(mask_split=(0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        PretrainConfig(warmup_steps=20, total_steps=10)
    with pytest.raises(ValueError):
        PretrainConfig(mask_rate=0.0)


# -- masking ---------------------------------------------------------------------

def long_sequence():
    grid = generate_channel(SimConfig(num_subcarriers=200, num_frames=2))
    vocab = build_vocabulary([grid], 512)
    return assemble_sequence(grid, (0, 1), vocab), vocab


def test_full_mask_boundary():
    seq, vocab = long_sequence()
    cfg = PretrainConfig(mask_rate=1.0, mask_split=(1.0, 0.0, 0.0))
    ex = make_mlm_example(seq, np.random.default_rng(0), cfg, vocab.size)
    assert np.all(ex.input.token_ids[seq.channel_positions] == MASK)
    assert np.array_equal(ex.input.token_ids[seq.is_special], seq.token_ids[seq.is_special])
    assert np.array_equal(ex.mlm_labels, seq.token_ids[seq.channel_positions])


def test_mask_count_expectation():
    seq, vocab = long_sequence()
    cfg = PretrainConfig()
    counts = [make_mlm_example(seq, np.random.default_rng(i), cfg, vocab.size).mlm_positions.size
              for i in range(400)]
    # binomial(800, 0.15): mean 120, sd ~10.1, sd of the mean over 400 draws ~0.5
    assert abs(np.mean(counts) - 0.15 * 800) < 2.0


def test_mask_split_frequencies():
    seq, vocab = long_sequence()
    cfg = PretrainConfig(mask_rate=1.0)
    n_mask = n_keep = n_total = 0
    for i in range(50):
        ex = make_mlm_example(seq, np.random.default_rng(i), cfg, vocab.size)
        tok = ex.input.token_ids[ex.mlm_positions]
        n_mask += np.sum(tok == MASK)
        n_keep += np.sum(tok == ex.mlm_labels)
        n_total += tok.size
    assert abs(n_mask / n_total - 0.8) < 0.01
    # kept tokens plus random replacements that happen to hit the original
    assert abs(n_keep / n_total - (0.1 + 0.1 / (vocab.size - NUM_SPECIALS))) < 0.01


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_masking_never_touches_specials(seed):
    seq, vocab = SEQ_VOCAB
    ex = make_mlm_example(seq, np.random.default_rng(seed), PretrainConfig(mask_rate=0.5), vocab.size)
    assert np.array_equal(ex.input.token_ids[seq.is_special], seq.token_ids[seq.is_special])
    assert np.all(seq.freq_ids[ex.mlm_positions] > 0)
    changed = np.flatnonzero(ex.input.token_ids != seq.token_ids)
    assert set(changed) <= set(ex.mlm_positions)
    assert np.all(ex.input.token_ids[changed] != CLS) and np.all(ex.input.token_ids[changed] != SEP)


def test_masking_deterministic():
    seq, vocab = SEQ_VOCAB
    a = make_mlm_example(seq, np.random.default_rng(5), PretrainConfig(), vocab.size)
    b = make_mlm_example(seq, np.random.default_rng(5), PretrainConfig(), vocab.size)
    assert np.array_equal(a.input.token_ids, b.input.token_ids)
    assert np.array_equal(a.mlm_positions, b.mlm_positions)


# -- next-frame pairs ------------------------------------------------------------

def test_no_negatives_when_rate_zero(data):
    grids, vocab = data
    cfg = PretrainConfig(nfp_negative_rate=0.0)
    labels = [make_nfp_pair(grids[0], t, np.random.default_rng(t), cfg, vocab)[1] for t in range(39)]
    assert all(l == 1 for l in labels)


def test_negative_rate_monte_carlo():
    rng = np.random.default_rng(0)
    cfg = PretrainConfig()
    grid = generate_channel(SimConfig(num_subcarriers=2, num_frames=30))
    vocab = build_vocabulary([grid], 16)
    tokens = vocab.encode_array(grid.values)
    labels = [make_nfp_pair(grid, 5, rng, cfg, vocab, tokens)[1] for _ in range(10_000)]
    assert abs(1.0 - np.mean(labels) - 0.5) <= 0.02


@given(st.integers(0, 38), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_negative_respects_gap(t0, seed):
    t = negative_frame(40, t0, np.random.default_rng(seed), 10)
    assert abs(t - t0) >= 10 and 0 <= t < 40


def test_negative_uses_distant_frame(data):
    grids, vocab = data
    cfg = PretrainConfig(nfp_negative_rate=1.0)
    seq, label = make_nfp_pair(grids[0], 2, np.random.default_rng(0), cfg, vocab)
    true_next = assemble_sequence(grids[0], (2, 3), vocab)
    assert label == 0
    half = seq.second_frame_positions()
    assert not np.array_equal(seq.token_ids[half], true_next.token_ids[half])


def test_grid_too_short_for_negative():
    with pytest.raises(ValueError):
        negative_frame(5, 2, np.random.default_rng(0), 10)


# -- loss ------------------------------------------------------------------------

def test_uniform_logits_loss(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg)
    for k in ("mlm.w", "mlm.b", "nfp.w", "nfp.b"):
        params[k] = np.zeros_like(params[k])
    ex = [build_example(grids[0], t, np.random.default_rng(t), PretrainConfig(mask_rate=0.5), vocab)
          for t in range(4)]
    r = loss(ex, params, mcfg)
    assert r.mlm == pytest.approx(math.log(vocab.size), abs=1e-12)
    assert r.nfp == pytest.approx(math.log(2), abs=1e-12)
    assert r.total == pytest.approx(math.log(vocab.size) + math.log(2), abs=1e-12)


def test_confident_correct_predictions_give_zero_loss(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg)
    seq = assemble_sequence(grids[0], (0, 1), vocab)
    target = int(seq.token_ids[1])
    inp = seq.copy()
    inp.token_ids[1] = MASK
    ex = TrainingExample(inp, np.array([1]), np.array([target]), 1)
    params["mlm.w"] = np.zeros_like(params["mlm.w"])
    params["mlm.b"] = np.zeros(vocab.size)
    params["mlm.b"][target] = 1e3
    params["nfp.w"] = np.zeros_like(params["nfp.w"])
    params["nfp.b"] = np.array([-1e3, 1e3])
    r = loss([ex], params, mcfg)
    assert r.total == 0.0


def test_no_masked_positions_gives_nfp_only(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    seq = assemble_sequence(grids[0], (0, 1), vocab)
    ex = TrainingExample(seq, np.array([], dtype=int), np.array([], dtype=int), 1)
    r = loss([ex], nn.init_params(mcfg), mcfg)
    assert r.mlm == 0.0 and r.total == r.nfp
    assert np.all(r.grads["mlm.b"] == 0)


def test_empty_batch_rejected(data):
    _, vocab = data
    mcfg = small_model(vocab)
    with pytest.raises(ValueError):
        loss([], nn.init_params(mcfg), mcfg)


# -- optimiser -------------------------------------------------------------------

def test_adam_first_step_magnitude():
    params = {"a": np.array([1.0, -2.0]), "b": np.array([0.5])}
    opt = Adam(params)
    opt.step(params, {"a": np.array([0.3, -4.0]), "b": np.array([0.0])}, 0.1)
    # bias-corrected first step moves by lr * g / (|g| + eps')
    assert np.allclose(params["a"], [0.9, -1.9], atol=1e-6)
    assert params["b"][0] == 0.5


def test_adam_only_updates_tensors_with_gradient(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["nfp.b"] = np.array([1.0, -1.0])
    before = {k: v.copy() for k, v in params.items()}
    Adam(params).step(params, grads, 1e-3)
    changed = {k for k in params if not np.array_equal(params[k], before[k])}
    assert changed == {"nfp.b"}


# -- training loop ---------------------------------------------------------------

def test_zero_steps_returns_initial_parameters(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg, seed=3)
    res = pretrain(grids, vocab, mcfg, PretrainConfig(total_steps=0), params=params)
    assert res.step == 0 and res.log == []
    assert all(np.array_equal(params[k], res.params[k]) for k in params)


def test_overfit_fixed_batch(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg, seed=0)
    ex = [build_example(grids[0], t, np.random.default_rng(t), PretrainConfig(), vocab) for t in range(4)]
    opt = Adam(params)
    losses = []
    for _ in range(50):
        r = loss(ex, params, mcfg)
        losses.append(r.total)
        opt.step(params, r.grads, 3e-3)
    assert losses[-1] < losses[0]


def test_identical_seeds_identical_traces(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    pcfg = PretrainConfig(batch_size=4, learning_rate_peak=1e-3, total_steps=10, seed=11)
    a = pretrain(grids, vocab, mcfg, pcfg)
    b = pretrain(grids, vocab, mcfg, pcfg)
    assert a.log == b.log
    assert len(a.log) == 10
    c = pretrain(grids, vocab, mcfg, PretrainConfig(batch_size=4, learning_rate_peak=1e-3, total_steps=10, seed=12))
    assert c.log != a.log


def test_resume_matches_uninterrupted(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    pcfg = PretrainConfig(batch_size=4, learning_rate_peak=1e-3, total_steps=12, warmup_steps=3)
    full = pretrain(grids, vocab, mcfg, pcfg)
    stop = {}

    def grab(step, params, opt):
        if step == 5:
            stop["params"] = {k: v.copy() for k, v in params.items()}
            stop["opt"] = opt.state()

    pretrain(grids, vocab, mcfg, pcfg, on_step=grab)
    opt = Adam(stop["params"])
    opt.load_state({k: v.copy() for k, v in stop["opt"].items()})
    rest = pretrain(grids, vocab, mcfg, pcfg, params=stop["params"], start_step=5, optimizer=opt)
    assert rest.log == full.log[5:]
    assert all(np.array_equal(rest.params[k], full.params[k]) for k in full.params)


def test_epoch_metrics_and_log(data, tmp_path):
    grids, vocab = data
    mcfg = small_model(vocab)
    pcfg = PretrainConfig(batch_size=8, learning_rate_peak=1e-3, epochs=2, anchor_stride=2)
    res = pretrain(grids[:1], vocab, mcfg, pcfg, eval_grids=grids[1:])
    assert [m["epoch"] for m in res.epoch_metrics] == [1, 2]
    assert 0.0 <= res.epoch_metrics[-1]["nfp_accuracy"] <= 1.0
    write_metrics_log(res.log, tmp_path / "m.log")
    rows = (tmp_path / "m.log").read_text().splitlines()
    assert len(rows) == res.step
    assert rows[0].split("\t")[0] == "1" and len(rows[0].split("\t")) == 5


def test_divergence_reports_step(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg)
    params["nfp.b"] = np.array([np.inf, 0.0])
    with pytest.raises(nn.NumericError, match="step 1"), np.errstate(invalid="ignore"):
        pretrain(grids, vocab, mcfg, PretrainConfig(total_steps=3, batch_size=2), params=params)


def test_vocab_larger_than_model_rejected(data):
    grids, vocab = data
    mcfg = nn.ModelConfig(vocab_size=8, max_freq_features=4)
    with pytest.raises(ValueError):
        pretrain(grids, vocab, mcfg, PretrainConfig(total_steps=1))


def test_evaluate_uniform_model(data):
    grids, vocab = data
    mcfg = small_model(vocab)
    params = nn.init_params(mcfg)
    for k in ("mlm.w", "mlm.b", "nfp.w", "nfp.b"):
        params[k] = np.zeros_like(params[k])
    m = evaluate(grids, vocab, params, mcfg, PretrainConfig(), max_examples=20)
    assert m["mlm_loss"] == pytest.approx(math.log(vocab.size))
    assert m["nfp_loss"] == pytest.approx(math.log(2))
