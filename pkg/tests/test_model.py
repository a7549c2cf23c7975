import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcmodel import model as nn
from rcmodel.gradcheck import check_gradients, tiny_config, tiny_problem
from rcmodel.pretrain import collate, loss
from rcmodel.tokenizer import CLS, SEP, sequence_layout


def random_batch(cfg, rng, batch=2, ns=2):
    f, t, a = sequence_layout(ns)
    n = len(f)
    tok = rng.integers(5, cfg.vocab_size, size=(batch, n))
    tok[:, f == 0] = SEP
    tok[:, 0] = CLS
    tile = lambda v: np.tile(v, (batch, 1))
    return {"token_ids": tok, "freq_ids": tile(f), "time_ids": tile(t), "antenna_ids": tile(a)}


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, nn.init_params(cfg, seed=1, std=0.5)


def test_param_shapes_follow_config():
    cfg = tiny_config()
    shapes = nn.param_shapes(cfg)
    assert shapes["emb.token"] == (32, 16)
    assert shapes["emb.freq"] == (3, 16)
    assert shapes["mlm.w"] == (16, 32)
    assert shapes["nfp.w"] == (16, 2)
    assert sum(k.startswith("layer1.") for k in shapes) == sum(k.startswith("layer0.") for k in shapes)


def test_config_validation():
    with pytest.raises(ValueError):
        nn.ModelConfig(hidden_size=10, num_heads=4)
    with pytest.raises(ValueError):
        nn.ModelConfig(num_layers=0)
    with pytest.raises(ValueError):
        nn.ModelConfig(dropout_rate=1.0)


def test_config_text_roundtrip():
    cfg = nn.ModelConfig.bert_base()
    assert nn.ModelConfig.from_text(cfg.to_text()) == cfg
    assert (cfg.num_layers, cfg.hidden_size, cfg.num_heads) == (12, 768, 12)


# -- embedding -------------------------------------------------------------------

def test_zero_tables_give_layernorm_of_zero(tiny):
    cfg, params = tiny
    for k in ("emb.token", "emb.freq", "emb.time", "emb.antenna"):
        params[k] = np.zeros_like(params[k])
    params["emb.ln.beta"] = np.linspace(-1, 1, cfg.hidden_size)
    states, _ = nn.embed(random_batch(cfg, np.random.default_rng(0)), params, cfg)
    # LN(0) = 0 * gamma + beta
    assert np.allclose(states, params["emb.ln.beta"], atol=0)


def test_identical_ids_identical_rows(tiny):
    cfg, params = tiny
    b = random_batch(cfg, np.random.default_rng(0), batch=1)
    b["token_ids"][0, 2] = b["token_ids"][0, 1]
    b["freq_ids"][0, 2] = b["freq_ids"][0, 1]
    states, _ = nn.embed(b, params, cfg)
    assert np.array_equal(states[0, 1], states[0, 2])


def test_freq_row_perturbation_is_local(tiny):
    cfg, params = tiny
    b = random_batch(cfg, np.random.default_rng(0))
    before, _ = nn.embed(b, params, cfg)
    params["emb.freq"][2] += 0.7
    after, _ = nn.embed(b, params, cfg)
    changed = np.any(before != after, axis=-1)
    assert np.array_equal(changed, b["freq_ids"] == 2)


def test_embed_rejects_out_of_bounds(tiny):
    cfg, params = tiny
    b = random_batch(cfg, np.random.default_rng(0))
    b["antenna_ids"][0, 1] = cfg.max_antenna_features + 1
    with pytest.raises(IndexError):
        nn.embed(b, params, cfg)


# -- encoder ---------------------------------------------------------------------

def test_single_position_attention_is_one(tiny):
    cfg, params = tiny
    b = {"token_ids": np.array([[CLS]]), "freq_ids": np.zeros((1, 1)), "time_ids": np.zeros((1, 1)),
         "antenna_ids": np.zeros((1, 1))}
    trace = nn.forward(b, params, cfg)
    assert trace.attention_array().shape == (1, 2, 2, 1, 1)
    assert np.all(trace.attention_array() == 1.0)


@given(st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_attention_rows_sum_to_one(seed):
    cfg = tiny_config()
    params = nn.init_params(cfg, seed=seed, std=1.0)
    trace = nn.forward(random_batch(cfg, np.random.default_rng(seed)), params, cfg)
    A = trace.attention_array()
    assert A.shape == (2, cfg.num_layers, cfg.num_heads, 13, 13)
    assert np.max(np.abs(A.sum(-1) - 1.0)) <= 1e-6
    assert np.all(A >= 0)


def test_zero_sublayers_pass_states_through(tiny):
    cfg, params = tiny
    for name in params:
        if name.startswith("layer") and (".w" in name or name.endswith(".b")):
            params[name] = np.zeros_like(params[name])
        if name.startswith("layer") and name.endswith(".gamma"):
            params[name] = np.ones_like(params[name])
        if name.startswith("layer") and name.endswith(".beta"):
            params[name] = np.zeros_like(params[name])
    b = random_batch(cfg, np.random.default_rng(3))
    states, _ = nn.embed(b, params, cfg)
    trace = nn.encode(states, params, cfg)
    # each sublayer adds zero and re-normalises an already unit-variance row
    assert np.allclose(trace.final, states, rtol=0, atol=1e-9)


def test_permutation_consistency(tiny):
    cfg, params = tiny
    b = random_batch(cfg, np.random.default_rng(4), batch=1)
    perm = np.arange(13)
    perm[[2, 8]] = perm[[8, 2]]
    pb = {k: v[:, perm] for k, v in b.items()}
    out = nn.forward(b, params, cfg).final
    pout = nn.forward(pb, params, cfg).final
    assert np.allclose(pout, out[:, perm], rtol=0, atol=1e-12)


def test_non_finite_states_rejected(tiny):
    cfg, params = tiny
    states = np.zeros((1, 3, cfg.hidden_size))
    states[0, 1, 0] = np.nan
    with pytest.raises(nn.NumericError):
        nn.encode(states, params, cfg)


def test_overflowing_scores_name_layer(tiny):
    cfg, params = tiny
    params["layer0.attn.q.w"] = np.full_like(params["layer0.attn.q.w"], 1e200)
    params["layer0.attn.k.w"] = np.full_like(params["layer0.attn.k.w"], 1e200)
    with np.errstate(over="ignore"), pytest.raises(nn.NumericError, match="layer 0"):
        nn.forward(random_batch(cfg, np.random.default_rng(0)), params, cfg)


# -- heads -----------------------------------------------------------------------

def test_mlm_head_zero_weights(tiny):
    cfg, params = tiny
    params["mlm.w"] = np.zeros_like(params["mlm.w"])
    params["mlm.b"] = np.arange(cfg.vocab_size, dtype=float)
    trace = nn.forward(random_batch(cfg, np.random.default_rng(0)), params, cfg)
    logits = nn.mlm_logits(trace, params, (np.array([0, 1, 1]), np.array([1, 2, 5])))
    assert logits.shape == (3, cfg.vocab_size)
    assert np.all(logits == params["mlm.b"])
    assert np.allclose(nn.softmax(logits).sum(1), 1.0, atol=1e-6)


def test_nfp_head_zero_weights(tiny):
    cfg, params = tiny
    params["nfp.w"] = np.zeros_like(params["nfp.w"])
    params["nfp.b"] = np.array([0.3, -0.3])
    trace = nn.forward(random_batch(cfg, np.random.default_rng(0)), params, cfg)
    assert np.all(nn.nfp_logits(trace, params) == [0.3, -0.3])


def test_nfp_requires_cls(tiny):
    cfg, params = tiny
    b = random_batch(cfg, np.random.default_rng(0))
    b["token_ids"][1, 0] = SEP
    with pytest.raises(ValueError):
        nn.nfp_logits(nn.forward(b, params, cfg), params)


def test_forward_deterministic_and_pure(tiny):
    cfg, params = tiny
    before = {k: v.copy() for k, v in params.items()}
    b = random_batch(cfg, np.random.default_rng(0))
    l1 = nn.nfp_logits(nn.forward(b, params, cfg), params)
    l2 = nn.nfp_logits(nn.forward(b, params, cfg), params)
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(before[k], params[k]) for k in params)


def test_tied_weights_share_token_table():
    cfg = tiny_config(tie_mlm_weights=1)
    params = nn.init_params(cfg, seed=0)
    assert "mlm.w" not in params
    trace = nn.forward(random_batch(cfg, np.random.default_rng(0)), params, cfg)
    pos = (np.array([0]), np.array([1]))
    expected = trace.final[0, 1] @ params["emb.token"].T + params["mlm.b"]
    assert np.allclose(nn.mlm_logits(trace, params, pos)[0], expected)


# -- gradients ---------------------------------------------------------------------

def test_zero_upstream_gradient(tiny):
    cfg, params = tiny
    trace = nn.forward(random_batch(cfg, np.random.default_rng(0)), params, cfg)
    grads = nn.backward(trace, params, d_nfp=np.zeros((2, 2)))
    assert set(grads) == set(params)
    assert all(np.all(g == 0) for g in grads.values())


def test_unused_embedding_rows_have_zero_gradient():
    cfg = tiny_config()
    params, examples = tiny_problem(cfg)
    grads = loss(examples, params, cfg).grads
    batch, pos, labels, _ = collate(examples)
    used = np.unique(batch["token_ids"])
    unused = np.setdiff1d(np.arange(cfg.vocab_size), used)
    assert unused.size > 0
    assert np.all(grads["emb.token"][unused] == 0)


@pytest.mark.parametrize("tie", [0, 1])
def test_gradients_match_finite_differences(tie):
    cfg = tiny_config(tie_mlm_weights=tie)
    params, examples = tiny_problem(cfg, seed=tie)
    report = check_gradients(cfg, params, examples)
    assert report.checked == sum(p.size for p in params.values())
    assert report.max_error <= 1e-4, report.worst()


def test_key_bias_gradient_is_zero():
    # softmax over keys is invariant to a shift shared by all keys
    cfg = tiny_config()
    params, examples = tiny_problem(cfg)
    grads = loss(examples, params, cfg).grads
    for i in range(cfg.num_layers):
        assert np.max(np.abs(grads[f"layer{i}.attn.k.b"])) < 1e-12


def test_dropout_only_with_rng():
    cfg = tiny_config(dropout_rate=0.5)
    params = nn.init_params(cfg, seed=0, std=0.5)
    b = random_batch(cfg, np.random.default_rng(0))
    eval_a = nn.forward(b, params, cfg).final
    eval_b = nn.forward(b, params, cfg).final
    train = nn.forward(b, params, cfg, rng=np.random.default_rng(0)).final
    assert np.array_equal(eval_a, eval_b)
    assert not np.allclose(eval_a, train)


# -- checkpoint --------------------------------------------------------------------

def test_checkpoint_roundtrip(tiny, tmp_path):
    cfg, params = tiny
    path = tmp_path / "m.rcmp"
    extra = {"train.step": np.array([7.0])}
    nn.save_checkpoint(path, cfg, params, extra)
    data = path.read_bytes()
    assert data[:4] == b"RCMP"
    cfg2, params2, extra2 = nn.load_checkpoint(path)
    assert cfg2 == cfg
    assert list(params2) == list(params)
    assert all(np.array_equal(params[k], params2[k]) for k in params)
    assert extra2["train.step"][0] == 7.0


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.rcmp"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_model_wrapper(tiny, tmp_path):
    cfg, params = tiny
    m = nn.Model(cfg, params)
    m.save(tmp_path / "w.rcmp")
    back = nn.Model.load(tmp_path / "w.rcmp")
    b = random_batch(cfg, np.random.default_rng(0))
    assert np.array_equal(m.forward(b).pooled, back.forward(b).pooled)
