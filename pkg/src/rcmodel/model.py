"""Bidirectional transformer encoder with multi-domain channel embedding.

The input state of every position is the sum of a token embedding and three
domain embeddings (subcarrier, time frame, antenna).  There is no separate
sequential position embedding: the domain ids already identify each channel
position uniquely.

Forward and backward are written out by hand in numpy so gradients are exact
and the forward pass is a pure function of ``(params, batch)``.  Parameters
live in a flat ``dict[str, ndarray]`` whose key order is fixed by
:func:`param_shapes`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import erf

LN_EPS = 1e-12


class NumericError(FloatingPointError):
    """A forward or backward quantity became non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    vocab_size: int = 512
    max_freq_features: int = 16
    max_time_features: int = 2
    max_antenna_features: int = 2
    max_seq_len: int = 69
    dropout_rate: float = 0.0
    dtype: str = "float64"
    tie_mlm_weights: int = 0

    def __post_init__(self):
        for f in ("num_layers", "hidden_size", "num_heads", "ffn_size", "vocab_size",
                  "max_freq_features", "max_time_features", "max_antenna_features", "max_seq_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def bert_base(cls, vocab_size: int = 18000) -> ModelConfig:
        return cls(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072,
                   vocab_size=vocab_size, max_freq_features=200, max_seq_len=805,
                   dropout_rate=0.1)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            t = types[k]
            kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
        return cls(**kw)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes; this order is the checkpoint tensor order."""
    H, F, V = cfg.hidden_size, cfg.ffn_size, cfg.vocab_size
    shapes = {
        "emb.token": (V, H),
        "emb.freq": (cfg.max_freq_features + 1, H),
        "emb.time": (cfg.max_time_features + 1, H),
        "emb.antenna": (cfg.max_antenna_features + 1, H),
        "emb.ln.gamma": (H,),
        "emb.ln.beta": (H,),
    }
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        for m in "qkvo":
            shapes[p + f"attn.{m}.w"] = (H, H)
            shapes[p + f"attn.{m}.b"] = (H,)
        shapes[p + "attn.ln.gamma"] = (H,)
        shapes[p + "attn.ln.beta"] = (H,)
        shapes[p + "ffn.in.w"] = (H, F)
        shapes[p + "ffn.in.b"] = (F,)
        shapes[p + "ffn.out.w"] = (F, H)
        shapes[p + "ffn.out.b"] = (H,)
        shapes[p + "ffn.ln.gamma"] = (H,)
        shapes[p + "ffn.ln.beta"] = (H,)
    shapes.update({
        "pooler.w": (H, H), "pooler.b": (H,),
        "mlm.w": (H, V), "mlm.b": (V,),
        "nfp.w": (H, 2), "nfp.b": (2,),
    })
    if cfg.tie_mlm_weights:
        del shapes["mlm.w"]
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".beta"):
            arr = np.zeros(shape)
        else:
            arr = truncated_normal(rng, shape, std)
        params[name] = arr.astype(cfg.dtype)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise ValueError("parameter names do not match the model config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


# -- primitives ----------------------------------------------------------------

def _ln_forward(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _ln_backward(dy, gamma, cache):
    xhat, inv = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    dbeta = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate == 0.0:
        return None
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


# -- forward -------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Everything the backward pass needs, plus inspection outputs."""

    config: ModelConfig
    batch: dict
    hidden: list = field(default_factory=list)  # per-layer input states, then final
    attention: list = field(default_factory=list)  # per layer (B, A, N, N)
    pooled: np.ndarray | None = None
    caches: list = field(default_factory=list)
    emb_cache: tuple | None = None
    pool_pre: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.hidden[-1]

    def attention_array(self) -> np.ndarray:
        """Attention probabilities stacked to shape (B, L, A, N, N)."""
        return np.stack(self.attention, axis=1)


def _as_batch(batch) -> dict:
    if hasattr(batch, "token_ids") and not isinstance(batch, dict):
        batch = {k: getattr(batch, k)[None, :] for k in ("token_ids", "freq_ids", "time_ids", "antenna_ids")}
    return {k: np.asarray(v, dtype=np.int64) for k, v in batch.items()}


def embed(batch, params, cfg: ModelConfig, rng=None):
    """Sum of token and domain embeddings followed by layer norm.

    Returns ``(states, cache)``; ``states`` has shape (B, N, H).
    """
    b = _as_batch(batch)
    tables = (("token_ids", "emb.token"), ("freq_ids", "emb.freq"),
              ("time_ids", "emb.time"), ("antenna_ids", "emb.antenna"))
    x = 0.0
    for key, name in tables:
        ids = b[key]
        n = params[name].shape[0]
        if ids.min() < 0 or ids.max() >= n:
            raise IndexError(f"{key} out of bounds for {name} with {n} rows")
        x = x + params[name][ids]
    y, ln_cache = _ln_forward(x, params["emb.ln.gamma"], params["emb.ln.beta"])
    mask = _dropout_mask(rng, y.shape, cfg.dropout_rate, y.dtype)
    if mask is not None:
        y = y * mask
    return y, (b, ln_cache, mask)


def _layer_forward(h, params, cfg, i, rng):
    p = f"layer{i}."
    B, N, H = h.shape
    A, d = cfg.num_heads, cfg.head_size

    def heads(t):
        return t.reshape(B, N, A, d).transpose(0, 2, 1, 3)

    q = heads(h @ params[p + "attn.q.w"] + params[p + "attn.q.b"])
    k = heads(h @ params[p + "attn.k.w"] + params[p + "attn.k.b"])
    v = heads(h @ params[p + "attn.v.w"] + params[p + "attn.v.b"])
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
    if not np.all(np.isfinite(scores)):
        bad = np.argwhere(~np.isfinite(scores))[0]
        raise NumericError(f"non-finite attention score in layer {i}, head {int(bad[1])}")
    probs = softmax(scores)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, H)
    o = ctx @ params[p + "attn.o.w"] + params[p + "attn.o.b"]
    m1 = _dropout_mask(rng, o.shape, cfg.dropout_rate, o.dtype)
    if m1 is not None:
        o = o * m1
    h1, ln1 = _ln_forward(h + o, params[p + "attn.ln.gamma"], params[p + "attn.ln.beta"])
    z = h1 @ params[p + "ffn.in.w"] + params[p + "ffn.in.b"]
    g = gelu(z)
    f = g @ params[p + "ffn.out.w"] + params[p + "ffn.out.b"]
    m2 = _dropout_mask(rng, f.shape, cfg.dropout_rate, f.dtype)
    if m2 is not None:
        f = f * m2
    h2, ln2 = _ln_forward(h1 + f, params[p + "ffn.ln.gamma"], params[p + "ffn.ln.beta"])
    if not np.all(np.isfinite(h2)):
        raise NumericError(f"non-finite hidden state after layer {i}")
    cache = dict(h=h, q=q, k=k, v=v, probs=probs, ctx=ctx, m1=m1, ln1=ln1,
                 h1=h1, z=z, g=g, m2=m2, ln2=ln2)
    return h2, probs, cache


def encode(states, params, cfg: ModelConfig, rng=None, trace: ForwardTrace | None = None) -> ForwardTrace:
    """Run the encoder stack and the [CLS] pooler over embedded states."""
    if not np.all(np.isfinite(states)):
        raise NumericError("non-finite input states")
    if trace is None:
        trace = ForwardTrace(cfg, {})
    h = states
    for i in range(cfg.num_layers):
        trace.hidden.append(h)
        h, probs, cache = _layer_forward(h, params, cfg, i, rng)
        trace.attention.append(probs)
        trace.caches.append(cache)
    trace.hidden.append(h)
    trace.pool_pre = h[:, 0] @ params["pooler.w"] + params["pooler.b"]
    trace.pooled = np.tanh(trace.pool_pre)
    return trace


def forward(batch, params, cfg: ModelConfig, rng=None) -> ForwardTrace:
    """Embed and encode.  ``rng`` enables dropout (training mode)."""
    states, emb_cache = embed(batch, params, cfg, rng)
    trace = ForwardTrace(cfg, emb_cache[0], emb_cache=emb_cache)
    return encode(states, params, cfg, rng, trace)


def mlm_logits(trace: ForwardTrace, params, positions) -> np.ndarray:
    """Vocabulary logits at ``positions`` = (batch_index, seq_index) arrays."""
    bi, pi = positions
    return trace.final[bi, pi] @ _mlm_weight(params) + params["mlm.b"]


def _mlm_weight(params):
    w = params.get("mlm.w")
    return params["emb.token"].T if w is None else w


def nfp_logits(trace: ForwardTrace, params) -> np.ndarray:
    """Next-frame logits per sequence; column 1 means "consecutive"."""
    tok = trace.batch.get("token_ids")
    if tok is not None and np.any(tok[:, 0] != 2):
        raise ValueError("sequence does not start with [CLS]")
    return trace.pooled @ params["nfp.w"] + params["nfp.b"]


# -- backward ------------------------------------------------------------------

def backward(trace: ForwardTrace, params, d_mlm=None, mlm_positions=None, d_nfp=None,
             d_pooled=None, d_final=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    ``d_mlm`` is the loss gradient w.r.t. ``mlm_logits(trace, params,
    mlm_positions)``, ``d_nfp`` w.r.t. ``nfp_logits``; ``d_pooled`` and
    ``d_final`` inject gradients directly on the pooled vector and final
    states (used by task heads).
    """
    cfg = trace.config
    if len(trace.caches) != cfg.num_layers or trace.emb_cache is None:
        raise ValueError("trace does not match a full forward pass of this config")
    check_params(params, cfg)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    final = trace.final
    B, N, H = final.shape
    dh = np.zeros_like(final) if d_final is None else np.array(d_final, dtype=final.dtype)

    if d_mlm is not None:
        bi, pi = mlm_positions
        hs = final[bi, pi]
        if "mlm.w" in params:
            grads["mlm.w"] += hs.T @ d_mlm
        else:
            grads["emb.token"] += d_mlm.T @ hs
        grads["mlm.b"] += d_mlm.sum(0)
        np.add.at(dh, (bi, pi), d_mlm @ _mlm_weight(params).T)

    dpool = np.zeros_like(trace.pooled) if d_pooled is None else np.array(d_pooled, dtype=final.dtype)
    if d_nfp is not None:
        grads["nfp.w"] += trace.pooled.T @ d_nfp
        grads["nfp.b"] += d_nfp.sum(0)
        dpool = dpool + d_nfp @ params["nfp.w"].T
    dpre = dpool * (1.0 - trace.pooled ** 2)
    grads["pooler.w"] += final[:, 0].T @ dpre
    grads["pooler.b"] += dpre.sum(0)
    dh[:, 0] += dpre @ params["pooler.w"].T

    A, d = cfg.num_heads, cfg.head_size
    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}."
        c = trace.caches[i]
        du2, grads[p + "ffn.ln.gamma"], grads[p + "ffn.ln.beta"] = _ln_backward(dh, params[p + "ffn.ln.gamma"], c["ln2"])
        df = du2 if c["m2"] is None else du2 * c["m2"]
        grads[p + "ffn.out.w"] = c["g"].reshape(-1, c["g"].shape[-1]).T @ df.reshape(-1, H)
        grads[p + "ffn.out.b"] = df.reshape(-1, H).sum(0)
        dz = (df @ params[p + "ffn.out.w"].T) * _gelu_grad(c["z"])
        grads[p + "ffn.in.w"] = c["h1"].reshape(-1, H).T @ dz.reshape(-1, dz.shape[-1])
        grads[p + "ffn.in.b"] = dz.reshape(-1, dz.shape[-1]).sum(0)
        dh1 = du2 + dz @ params[p + "ffn.in.w"].T

        du1, grads[p + "attn.ln.gamma"], grads[p + "attn.ln.beta"] = _ln_backward(dh1, params[p + "attn.ln.gamma"], c["ln1"])
        do = du1 if c["m1"] is None else du1 * c["m1"]
        grads[p + "attn.o.w"] = c["ctx"].reshape(-1, H).T @ do.reshape(-1, H)
        grads[p + "attn.o.b"] = do.reshape(-1, H).sum(0)
        dctx = (do @ params[p + "attn.o.w"].T).reshape(B, N, A, d).transpose(0, 2, 1, 3)
        probs = c["probs"]
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) / math.sqrt(d)
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        hin = c["h"].reshape(-1, H)
        dx = du1
        for m, dm in (("q", dq), ("k", dk), ("v", dv)):
            dm = dm.transpose(0, 2, 1, 3).reshape(B, N, H)
            grads[p + f"attn.{m}.w"] = hin.T @ dm.reshape(-1, H)
            grads[p + f"attn.{m}.b"] = dm.reshape(-1, H).sum(0)
            dx = dx + dm @ params[p + f"attn.{m}.w"].T
        dh = dx

    b, ln_cache, mask = trace.emb_cache
    if mask is not None:
        dh = dh * mask
    dx0, grads["emb.ln.gamma"], grads["emb.ln.beta"] = _ln_backward(dh, params["emb.ln.gamma"], ln_cache)
    flat = dx0.reshape(-1, H)
    for key, name in (("token_ids", "emb.token"), ("freq_ids", "emb.freq"),
                      ("time_ids", "emb.time"), ("antenna_ids", "emb.antenna")):
        np.add.at(grads[name], b[key].ravel(), flat)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


# -- checkpoint ----------------------------------------------------------------

_MAGIC = b"RCMP"


def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, config block, then named f64 tensors.

    Tensor order is :func:`param_shapes` order, followed by ``extra`` tensors
    (optimizer state, step counter) in their insertion order.
    """
    check_params(params, cfg)
    cfg_bytes = cfg.to_text().encode()
    out = [_MAGIC, struct.pack("<II", 1, len(cfg_bytes)), cfg_bytes]
    tensors = list(params.items()) + list((extra or {}).items())
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path):
    """Return ``(config, params, extra)``."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an RCMP checkpoint")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_text(data[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tensors[name] = arr.astype(cfg.dtype)
    names = list(param_shapes(cfg))
    params = {k: tensors.pop(k) for k in names}
    check_params(params, cfg)
    return cfg, params, tensors


@dataclass
class Model:
    """Configuration plus parameters; the unit passed to evaluation tools."""

    config: ModelConfig
    params: dict

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> Model:
        return cls(cfg, init_params(cfg, seed))

    @classmethod
    def load(cls, path) -> Model:
        cfg, params, _ = load_checkpoint(path)
        return cls(cfg, params)

    def forward(self, batch) -> ForwardTrace:
        return forward(batch, self.params, self.config)

    def save(self, path, extra=None) -> None:
        save_checkpoint(path, self.config, self.params, extra)
