"""Applications of a pretrained channel model.

Contamination detection and mitigation, [CLS]-based compression and
fingerprints, fingerprint charting with t-SNE, the attention-domain profile,
and classifier fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import model as nn
from .comprehend import masked_reconstruct
from .pretrain import Adam, _cross_entropy
from .tokenizer import SequenceExample, Vocabulary, stack_sequences
from .tsne import tsne

CONSECUTIVE, ANOMALOUS = "consecutive", "anomalous"


# -- contamination -------------------------------------------------------------

def nfp_margins(model: nn.Model, seqs, batch_size: int = 64) -> np.ndarray:
    """logit[not] - logit[consecutive] for each two-frame sequence."""
    out = []
    for s in range(0, len(seqs), batch_size):
        trace = model.forward(stack_sequences(seqs[s:s + batch_size]))
        logits = nn.nfp_logits(trace, model.params)
        out.append(logits[:, 0] - logits[:, 1])
    return np.concatenate(out)


def detect_contamination(model: nn.Model, seq: SequenceExample, threshold: float = 0.0):
    """Return ``(decision, logit_margin)``; anomalous iff the margin exceeds ``threshold``."""
    margin = float(nfp_margins(model, [seq])[0])
    return (ANOMALOUS if margin > threshold else CONSECUTIVE), margin


def mitigate_contamination(model: nn.Model, vocab: Vocabulary, seq: SequenceExample) -> np.ndarray:
    """Mask the whole second frame and return its reconstruction, shape (Ns, Na)."""
    pos = seq.second_frame_positions()
    recs = masked_reconstruct(model, vocab, seq, pos)
    ns = int(seq.freq_ids.max())
    na = int(seq.antenna_ids.max())
    out = np.zeros((ns, na), dtype=np.complex128)
    for r in recs:
        out[seq.freq_ids[r.position] - 1, seq.antenna_ids[r.position] - 1] = r.value
    return out


# -- compression and fingerprints ---------------------------------------------

def cls_vectors(model: nn.Model, seqs, use_pooler: bool = True, batch_size: int = 64) -> np.ndarray:
    """Pooled [CLS] vector per sequence (or the raw final-layer [CLS] state)."""
    out = []
    for s in range(0, len(seqs), batch_size):
        trace = model.forward(stack_sequences(seqs[s:s + batch_size]))
        out.append(trace.pooled if use_pooler else trace.final[:, 0])
    return np.concatenate(out)


def compress(model: nn.Model, seqs, use_pooler: bool = True) -> np.ndarray:
    """Mean pooled [CLS] representation of a batch: one H-vector for Nb sequences."""
    if len(seqs) == 0:
        raise ValueError("empty batch")
    return cls_vectors(model, seqs, use_pooler).mean(0)


@dataclass(frozen=True)
class CompressionDims:
    Ns: int
    Nt: int
    Nr: int
    Nc: int = 2
    Nb: int = 1
    H: int = 768

    def __post_init__(self):
        if min(self.Ns, self.Nt, self.Nr, self.Nc, self.Nb, self.H) < 1:
            raise ValueError("all compression dimensions must be >= 1")


def compression_ratio(dims: CompressionDims) -> Fraction:
    return Fraction(dims.Ns * dims.Nt * dims.Nr * dims.Nc * dims.Nb, dims.H)


@dataclass
class Fingerprint:
    vector: np.ndarray
    start: int = 0
    count: int = 8


def fingerprint(model: nn.Model, seqs, count: int = 8, start: int = 0, use_pooler: bool = True) -> Fingerprint:
    """Mean pooled [CLS] vector of ``count`` temporally consecutive sequences."""
    if len(seqs) != count:
        raise ValueError(f"expected {count} sequences, got {len(seqs)}")
    return Fingerprint(cls_vectors(model, seqs, use_pooler).mean(0), start, count)


def fingerprints_from_vectors(vectors: np.ndarray, count: int = 8, stride: int | None = None) -> list[Fingerprint]:
    """Sliding-window fingerprints over precomputed per-sequence vectors."""
    stride = count if stride is None else stride
    return [Fingerprint(vectors[s:s + count].mean(0), s, count)
            for s in range(0, len(vectors) - count + 1, stride)]


@dataclass
class ChartPoint:
    x: float
    y: float
    label: int
    size_rank: int


def tsne_chart(fingerprints, perplexity: float, iterations: int = 1000, seed: int = 0,
               labels=None, size_ranks=None, return_result: bool = False):
    """2-D t-SNE chart of fingerprints (vectors or :class:`Fingerprint`)."""
    X = np.stack([f.vector if isinstance(f, Fingerprint) else np.asarray(f) for f in fingerprints])
    n = len(X)
    if n < 3:
        raise ValueError("charting needs at least 3 fingerprints")
    if not 1.0 <= perplexity < n:
        raise ValueError(f"perplexity must lie in [1, {n})")
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    size_ranks = np.arange(n) if size_ranks is None else np.asarray(size_ranks)
    res = tsne(X, perplexity=perplexity, iterations=iterations, seed=seed)
    pts = [ChartPoint(float(x), float(y), int(l), int(r))
           for (x, y), l, r in zip(res.embedding, labels, size_ranks)]
    return (pts, res) if return_result else pts


def write_chart(points, path) -> None:
    with open(path, "w") as fh:
        for p in points:
            fh.write(f"{float(p.x)!r}\t{float(p.y)!r}\t{p.label}\t{p.size_rank}\n")


def adjacency_ratio(embedding: np.ndarray, labels=None) -> float:
    """Mean distance of temporally adjacent points over mean distance of all pairs.

    Adjacency is consecutive index within the same label.
    """
    Y = np.asarray(embedding)
    n = len(Y)
    labels = np.zeros(n) if labels is None else np.asarray(labels)
    adj = [np.linalg.norm(Y[i + 1] - Y[i]) for i in range(n - 1) if labels[i] == labels[i + 1]]
    iu = np.triu_indices(n, 1)
    allpairs = np.linalg.norm(Y[iu[0]] - Y[iu[1]], axis=1)
    return float(np.mean(adj) / np.mean(allpairs))


# -- attention domain profile ------------------------------------------------

BUCKETS = ("freq_local", "cross_time", "cross_antenna", "special")


def bucket_masks(seq: SequenceExample, radius: int = 5) -> np.ndarray:
    """Boolean masks (4, N, N) assigning every (query, key) pair to one bucket."""
    f, t, a = seq.freq_ids, seq.time_ids, seq.antenna_ids
    chan = f > 0
    both = chan[:, None] & chan[None, :]
    same_t = t[:, None] == t[None, :]
    same_a = a[:, None] == a[None, :]
    local = both & same_t & same_a & (np.abs(f[:, None] - f[None, :]) <= radius)
    cross_t = both & ~same_t & same_a
    cross_a = both & same_t & ~same_a
    rest = ~(local | cross_t | cross_a)
    return np.stack([local, cross_t, cross_a, rest])


def attention_domain_profile(model: nn.Model, seqs, radius: int = 5) -> np.ndarray:
    """Attention mass per (layer, head, bucket), averaged over channel query positions.

    ``seqs`` may be one sequence or a list sharing the same layout.
    """
    if isinstance(seqs, SequenceExample):
        seqs = [seqs]
    masks = bucket_masks(seqs[0], radius).astype(np.float64)
    q = seqs[0].freq_ids > 0
    trace = model.forward(stack_sequences(seqs))
    A = trace.attention_array()[:, :, :, q, :]  # (B, L, H, Nq, N)
    mass = np.einsum("blhqk,cqk->blhqc", A, masks[:, q, :])
    return mass.mean(axis=(0, 3))


def write_attention_profile(profile: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for layer in range(profile.shape[0]):
            for head in range(profile.shape[1]):
                vals = "\t".join(repr(float(v)) for v in profile[layer, head])
                fh.write(f"{layer}\t{head}\t{vals}\n")


# -- fine-tuning ---------------------------------------------------------------

@dataclass(frozen=True)
class FineTuneConfig:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.25
    seed: int = 0


@dataclass
class TaskModel:
    model: nn.Model
    head_w: np.ndarray
    head_b: np.ndarray

    def logits(self, seqs) -> np.ndarray:
        trace = self.model.forward(stack_sequences(seqs))
        return trace.pooled @ self.head_w + self.head_b

    def predict(self, seqs, batch_size: int = 64) -> np.ndarray:
        return np.concatenate([self.logits(seqs[s:s + batch_size]).argmax(1)
                               for s in range(0, len(seqs), batch_size)])


def split_holdout(n: int, fraction: float, seed: int):
    perm = np.random.default_rng([seed, 1]).permutation(n)
    k = max(1, int(round(n * fraction)))
    return np.sort(perm[k:]), np.sort(perm[:k])


def fine_tune_classifier(model: nn.Model, examples, num_classes: int,
                         cfg: FineTuneConfig = FineTuneConfig()):
    """New linear head on the pooled [CLS]; all weights trained jointly with cross-entropy.

    Returns ``(task_model, held_out_accuracy)``.
    """
    seqs = [s for s, _ in examples]
    y = np.array([c for _, c in examples], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("fine-tuning needs at least two classes")
    train_idx, test_idx = split_holdout(len(seqs), cfg.holdout_fraction, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    H = model.config.hidden_size
    params = {k: v.copy() for k, v in model.params.items()}
    params["head.w"] = nn.truncated_normal(rng, (H, num_classes))
    params["head.b"] = np.zeros(num_classes)
    opt = Adam(params)
    core_names = list(model.params)
    for step in range(cfg.steps):
        batch_idx = train_idx[rng.integers(len(train_idx), size=min(cfg.batch_size, len(train_idx)))]
        core = {k: params[k] for k in core_names}
        trace = nn.forward(stack_sequences([seqs[i] for i in batch_idx]), core, model.config)
        logits = trace.pooled @ params["head.w"] + params["head.b"]
        _, dlogits = _cross_entropy(logits, y[batch_idx])
        grads = nn.backward(trace, core, d_pooled=dlogits @ params["head.w"].T)
        grads["head.w"] = trace.pooled.T @ dlogits
        grads["head.b"] = dlogits.sum(0)
        lr = cfg.learning_rate * (1.0 - step / cfg.steps)
        opt.step(params, grads, lr)
    task = TaskModel(nn.Model(model.config, {k: params[k] for k in core_names}),
                     params["head.w"], params["head.b"])
    pred = task.predict([seqs[i] for i in test_idx])
    return task, float(np.mean(pred == y[test_idx]))

