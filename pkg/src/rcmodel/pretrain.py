"""Self-supervised pretraining: masked-channel and next-time-frame objectives."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as nn
from .chansim import ChannelGrid
from .tokenizer import MASK, NUM_SPECIALS, SequenceExample, Vocabulary, assemble_sequence, stack_sequences

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 12
    mask_rate: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    nfp_negative_rate: float = 0.5
    negative_min_gap: int = 10
    learning_rate_peak: float = 5e-5
    warmup_steps: int = 0
    total_steps: int | None = None  # None: derive from epochs
    epochs: int = 3
    seed: int = 0
    anchor_stride: int = 1
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not math.isclose(sum(self.mask_split), 1.0, abs_tol=1e-12):
            raise ValueError("mask_split must sum to 1")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in (0, 1]")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingExample:
    input: SequenceExample
    mlm_positions: np.ndarray
    mlm_labels: np.ndarray
    nfp_label: int  # 1 = consecutive, 0 = not


def lr_schedule(step: int, cfg: PretrainConfig, total_steps: int | None = None) -> float:
    """Linear warm-up to the peak, then linear decay to zero at ``total_steps``."""
    total = cfg.total_steps if total_steps is None else total_steps
    peak = cfg.learning_rate_peak
    if total is None or not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < cfg.warmup_steps:
        return peak * (step / cfg.warmup_steps)
    if total == cfg.warmup_steps:
        return peak
    return peak * ((total - step) / (total - cfg.warmup_steps))


def make_mlm_example(seq: SequenceExample, rng: np.random.Generator, cfg: PretrainConfig,
                     vocab_size: int, nfp_label: int = 1) -> TrainingExample:
    """Select channel positions with probability ``mask_rate`` and corrupt them 80/10/10."""
    out = seq.copy()
    chan = seq.channel_positions
    chosen = chan[rng.random(chan.size) < cfg.mask_rate]
    labels = seq.token_ids[chosen].copy()
    u = rng.random(chosen.size)
    p_mask, p_rand, _ = cfg.mask_split
    to_mask = chosen[u < p_mask]
    to_rand = chosen[(u >= p_mask) & (u < p_mask + p_rand)]
    out.token_ids[to_mask] = MASK
    out.token_ids[to_rand] = rng.integers(NUM_SPECIALS, vocab_size, size=to_rand.size)
    return TrainingExample(out, chosen, labels, nfp_label)


def negative_frame(num_frames: int, t0: int, rng: np.random.Generator, gap: int) -> int:
    """Uniform frame at distance >= ``gap`` from ``t0``."""
    cands = np.concatenate([np.arange(0, max(t0 - gap + 1, 0)), np.arange(t0 + gap, num_frames)])
    if cands.size == 0:
        raise ValueError(f"grid with {num_frames} frames too short for a negative at gap {gap}")
    return int(cands[rng.integers(cands.size)])


def make_nfp_pair(grid: ChannelGrid, t0: int, rng: np.random.Generator, cfg: PretrainConfig,
                  vocab: Vocabulary, token_grid=None) -> tuple[SequenceExample, int]:
    """Pair frame ``t0`` with its successor (label 1) or a distant frame (label 0)."""
    if not 0 <= t0 < grid.num_frames - 1:
        raise IndexError(f"t0={t0} has no successor in a {grid.num_frames}-frame grid")
    if rng.random() < cfg.nfp_negative_rate:
        second, label = negative_frame(grid.num_frames, t0, rng, cfg.negative_min_gap), 0
    else:
        second, label = t0 + 1, 1
    return assemble_sequence(grid, (t0, second), vocab, token_grid), label


def build_example(grid, t0, rng, cfg, vocab, token_grid=None) -> TrainingExample:
    seq, label = make_nfp_pair(grid, t0, rng, cfg, vocab, token_grid)
    return make_mlm_example(seq, rng, cfg, vocab.size, label)


def collate(examples):
    batch = stack_sequences([e.input for e in examples])
    bi = np.concatenate([np.full(e.mlm_positions.size, i) for i, e in enumerate(examples)]).astype(np.int64)
    pi = np.concatenate([e.mlm_positions for e in examples]).astype(np.int64)
    labels = np.concatenate([e.mlm_labels for e in examples]).astype(np.int64)
    nfp = np.array([e.nfp_label for e in examples], dtype=np.int64)
    return batch, (bi, pi), labels, nfp


def _cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    lsm = nn.log_softmax(logits)
    n = labels.size
    loss = -lsm[np.arange(n), labels].mean()
    grad = np.exp(lsm)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class LossResult:
    total: float
    mlm: float
    nfp: float
    grads: dict
    mlm_correct: int = 0
    mlm_count: int = 0
    nfp_correct: int = 0


def loss(examples, params, mcfg: nn.ModelConfig, rng=None, with_grads: bool = True) -> LossResult:
    """Mean masked-token cross-entropy plus next-frame cross-entropy, equal weights."""
    if not examples:
        raise ValueError("empty batch")
    batch, pos, labels, nfp = collate(examples)
    trace = nn.forward(batch, params, mcfg, rng)
    nfp_log = nn.nfp_logits(trace, params)
    nfp_loss, d_nfp = _cross_entropy(nfp_log, nfp)
    mlm_loss, d_mlm, correct = 0.0, None, 0
    if labels.size:
        logits = nn.mlm_logits(trace, params, pos)
        mlm_loss, d_mlm = _cross_entropy(logits, labels)
        correct = int((logits.argmax(1) == labels).sum())
    grads = None
    if with_grads:
        grads = nn.backward(trace, params, d_mlm=d_mlm, mlm_positions=pos if labels.size else None,
                            d_nfp=d_nfp)
    return LossResult(float(mlm_loss + nfp_loss), float(mlm_loss), float(nfp_loss), grads,
                      correct, int(labels.size), int((nfp_log.argmax(1) == nfp).sum()))


class Adam:
    """Adam; a tensor whose gradient is entirely zero is left untouched (moments included)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            if not np.any(g):
                continue
            self.t[k] += 1
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** self.t[k])
            vhat = self.v[k] / (1 - self.beta2 ** self.t[k])
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        out = {}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        out["opt.t"] = np.array([self.t[k] for k in self.m], dtype=np.float64)
        return out

    def load_state(self, extra: dict):
        if "opt.t" not in extra:
            return
        for i, k in enumerate(self.m):
            self.m[k] = extra[f"opt.m.{k}"].copy()
            self.v[k] = extra[f"opt.v.{k}"].copy()
            self.t[k] = int(extra["opt.t"][i])


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def example_index(grids, stride: int = 1):
    """(grid index, t0) for every ``stride``-th frame that has a successor."""
    return [(gi, t0) for gi, g in enumerate(grids) for t0 in range(0, g.num_frames - 1, stride)]


@dataclass
class PretrainResult:
    params: dict
    log: list = field(default_factory=list)  # (step, lr, mlm, nfp, total)
    epoch_metrics: list = field(default_factory=list)
    optimizer: Adam | None = None
    step: int = 0


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return math.ceil(n_examples / batch_size)


def pretrain(grids, vocab: Vocabulary, mcfg: nn.ModelConfig, pcfg: PretrainConfig, params=None,
             eval_grids=None, start_step: int = 0, optimizer: Adam | None = None,
             on_step=None, token_grids=None) -> PretrainResult:
    """Train with Adam under the warm-up/linear-decay schedule.

    Batch order is a per-epoch permutation seeded by ``(seed, epoch)``; each
    example's pairing and masking draws from its own ``(seed, epoch, index)``
    stream, so results do not depend on evaluation order.
    """
    if isinstance(grids, ChannelGrid):
        grids = [grids]
    if vocab.size > mcfg.vocab_size:
        raise ValueError(f"vocabulary of size {vocab.size} exceeds model vocab_size {mcfg.vocab_size}")
    if params is None:
        params = nn.init_params(mcfg, pcfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    if token_grids is None:
        token_grids = [vocab.encode_array(g.values) for g in grids]
    index = example_index(grids, pcfg.anchor_stride)
    per_epoch = steps_per_epoch(len(index), pcfg.batch_size)
    total = pcfg.total_steps if pcfg.total_steps is not None else per_epoch * pcfg.epochs
    opt = optimizer or Adam(params, pcfg.beta1, pcfg.beta2, pcfg.adam_eps)
    result = PretrainResult(params, optimizer=opt, step=start_step)
    drop_rng = np.random.default_rng([pcfg.seed, 7]) if mcfg.dropout_rate > 0 else None

    step = start_step
    while step < total:
        epoch, within = divmod(step, per_epoch)
        order = np.random.default_rng([pcfg.seed, epoch]).permutation(len(index))
        chunk = order[within * pcfg.batch_size:(within + 1) * pcfg.batch_size]
        examples = []
        for j in chunk:
            gi, t0 = index[j]
            rng = np.random.default_rng([pcfg.seed, epoch, int(j)])
            examples.append(build_example(grids[gi], t0, rng, pcfg, vocab, token_grids[gi]))
        try:
            res = loss(examples, params, mcfg, drop_rng)
        except nn.NumericError as e:
            raise nn.NumericError(f"loss diverged at step {step + 1}: {e}") from e
        if not math.isfinite(res.total):
            raise nn.NumericError(f"loss diverged at step {step + 1}")
        grads = res.grads if pcfg.grad_clip is None else clip_global_norm(res.grads, pcfg.grad_clip)
        lr = lr_schedule(step + 1, pcfg, total)
        opt.step(params, grads, lr)
        step += 1
        result.log.append((step, lr, res.mlm, res.nfp, res.total))
        if on_step is not None:
            on_step(step, params, opt)
        if step % per_epoch == 0 or step == total:
            metrics = {"epoch": math.ceil(step / per_epoch), "step": step}
            if eval_grids:
                metrics.update(evaluate(eval_grids, vocab, params, mcfg, pcfg))
            result.epoch_metrics.append(metrics)
            log.info("epoch metrics %s", metrics)
    result.params = params
    result.step = step
    return result


def evaluate(grids, vocab, params, mcfg, pcfg: PretrainConfig, max_examples: int = 512,
             seed: int = 12345, batch_size: int = 64) -> dict:
    """Held-out MLM loss/accuracy and next-frame accuracy under the training corruption."""
    if isinstance(grids, ChannelGrid):
        grids = [grids]
    tgrids = [vocab.encode_array(g.values) for g in grids]
    index = example_index(grids)
    rng = np.random.default_rng(seed)
    if len(index) > max_examples:
        index = [index[i] for i in np.sort(rng.choice(len(index), max_examples, replace=False))]
    examples = [build_example(grids[gi], t0, np.random.default_rng([seed, k]), pcfg, vocab, tgrids[gi])
                for k, (gi, t0) in enumerate(index)]
    mlm_sum = nfp_sum = 0.0
    n_mlm = n_correct = n_nfp = 0
    for s in range(0, len(examples), batch_size):
        part = examples[s:s + batch_size]
        r = loss(part, params, mcfg, with_grads=False)
        mlm_sum += r.mlm * r.mlm_count
        n_mlm += r.mlm_count
        n_correct += r.mlm_correct
        n_nfp += r.nfp_correct
        nfp_sum += r.nfp * len(part)
    return {
        "mlm_loss": mlm_sum / max(n_mlm, 1),
        "mlm_accuracy": n_correct / max(n_mlm, 1),
        "nfp_loss": nfp_sum / len(examples),
        "nfp_accuracy": n_nfp / len(examples),
    }


def write_metrics_log(entries, path) -> None:
    with open(path, "w") as fh:
        for step, lr, mlm, nfp, total in entries:
            fh.write(f"{int(step)}\t{float(lr)!r}\t{float(mlm)!r}\t{float(nfp)!r}\t{float(total)!r}\n")
