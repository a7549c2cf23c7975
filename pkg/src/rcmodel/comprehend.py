"""Using a pretrained model as a tool: scoring, scale finding, transfer, reconstruction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as nn
from .chansim import ChannelGrid
from .pretrain import PretrainConfig, PretrainResult, pretrain
from .tokenizer import (MASK, NUM_SPECIALS, FeatureMap, SequenceExample, Vocabulary,
                        assemble_sequence, stack_sequences)


class ScaleSearchError(RuntimeError):
    """Every candidate scale produced a non-finite perplexity."""


class FeatureMapMismatch(ValueError):
    pass


@dataclass
class ScoredChannel:
    sequence: SequenceExample
    positions: np.ndarray
    log_probs: np.ndarray

    @property
    def total_log_likelihood(self) -> float:
        return float(self.log_probs.sum())

    @property
    def perplexity(self) -> float:
        return perplexity(self.log_probs)


def perplexity(log_probs) -> float:
    """exp of the negative mean log-probability."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    return float(np.exp(-log_probs.mean()))


def _true_token_log_probs(model: nn.Model, seqs, positions) -> np.ndarray:
    """Log-probability of the original token at ``positions[k]`` with only that position masked in ``seqs[k]``."""
    masked = []
    for s, p in zip(seqs, positions):
        m = s.copy()
        m.token_ids[p] = MASK
        masked.append(m)
    batch = stack_sequences(masked)
    trace = model.forward(batch)
    idx = (np.arange(len(seqs)), np.asarray(positions))
    logits = nn.mlm_logits(trace, model.params, idx)
    lsm = nn.log_softmax(logits)
    truth = np.array([s.token_ids[p] for s, p in zip(seqs, positions)])
    return lsm[np.arange(len(seqs)), truth]


def pseudo_log_likelihood(model: nn.Model, seq: SequenceExample, chunk: int = 64) -> ScoredChannel:
    """Score each channel position with only that position masked.

    Positions are processed in batches of ``chunk`` masked copies; ``chunk=1``
    runs one forward pass per position.
    """
    pos = seq.channel_positions
    if np.any(seq.token_ids[pos] < NUM_SPECIALS):
        raise ValueError("channel positions must hold channel tokens")
    out = np.empty(pos.size)
    for s in range(0, pos.size, chunk):
        part = pos[s:s + chunk]
        out[s:s + part.size] = _true_token_log_probs(model, [seq] * part.size, part)
    if not np.all(np.isfinite(out)):
        raise nn.NumericError("non-finite token probability")
    return ScoredChannel(seq, pos, out)


def scale_channel(grid: ChannelGrid, scale: float) -> ChannelGrid:
    """Divide every coefficient by ``scale``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return grid.with_values(grid.values / scale)


@dataclass(frozen=True)
class ScaleSearchConfig:
    s_min: float = 2.0 ** -4
    s_max: float = 2.0 ** 4
    num_points: int = 33
    spacing: str = "log"
    refine: bool = False
    eval_sequences: int = 16
    refine_iters: int = 12

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max:
            raise ValueError("need 0 < s_min < s_max")
        if self.num_points < 3:
            raise ValueError("num_points must be >= 3")
        if self.spacing not in ("log", "linear"):
            raise ValueError("spacing must be 'log' or 'linear'")

    def points(self) -> np.ndarray:
        if self.spacing == "log":
            return np.geomspace(self.s_min, self.s_max, self.num_points)
        return np.linspace(self.s_min, self.s_max, self.num_points)


def eval_frame_pairs(grid: ChannelGrid, count: int) -> list[tuple[int, int]]:
    """Up to ``count`` consecutive frame pairs spread evenly over the grid."""
    if grid.num_frames < 2:
        raise ValueError("grid needs at least two frames")
    t0s = np.unique(np.linspace(0, grid.num_frames - 2, count).round().astype(int))
    return [(int(t), int(t) + 1) for t in t0s]


def mean_perplexity(model: nn.Model, vocab: Vocabulary, grid: ChannelGrid, scale: float,
                    pairs) -> float:
    scaled = scale_channel(grid, scale)
    frames = sorted({f for p in pairs for f in p})
    tokens = np.zeros(grid.shape, dtype=np.int64)
    tokens[:, frames, :] = vocab.encode_array(scaled.values[:, frames, :])
    pps = [pseudo_log_likelihood(model, assemble_sequence(scaled, p, vocab, tokens)).perplexity
           for p in pairs]
    return float(np.mean(pps))


def find_scale(model: nn.Model, vocab: Vocabulary, grid: ChannelGrid,
               search: ScaleSearchConfig = ScaleSearchConfig()):
    """Scale minimising the mean perplexity of ``grid / S``.

    Returns ``(S_opt, trace)`` with ``trace`` the ``(S, PP)`` pairs in grid
    order.  With ``refine`` a golden-section search in log-scale brackets the
    best grid point by its neighbours.
    """
    pairs = eval_frame_pairs(grid, search.eval_sequences)
    trace = [(float(s), mean_perplexity(model, vocab, grid, float(s), pairs)) for s in search.points()]
    finite = [(s, pp) for s, pp in trace if math.isfinite(pp)]
    if not finite:
        raise ScaleSearchError("all candidate scales gave infinite perplexity")
    best_s, best_pp = min(finite, key=lambda t: (t[1], t[0]))
    if search.refine:
        k = [s for s, _ in trace].index(best_s)
        lo = trace[max(k - 1, 0)][0]
        hi = trace[min(k + 1, len(trace) - 1)][0]
        s_ref, pp_ref = _golden_section(lambda x: mean_perplexity(model, vocab, grid, math.exp(x), pairs),
                                        math.log(lo), math.log(hi), search.refine_iters)
        if pp_ref < best_pp:
            best_s, best_pp = math.exp(s_ref), pp_ref
    return best_s, trace


def _golden_section(f, a, b, iters):
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def write_scale_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for s, pp in trace:
            fh.write(f"{float(s)!r}\t{float(pp)!r}\n")


def transfer_adapt(model: nn.Model, grids, vocab: Vocabulary, pcfg: PretrainConfig,
                   source_map: FeatureMap | None, target_map: FeatureMap | None = None,
                   **kwargs) -> PretrainResult:
    """Continue pretraining on (already rescaled) target data.

    The source feature map is mandatory; the target map, when given, must use
    the same domain ids.
    """
    if source_map is None:
        raise FeatureMapMismatch("the source feature map is required for transfer")
    if isinstance(grids, ChannelGrid):
        grids = [grids]
    if target_map is None:
        target_map = FeatureMap.for_grid(grids[0])
    if not source_map.compatible_with(target_map):
        raise FeatureMapMismatch(f"source feature dims {source_map.dims()} differ from target {target_map.dims()}")
    return pretrain(grids, vocab, model.config, pcfg, params=model.params, **kwargs)


@dataclass
class Reconstruction:
    position: int
    token_id: int
    value: complex
    probability: float


def masked_reconstruct(model: nn.Model, vocab: Vocabulary, seq: SequenceExample, positions) -> list[Reconstruction]:
    """Mask ``positions`` together, then take the most likely channel token at each."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return []
    if np.any(seq.freq_ids[positions] == 0):
        raise ValueError("cannot mask special-token positions")
    masked = seq.copy()
    masked.token_ids[positions] = MASK
    trace = model.forward(stack_sequences([masked]))
    logits = nn.mlm_logits(trace, model.params, (np.zeros_like(positions), positions))
    probs = nn.softmax(logits)
    ids = probs[:, NUM_SPECIALS:].argmax(1) + NUM_SPECIALS
    values = vocab.decode_array(ids)
    return [Reconstruction(int(p), int(i), complex(v), float(probs[k, i]))
            for k, (p, i, v) in enumerate(zip(positions, ids, values))]


def apply_reconstruction(seq: SequenceExample, recs) -> SequenceExample:
    out = seq.copy()
    for r in recs:
        out.token_ids[r.position] = r.token_id
    return out


def paraphrase_channel(model: nn.Model, vocab: Vocabulary, seq: SequenceExample) -> np.ndarray:
    """Regenerate every channel token in sequence order, feeding predictions forward."""
    cur = seq.copy()
    for p in cur.channel_positions:
        (rec,) = masked_reconstruct(model, vocab, cur, [p])
        cur.token_ids[p] = rec.token_id
    return vocab.decode_array(cur.token_ids[cur.channel_positions])
