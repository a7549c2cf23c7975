"""Channel vocabulary and multi-domain sequence assembly.

Complex CFR coefficients are rounded to two significant decimal digits per
component, counted, and the most frequent values become the channel
vocabulary.  Sequences interleave [CLS]/[SEP] specials with per-(frame,
antenna) runs of subcarrier tokens; every channel position carries its
frequency, time and antenna feature ids for the multi-domain embedding.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chansim import ChannelGrid

PAD, UNK, CLS, SEP, MASK = range(5)
NUM_SPECIALS = 5
SPECIAL_NAMES = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class SpecialTokenError(ValueError):
    """Raised when a special token id is used where a channel value is required."""


def _round2(x: float) -> float:
    if x == 0.0:
        return 0.0
    # '%.1e' rounds the exact binary value half-to-even; float() then repr() gives the shortest string
    return float(format(x, ".1e"))


def quantize(value: complex) -> complex:
    """Round real and imaginary parts independently to two significant digits."""
    value = complex(value)
    if not (math.isfinite(value.real) and math.isfinite(value.imag)):
        raise ValueError(f"cannot quantize non-finite value {value!r}")
    return complex(_round2(value.real), _round2(value.imag))


def quantize_array(values: np.ndarray) -> np.ndarray:
    """Vectorised ``quantize`` (evaluated once per distinct input)."""
    values = np.asarray(values, dtype=np.complex128)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    parts = np.concatenate([values.real.ravel(), values.imag.ravel()])
    uniq, inv = np.unique(parts, return_inverse=True)
    rounded = np.array([_round2(float(u)) for u in uniq])[inv]
    n = values.size
    return (rounded[:n] + 1j * rounded[n:]).reshape(values.shape)


@dataclass(eq=False)
class Vocabulary:
    """Special tokens 0-4 followed by channel centroids ordered by descending count."""

    centroids: np.ndarray  # complex, channel entries only
    counts: np.ndarray  # uint64

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.complex128)
        self.counts = np.asarray(self.counts, dtype=np.uint64)
        self._index = {(c.real, c.imag): i + NUM_SPECIALS for i, c in enumerate(self.centroids)}
        if len(self._index) != len(self.centroids):
            raise ValueError("duplicate centroids in vocabulary")

    @property
    def size(self) -> int:
        return NUM_SPECIALS + len(self.centroids)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (np.array_equal(self.centroids, other.centroids)
                and np.array_equal(self.counts, other.counts))

    def lookup(self, value: complex) -> int | None:
        return self._index.get((value.real, value.imag))

    def encode(self, value: complex) -> int:
        return int(self.encode_array(np.array([value]))[0])

    def encode_array(self, values: np.ndarray) -> np.ndarray:
        """Quantize then map to token ids, falling back to the nearest centroid."""
        if len(self.centroids) == 0:
            raise ValueError("vocabulary has no channel entries")
        q = quantize_array(values)
        flat = q.ravel()
        ids = np.fromiter((self._index.get((z.real, z.imag), -1) for z in flat.tolist()),
                          dtype=np.int64, count=flat.size)
        miss = np.flatnonzero(ids < 0)
        for start in range(0, miss.size, 4096):
            chunk = miss[start:start + 4096]
            d = np.abs(flat[chunk, None] - self.centroids[None, :])
            ids[chunk] = np.argmin(d, axis=1) + NUM_SPECIALS  # first minimum -> lowest id
        return ids.reshape(q.shape)

    def decode(self, token_id: int) -> complex:
        return complex(self.decode_array(np.array([token_id]))[0])

    def decode_array(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < NUM_SPECIALS):
            raise SpecialTokenError("special tokens have no channel value")
        if np.any(ids >= self.size):
            raise IndexError("token id out of vocabulary range")
        return self.centroids[ids - NUM_SPECIALS]


def build_vocabulary(grids, size: int) -> Vocabulary:
    """Keep the ``size - 5`` most frequent quantized values.

    Ties in count are broken by (re, im) ascending.  If the corpus has fewer
    distinct values the vocabulary is simply smaller.
    """
    if size <= NUM_SPECIALS:
        raise ValueError(f"vocabulary size must exceed {NUM_SPECIALS}")
    if isinstance(grids, ChannelGrid):
        grids = [grids]
    if not grids:
        raise ValueError("at least one grid is required")
    counts: Counter = Counter()
    for g in grids:
        vals = g.values if isinstance(g, ChannelGrid) else np.asarray(g)
        q = quantize_array(vals).ravel()
        pairs = np.stack([q.real, q.imag], axis=1)
        uniq, cnt = np.unique(pairs, axis=0, return_counts=True)
        for (re, im), c in zip(uniq.tolist(), cnt.tolist()):
            counts[(re, im)] += c
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    ranked = ranked[: size - NUM_SPECIALS]
    centroids = np.array([complex(re, im) for (re, im), _ in ranked], dtype=np.complex128)
    return Vocabulary(centroids, np.array([c for _, c in ranked], dtype=np.uint64))


def save_vocabulary(vocab: Vocabulary, path) -> None:
    lines = [f"RCMV 1 V={vocab.size}"]
    for i, (c, n) in enumerate(zip(vocab.centroids, vocab.counts)):
        lines.append(f"{i + NUM_SPECIALS}\t{float(c.real)!r}\t{float(c.imag)!r}\t{int(n)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_vocabulary(path) -> Vocabulary:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("RCMV 1 V="):
        raise ValueError(f"{path}: not a vocabulary file")
    size = int(lines[0].split("V=", 1)[1])
    cents, counts = [], []
    for expected, line in enumerate(lines[1:], start=NUM_SPECIALS):
        tid, re, im, n = line.split("\t")
        if int(tid) != expected:
            raise ValueError(f"{path}: non-contiguous token id {tid}")
        cents.append(complex(float(re), float(im)))
        counts.append(int(n))
    vocab = Vocabulary(np.array(cents, dtype=np.complex128), np.array(counts, dtype=np.uint64))
    if vocab.size != size:
        raise ValueError(f"{path}: header says V={size}, found {vocab.size}")
    return vocab


# -- sequences ---------------------------------------------------------------

@dataclass(eq=False)
class SequenceExample:
    token_ids: np.ndarray
    freq_ids: np.ndarray
    time_ids: np.ndarray
    antenna_ids: np.ndarray

    @property
    def is_special(self) -> np.ndarray:
        return self.freq_ids == 0

    @property
    def channel_positions(self) -> np.ndarray:
        return np.flatnonzero(self.freq_ids > 0)

    def __len__(self) -> int:
        return len(self.token_ids)

    def copy(self) -> SequenceExample:
        return SequenceExample(self.token_ids.copy(), self.freq_ids.copy(),
                               self.time_ids.copy(), self.antenna_ids.copy())

    def second_frame_positions(self) -> np.ndarray:
        return np.flatnonzero(self.time_ids == 2)


def sequence_layout(num_subcarriers: int, num_frames: int = 2, num_antennas: int = 2):
    """Domain id vectors for the time-major layout [CLS] (T0,A0) [SEP] (T0,A1) [SEP] ...

    Returns ``(freq_ids, time_ids, antenna_ids)``; specials have all ids 0.
    """
    f, t, a = [0], [0], [0]
    for ti in range(num_frames):
        for ai in range(num_antennas):
            f += list(range(1, num_subcarriers + 1)) + [0]
            t += [ti + 1] * num_subcarriers + [0]
            a += [ai + 1] * num_subcarriers + [0]
    return np.array(f), np.array(t), np.array(a)


def layout_tokens(channel_ids: np.ndarray) -> np.ndarray:
    """Interleave channel token ids of shape (frames, antennas, subcarriers) with specials."""
    nt, na, ns = channel_ids.shape
    out = [CLS]
    for ti in range(nt):
        for ai in range(na):
            out.extend(channel_ids[ti, ai].tolist())
            out.append(SEP)
    return np.array(out, dtype=np.int64)


def assemble_sequence(grid: ChannelGrid, frame_pair, vocab: Vocabulary,
                      token_grid: np.ndarray | None = None) -> SequenceExample:
    """Build the sequence for two frames of ``grid``.

    ``token_grid`` (shape of ``grid``) may carry pre-encoded ids to avoid
    re-quantizing the same grid for every pair.
    """
    nt = grid.num_frames
    frames = [int(x) for x in frame_pair]
    for fr in frames:
        if not 0 <= fr < nt:
            raise IndexError(f"frame {fr} out of range for {nt} frames")
    if token_grid is None:
        ids = vocab.encode_array(grid.values[:, frames, :])
    else:
        ids = token_grid[:, frames, :]
    ch = np.transpose(ids, (1, 2, 0))
    f, t, a = sequence_layout(grid.num_subcarriers, len(frames), grid.num_antennas)
    return SequenceExample(layout_tokens(ch), f, t, a)


def sequence_channels(seq: SequenceExample, num_subcarriers: int, num_antennas: int,
                      vocab: Vocabulary) -> np.ndarray:
    """Decode channel tokens back to a (subcarrier, frame, antenna) complex array."""
    pos = seq.channel_positions
    vals = vocab.decode_array(seq.token_ids[pos])
    out = np.zeros((num_subcarriers, int(seq.time_ids.max()), num_antennas), dtype=np.complex128)
    out[seq.freq_ids[pos] - 1, seq.time_ids[pos] - 1, seq.antenna_ids[pos] - 1] = vals
    return out


def stack_sequences(seqs) -> dict[str, np.ndarray]:
    """Batch arrays of shape (B, N) keyed by field name."""
    return {
        "token_ids": np.stack([s.token_ids for s in seqs]),
        "freq_ids": np.stack([s.freq_ids for s in seqs]),
        "time_ids": np.stack([s.time_ids for s in seqs]),
        "antenna_ids": np.stack([s.antenna_ids for s in seqs]),
    }


# -- feature map -------------------------------------------------------------

@dataclass
class FeatureMap:
    """Physical meaning of each nonzero domain feature id."""

    frequency: dict[int, float]
    time: dict[int, float]
    antenna: dict[int, str]

    @classmethod
    def for_grid(cls, grid: ChannelGrid, num_frames: int = 2) -> FeatureMap:
        base = grid.config.carrier_freq if grid.config is not None else 0.0
        freq = {k + 1: base + k * grid.subcarrier_spacing for k in range(grid.num_subcarriers)}
        time = {n + 1: n * grid.frame_interval for n in range(num_frames)}
        ant = {a + 1: f"A{a}" for a in range(grid.num_antennas)}
        return cls(freq, time, ant)

    def dims(self) -> tuple[int, int, int]:
        return len(self.frequency), len(self.time), len(self.antenna)

    def compatible_with(self, other: FeatureMap) -> bool:
        return (sorted(self.frequency) == sorted(other.frequency)
                and sorted(self.time) == sorted(other.time)
                and sorted(self.antenna) == sorted(other.antenna))

    def covers(self, seq: SequenceExample) -> bool:
        pos = seq.channel_positions
        return (set(seq.freq_ids[pos].tolist()) <= set(self.frequency)
                and set(seq.time_ids[pos].tolist()) <= set(self.time)
                and set(seq.antenna_ids[pos].tolist()) <= set(self.antenna))


def save_feature_map(fmap: FeatureMap, path) -> None:
    lines = []
    for k, v in sorted(fmap.frequency.items()):
        lines.append(f"frequency\t{k}\t{float(v)!r}")
    for k, v in sorted(fmap.time.items()):
        lines.append(f"time\t{k}\t{float(v)!r}")
    for k, v in sorted(fmap.antenna.items()):
        lines.append(f"antenna\t{k}\t{v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_feature_map(path) -> FeatureMap:
    fmap = FeatureMap({}, {}, {})
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        domain, k, meaning = line.split("\t")
        if domain == "frequency":
            fmap.frequency[int(k)] = float(meaning)
        elif domain == "time":
            fmap.time[int(k)] = float(meaning)
        elif domain == "antenna":
            fmap.antenna[int(k)] = meaning
        else:
            raise ValueError(f"{path}: unknown domain {domain!r}")
    return fmap
