"""Synthetic multi-domain CFR generator.

Channels are built from a tapped delay line whose tap gains are
sum-of-sinusoids Jakes fading processes.  Spatial correlation between
receive antennas uses a Kronecker square-root mixing of independent tap
processes.  All randomness comes from a counter-based generator (Philox)
keyed on ``(seed, tap, antenna)`` so a grid is reproducible bit for bit no
matter in which order taps or antennas are evaluated.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
NUM_SINUSOIDS = 16
MAX_ANTENNAS = 8

AXES = {"frequency": 0, "time": 1, "antenna": 2}


@dataclass(frozen=True)
class TapSpec:
    delay: float  # seconds
    power: float  # linear


def exponential_pdp(rms_delay: float, num_taps: int = 8, spacing: float | None = None) -> list[TapSpec]:
    """Exponentially decaying power-delay profile sampled on a uniform delay grid.

    With ``spacing`` left unset the taps span roughly five time constants.
    """
    if spacing is None:
        spacing = 5.0 * rms_delay / max(num_taps - 1, 1)
    delays = np.arange(num_taps) * spacing
    powers = np.exp(-delays / rms_delay) if rms_delay > 0 else np.eye(1, num_taps)[0]
    powers = powers / powers.sum()
    return [TapSpec(float(d), float(p)) for d, p in zip(delays, powers)]


def default_taps() -> list[TapSpec]:
    return exponential_pdp(0.5e-6, num_taps=6)


@dataclass(frozen=True)
class SimConfig:
    num_subcarriers: int = 200
    subcarrier_spacing: float = 90e3
    num_frames: int = 2
    frame_interval: float = 1e-3
    num_antennas: int = 2
    carrier_freq: float = 1.9e9
    user_speed: float = 1.5
    taps: tuple[TapSpec, ...] = field(default_factory=lambda: tuple(default_taps()))
    antenna_correlation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(self.taps))

    @property
    def max_doppler(self) -> float:
        return self.user_speed * self.carrier_freq / SPEED_OF_LIGHT

    def normalized_powers(self) -> np.ndarray:
        p = np.array([t.power for t in self.taps], dtype=np.float64)
        return p / p.sum()

    def validate(self) -> None:
        reals = [self.subcarrier_spacing, self.frame_interval, self.carrier_freq,
                 self.user_speed, self.antenna_correlation]
        reals += [t.delay for t in self.taps] + [t.power for t in self.taps]
        if not all(math.isfinite(x) for x in reals):
            raise ValueError("SimConfig contains non-finite values")
        if self.num_subcarriers < 1 or self.num_frames < 1:
            raise ValueError("num_subcarriers and num_frames must be >= 1")
        if not 1 <= self.num_antennas <= MAX_ANTENNAS:
            raise ValueError(f"num_antennas must be in 1..{MAX_ANTENNAS}, got {self.num_antennas}")
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be > 0")
        if not 0.0 <= self.antenna_correlation <= 1.0:
            raise ValueError("antenna_correlation must lie in [0, 1]")
        if not self.taps:
            raise ValueError("at least one tap is required")
        if any(t.delay < 0 or t.power < 0 for t in self.taps):
            raise ValueError("tap delays and powers must be nonnegative")
        if sum(t.power for t in self.taps) <= 0:
            raise ValueError("total tap power must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """Complex CFR indexed by (subcarrier, frame, antenna)."""

    values: np.ndarray
    frame_interval: float = 1e-3
    subcarrier_spacing: float = 90e3
    config: SimConfig | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 3:
            raise ValueError(f"grid values must be 3-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def num_subcarriers(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def num_antennas(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray) -> ChannelGrid:
        return replace(self, values=values)


def antenna_mixing(num_antennas: int, rho: float) -> np.ndarray:
    """Lower-triangular square root of the exponential correlation matrix rho**|i-j|.

    For two antennas this is [[1, 0], [rho, sqrt(1 - rho**2)]].
    """
    idx = np.arange(num_antennas)
    corr = rho ** np.abs(idx[:, None] - idx[None, :])
    if rho >= 1.0:
        mix = np.zeros((num_antennas, num_antennas))
        mix[:, 0] = 1.0
        return mix
    return np.linalg.cholesky(corr)


def _tap_stream(seed: int, tap: int, antenna: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(tap, antenna))
    return np.random.Generator(np.random.Philox(ss))


def _jakes_process(times: np.ndarray, max_doppler: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-power sum-of-sinusoids fading process sampled at ``times``."""
    m = np.arange(NUM_SINUSOIDS)
    theta = rng.uniform(-np.pi, np.pi)
    phases = rng.uniform(-np.pi, np.pi, size=NUM_SINUSOIDS)
    arrival = (2.0 * np.pi * m + theta) / NUM_SINUSOIDS
    doppler = max_doppler * np.cos(arrival)
    arg = 2.0 * np.pi * doppler[None, :] * times[:, None] + phases[None, :]
    return np.exp(1j * arg).sum(axis=1) / math.sqrt(NUM_SINUSOIDS)


def tap_gains(config: SimConfig) -> np.ndarray:
    """Correlated tap gains, shape (num_taps, num_frames, num_antennas)."""
    powers = config.normalized_powers()
    times = np.arange(config.num_frames) * config.frame_interval
    fd = config.max_doppler
    na = config.num_antennas
    indep = np.empty((len(powers), config.num_frames, na), dtype=np.complex128)
    for tap in range(len(powers)):
        for ant in range(na):
            indep[tap, :, ant] = _jakes_process(times, fd, _tap_stream(config.seed, tap, ant))
    mix = antenna_mixing(na, config.antenna_correlation)
    gains = np.einsum("ab,ltb->lta", mix, indep)
    return gains * np.sqrt(powers)[:, None, None]


def generate_channel(config: SimConfig) -> ChannelGrid:
    """Generate a CFR grid ``H[k, n, a] = sum_l g_la(t_n) exp(-2j pi f_k tau_l)``."""
    config.validate()
    gains = tap_gains(config)
    freqs = np.arange(config.num_subcarriers) * config.subcarrier_spacing
    delays = np.array([t.delay for t in config.taps])
    steering = np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])
    values = np.einsum("kl,lna->kna", steering, gains)
    return ChannelGrid(values, config.frame_interval, config.subcarrier_spacing, config)


def analytic_frequency_correlation(config: SimConfig, num_lags: int | None = None) -> np.ndarray:
    """Expected frequency correlation sum_l p_l exp(-2j pi dk df tau_l) for lags 0..num_lags-1."""
    if num_lags is None:
        num_lags = config.num_subcarriers
    lags = np.arange(num_lags) * config.subcarrier_spacing
    delays = np.array([t.delay for t in config.taps])
    return np.exp(-2j * np.pi * lags[:, None] * delays[None, :]) @ config.normalized_powers()


def inject_contamination(grid: ChannelGrid, frame_index: int, interferer: ChannelGrid,
                         sir_db: float) -> ChannelGrid:
    """Add a scaled interferer to one frame so that the frame's SIR equals ``sir_db``.

    ``interferer`` may be a full grid (its frame ``frame_index`` is used, or
    frame 0 if it only holds one frame).
    """
    ns, nt, na = grid.shape
    if not 0 <= frame_index < nt:
        raise IndexError(f"frame_index {frame_index} out of range for {nt} frames")
    iv = interferer.values
    if iv.shape[0] != ns or iv.shape[2] != na:
        raise ValueError(f"interferer shape {iv.shape} incompatible with grid {grid.shape}")
    src = iv[:, frame_index if iv.shape[1] > frame_index else 0, :]
    out = grid.values.copy()
    if math.isinf(sir_db) and sir_db > 0:
        return grid.with_values(out)
    sig_pow = np.mean(np.abs(out[:, frame_index, :]) ** 2)
    int_pow = np.mean(np.abs(src) ** 2)
    if int_pow == 0:
        raise ValueError("interferer frame has zero power")
    alpha = math.sqrt(sig_pow / (int_pow * 10.0 ** (sir_db / 10.0)))
    out[:, frame_index, :] += alpha * src
    return grid.with_values(out)


def empirical_autocorrelation(grid: ChannelGrid, axis: str) -> np.ndarray:
    """Lag correlation along ``axis`` averaged over the other two axes.

    ``r[k] = mean(x[i+k] * conj(x[i])) / mean(|x|**2)``; ``r[0] == 1``.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    x = np.moveaxis(grid.values, AXES[axis], 0)
    n = x.shape[0]
    if n == 1:
        return np.ones(1, dtype=np.complex128)
    power = np.mean(np.abs(x) ** 2)
    if power == 0:
        raise ValueError("grid has zero power")
    r = np.empty(n, dtype=np.complex128)
    for k in range(n):
        r[k] = np.mean(x[k:] * np.conj(x[: n - k])) / power
    r[0] = 1.0
    return r


def ensemble_autocorrelation(grids, axis: str) -> np.ndarray:
    """Lag correlation along ``axis`` pooled over many realizations.

    Lag products and power are summed over all grids before dividing.
    Averaging per-grid normalised curves instead is biased low whenever the
    per-realization power fluctuates, as it does with few taps.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    num = cnt = None
    power = 0.0
    count = 0
    for g in grids:
        x = np.moveaxis(g.values, AXES[axis], 0)
        n = x.shape[0]
        if num is None:
            num, cnt = np.zeros(n, dtype=np.complex128), np.zeros(n)
        elif n != num.size:
            raise ValueError("grids differ in extent along the correlation axis")
        for k in range(n):
            num[k] += np.sum(x[k:] * np.conj(x[: n - k]))
            cnt[k] += x[k:].size
        power += np.sum(np.abs(x) ** 2)
        count += x.size
    if num is None:
        raise ValueError("no grids given")
    if power == 0:
        raise ValueError("grids have zero power")
    r = (num / cnt) / (power / count)
    r[0] = 1.0
    return r


# -- dataset file ------------------------------------------------------------

_MAGIC = b"CFRD"
_HEADER = struct.Struct("<4sIIIIdd")


def save_grid(grid: ChannelGrid, path) -> None:
    ns, nt, na = grid.shape
    header = _HEADER.pack(_MAGIC, 1, ns, nt, na, grid.frame_interval, grid.subcarrier_spacing)
    # subcarrier fastest, antenna middle, frame slowest
    ordered = np.ascontiguousarray(np.transpose(grid.values, (1, 2, 0)).astype(np.complex64))
    body = ordered.view(np.float32).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path) -> ChannelGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated CFRD header")
    magic, version, ns, nt, na, frame_interval, spacing = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a CFRD file")
    if version != 1:
        raise ValueError(f"{path}: unsupported CFRD version {version}")
    count = ns * nt * na * 2
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} floats, found {body.size}")
    vals = body.astype(np.float32).view(np.complex64).reshape(nt, na, ns)
    return ChannelGrid(np.transpose(vals, (2, 0, 1)).astype(np.complex128), frame_interval, spacing)
