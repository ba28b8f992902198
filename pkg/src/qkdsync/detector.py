"""Gated avalanche-photodiode statistics for window scans.

A scan tiles time into contiguous windows; each window is polled ``n_polls``
times and the registered photoelectrons plus dark pulses are accumulated.

Randomness for a scan is drawn block by block: window ``i`` belongs to block
``i // BLOCK_WINDOWS`` and that block's generator is seeded from
``SeedSequence(entropy, spawn_key + (block,))``. Counts therefore depend only
on the master seed and the window index, never on how blocks are spread over
workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np
from scipy.special import ndtr

from .optics import Profile, PulseArrival, PulseTrainConfig

BLOCK_WINDOWS = 1 << 16


class DetectorMode(str, Enum):
    LINEAR = "linear"
    GEIGER = "geiger"


@dataclass(frozen=True)
class SpadConfig:
    efficiency: float = 0.10
    dark_count_rate_hz: float = 2000.0
    mode: DetectorMode = DetectorMode.LINEAR
    dead_time_ns: float = 0.0
    gate_width_ns: float = 2.5  # key-distribution gate

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not self.dark_count_rate_hz >= 0:
            raise ValueError("dark_count_rate_hz must be non-negative")
        if not self.dead_time_ns >= 0:
            raise ValueError("dead_time_ns must be non-negative")
        if not self.gate_width_ns > 0:
            raise ValueError("gate_width_ns must be positive")
        object.__setattr__(self, "mode", DetectorMode(self.mode))

    def dark_probability(self, window_ns: float | None = None) -> float:
        """Mean dark pulses in one window (``gate_width_ns`` by default)."""
        width = self.gate_width_ns if window_ns is None else window_ns
        return self.dark_count_rate_hz * width * 1e-9


@dataclass(frozen=True)
class WindowObservation:
    window_index: int
    registered: int


@dataclass(frozen=True, eq=False)
class WindowScan:
    """Counts of a contiguous run of windows starting at ``start_ns``."""

    start_ns: float
    t_w_ns: float
    n_polls: int
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.counts)

    def __iter__(self) -> Iterator[WindowObservation]:
        for i, c in enumerate(self.counts.tolist()):
            yield WindowObservation(i, c)

    def window_start(self, index: int) -> float:
        return self.start_ns + index * self.t_w_ns

    def window_center(self, index: int) -> float:
        return self.start_ns + (index + 0.5) * self.t_w_ns


def _pulse_images(center_ns: float, period_ns: float | None) -> list[float]:
    if period_ns is None:
        return [center_ns]
    return [center_ns - period_ns, center_ns, center_ns + period_ns]


def overlap_fraction(
    edges_ns: np.ndarray,
    center_ns: float,
    train: PulseTrainConfig,
    period_ns: float | None = None,
) -> np.ndarray:
    """Fraction of the pulse profile falling between consecutive ``edges_ns``.

    With ``period_ns`` the pulse is treated as periodic and the neighbouring
    pulses are included, so windows past the frame end see the next pulse.
    """
    edges = np.asarray(edges_ns, dtype=float)
    frac = np.zeros(len(edges) - 1)
    for c in _pulse_images(center_ns, period_ns):
        if train.profile is Profile.GAUSSIAN:
            cdf = ndtr((edges - c) / train.sigma_ns)
            frac += np.diff(cdf)
        else:
            half = 0.5 * train.duration_ns
            clipped = np.clip(edges, c - half, c + half)
            frac += np.diff(clipped) / train.duration_ns
    return np.clip(frac, 0.0, 1.0)


def expected_window_pe(
    arrival: PulseArrival,
    train: PulseTrainConfig,
    spad: SpadConfig,
    window_start_ns: float,
    t_w_ns: float,
    period_ns: float | None = None,
) -> float:
    """Mean signal photoelectrons registered per poll of one window."""
    if not t_w_ns > 0:
        raise ValueError("t_w_ns must be positive")
    edges = np.array([window_start_ns, window_start_ns + t_w_ns])
    f = overlap_fraction(edges, arrival.time_ns, train, period_ns)[0]
    return spad.efficiency * arrival.mean_photons * float(f)


def _expected_counts(mean_signal_pe, spad: SpadConfig, t_w_ns: float, n_polls: int):
    per_poll = np.asarray(mean_signal_pe, dtype=float) + spad.dark_probability(t_w_ns)
    if spad.mode is DetectorMode.LINEAR:
        return n_polls * per_poll
    return n_polls * -np.expm1(-per_poll)


def _draw_counts(mean_signal_pe, spad: SpadConfig, t_w_ns: float, n_polls: int, rng: np.random.Generator):
    per_poll = np.asarray(mean_signal_pe, dtype=float) + spad.dark_probability(t_w_ns)
    if spad.mode is DetectorMode.LINEAR:
        return rng.poisson(n_polls * per_poll)
    return rng.binomial(n_polls, -np.expm1(-per_poll))


def sample_window_count(
    mean_signal_pe: float,
    spad: SpadConfig,
    t_w_ns: float,
    n_polls: int,
    rng: np.random.Generator,
) -> int:
    """Accumulated count of one window over ``n_polls`` polls.

    Linear mode: Poisson with mean ``n_polls * (signal + dark * t_w)``.
    Geiger mode: at most one click per poll, so a binomial over the polls.
    """
    if not mean_signal_pe >= 0:
        raise ValueError(f"mean signal must be non-negative, got {mean_signal_pe}")
    if n_polls < 1:
        raise ValueError("n_polls must be >= 1")
    return int(_draw_counts(mean_signal_pe, spad, t_w_ns, n_polls, rng))


def block_generator(seed: np.random.SeedSequence, block: int) -> np.random.Generator:
    child = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (block,))
    return np.random.default_rng(child)


def gate_scan(
    arrival: PulseArrival,
    train: PulseTrainConfig,
    spad: SpadConfig,
    scan_start_ns: float,
    t_w_ns: float,
    n_windows: int,
    n_polls: int,
    seed: np.random.SeedSequence | int,
    *,
    period_ns: float | None = None,
    workers: int = 1,
    stochastic: bool = True,
) -> WindowScan:
    """Poll ``n_windows`` contiguous windows and return their counts.

    ``stochastic=False`` returns the rounded expected counts instead of a draw.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    if n_polls < 1:
        raise ValueError("n_polls must be >= 1")
    if not (t_w_ns > 0 and math.isfinite(scan_start_ns)):
        raise ValueError("scan must start at a finite time with positive window width")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    scale = spad.efficiency * arrival.mean_photons

    def block_counts(block: int) -> np.ndarray:
        lo = block * BLOCK_WINDOWS
        hi = min(n_windows, lo + BLOCK_WINDOWS)
        edges = scan_start_ns + t_w_ns * np.arange(lo, hi + 1, dtype=float)
        signal = scale * overlap_fraction(edges, arrival.time_ns, train, period_ns)
        if not stochastic:
            return np.rint(_expected_counts(signal, spad, t_w_ns, n_polls)).astype(np.int64)
        return _draw_counts(signal, spad, t_w_ns, n_polls, block_generator(seed, block)).astype(np.int64)

    n_blocks = -(-n_windows // BLOCK_WINDOWS)
    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block_counts, range(n_blocks)))
    else:
        parts = [block_counts(b) for b in range(n_blocks)]
    return WindowScan(scan_start_ns, t_w_ns, n_polls, np.concatenate(parts))
