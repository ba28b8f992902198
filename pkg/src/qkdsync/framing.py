"""Key-mode frame grid and the integrity check the stations run against it."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class FrameStatus(str, Enum):
    OK = "ok"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class FrameSpec:
    """Pulse slots at ``frame_period_ns * f + pulse_spacing_ns * j`` for j < pulses_per_frame."""

    pulses_per_frame: int = 500
    frame_period_ns: float = 400_000.0
    timing_tolerance_ps: float = 50.0
    pulse_spacing_ns: float = 200.0
    miss_budget: float = 0.5

    def __post_init__(self) -> None:
        if self.pulses_per_frame < 1:
            raise ValueError("pulses_per_frame must be >= 1")
        if not (self.frame_period_ns > 0 and self.timing_tolerance_ps > 0 and self.pulse_spacing_ns > 0):
            raise ValueError("frame timings must be positive")
        if self.pulses_per_frame * self.pulse_spacing_ns > self.frame_period_ns:
            raise ValueError("pulse train does not fit in the frame period")
        if not 0.0 <= self.miss_budget <= 1.0:
            raise ValueError("miss_budget must lie in [0, 1]")

    @property
    def tolerance_ns(self) -> float:
        return self.timing_tolerance_ps * 1e-3

    def slot_times(self, n_pulses: int) -> np.ndarray:
        """Times of the first ``n_pulses`` slots of the session."""
        i = np.arange(n_pulses)
        return (i // self.pulses_per_frame) * self.frame_period_ns + (i % self.pulses_per_frame) * self.pulse_spacing_ns


def nearest_slot(spec: FrameSpec, times) -> tuple[np.ndarray, np.ndarray]:
    """Global slot index nearest each time and the absolute deviation from it (ns)."""
    t = np.asarray(times, dtype=float)
    frame = np.floor(t / spec.frame_period_ns)
    phase = t - frame * spec.frame_period_ns
    j = np.clip(np.rint(phase / spec.pulse_spacing_ns), 0, spec.pulses_per_frame - 1)
    dev = np.abs(phase - j * spec.pulse_spacing_ns)
    # slot 0 of the following frame
    dev_next = np.abs(spec.frame_period_ns - phase)
    use_next = dev_next < dev
    frame = np.where(use_next, frame + 1, frame)
    j = np.where(use_next, 0, j)
    dev = np.where(use_next, dev_next, dev)
    return (frame * spec.pulses_per_frame + j).astype(np.int64), dev


def off_grid(spec: FrameSpec, times) -> np.ndarray:
    return nearest_slot(spec, times)[1] > spec.tolerance_ns


def frame_integrity_check(expected: FrameSpec, observed_click_times, n_frames: int | None = None) -> FrameStatus:
    """Compare observed pulse times with the frame grid.

    A mismatch is reported when any time sits further than the timing
    tolerance from its nearest slot, or when more than ``miss_budget`` of the
    slots in the observed frames are empty.
    """
    t = np.sort(np.asarray(observed_click_times, dtype=float))
    if t.size == 0:
        return FrameStatus.OK if n_frames in (None, 0) or expected.miss_budget >= 1.0 else FrameStatus.MISMATCH
    slots, dev = nearest_slot(expected, t)
    if np.any(dev > expected.tolerance_ns):
        return FrameStatus.MISMATCH
    if n_frames is None:
        n_frames = int(slots.max() // expected.pulses_per_frame) + 1
    total = n_frames * expected.pulses_per_frame
    filled = np.unique(slots[slots < total]).size
    if 1.0 - filled / total > expected.miss_budget:
        return FrameStatus.MISMATCH
    return FrameStatus.OK
