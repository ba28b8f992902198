"""Three-stage signal-window search and detection-probability oracles.

Stage 1 polls every window of the frame ``T_s``; each later stage re-polls
the previous winner (padded by ``guard_windows`` parent windows per side) at
a finer window width. The window with the largest count wins, ties going to
the lowest index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom, binomtest

from .detector import SpadConfig, WindowScan, gate_scan
from .optics import (
    ChannelTopology,
    Mode,
    PulseArrival,
    PulseTrainConfig,
    arrival_at,
    propagate_pulse,
    round_trip_schedule,
)

BRUTEFORCE_MAX_OUTCOMES = 10**7


class CapacityError(RuntimeError):
    """Raised when exhaustive enumeration would be too large."""


@dataclass(frozen=True)
class StageConfig:
    t_w_ps: float
    n_polls: int
    guard_windows: int = 1

    def __post_init__(self) -> None:
        if not self.t_w_ps > 0:
            raise ValueError("t_w_ps must be positive")
        if self.n_polls < 1:
            raise ValueError("n_polls must be >= 1")
        if self.guard_windows < 0:
            raise ValueError("guard_windows must be >= 0")


def _default_stages() -> tuple[StageConfig, ...]:
    return (
        StageConfig(300.0, 100),
        StageConfig(60.0, 1000),
        StageConfig(10.0, 10_000_000),
    )


@dataclass(frozen=True)
class SyncPlan:
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a sync plan needs at least one stage")
        widths = [s.t_w_ps for s in self.stages]
        if any(b >= a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage window widths must strictly decrease, got {widths}")

    @property
    def final_window_ps(self) -> float:
        return self.stages[-1].t_w_ps


@dataclass(frozen=True, eq=False)
class StageResult:
    scan: WindowScan
    winner_index: int
    winner_count: int
    runner_up_count: int
    scan_origin_ns: float

    @property
    def counts(self) -> np.ndarray:
        return self.scan.counts

    @property
    def t_w_ns(self) -> float:
        return self.scan.t_w_ns

    @property
    def winner_start_ns(self) -> float:
        return self.scan.window_start(self.winner_index)

    @property
    def winner_center_ns(self) -> float:
        return self.scan.window_center(self.winner_index)


@dataclass(frozen=True, eq=False)
class SyncOutcome:
    stage_results: tuple[StageResult, ...]
    estimated_arrival_ns: float
    true_arrival_ns: float
    residual_error_ps: float
    success: bool
    frame_ns: float

    def summary(self) -> dict:
        return {
            "success": self.success,
            "estimated_arrival_ns": self.estimated_arrival_ns,
            "true_arrival_ns": self.true_arrival_ns,
            "residual_error_ps": self.residual_error_ps,
            "frame_ns": self.frame_ns,
            "stages": [
                {
                    "t_w_ps": r.t_w_ns * 1e3,
                    "n_windows": len(r.scan),
                    "scan_origin_ns": r.scan_origin_ns,
                    "winner_index": r.winner_index,
                    "winner_count": r.winner_count,
                    "runner_up_count": r.runner_up_count,
                }
                for r in self.stage_results
            ],
        }


def select_signal_window(counts) -> int:
    """Index of the largest count; the lowest index wins a tie."""
    arr = np.asarray(counts)
    if arr.size == 0:
        raise ValueError("cannot select a window from an empty count array")
    return int(np.argmax(arr))


def _stage_seed(seed: np.random.SeedSequence, stage: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (stage,))


def run_stage(
    cfg: StageConfig,
    scan_origin_ns: float,
    scan_span_ns: float,
    arrival: PulseArrival,
    train: PulseTrainConfig,
    spad: SpadConfig,
    seed: np.random.SeedSequence | int,
    *,
    period_ns: float | None = None,
    workers: int = 1,
    stochastic: bool = True,
) -> StageResult:
    t_w_ns = cfg.t_w_ps * 1e-3
    if scan_span_ns < t_w_ns * (1 - 1e-9):
        raise ValueError("scan span is shorter than one window")
    n_windows = max(1, math.ceil(scan_span_ns / t_w_ns - 1e-9))
    scan = gate_scan(
        arrival,
        train,
        spad,
        scan_origin_ns,
        t_w_ns,
        n_windows,
        cfg.n_polls,
        seed,
        period_ns=period_ns,
        workers=workers,
        stochastic=stochastic,
    )
    winner = select_signal_window(scan.counts)
    others = np.delete(scan.counts, winner)
    runner_up = int(others.max()) if others.size else 0
    return StageResult(scan, winner, int(scan.counts[winner]), runner_up, scan_origin_ns)


def _circular_distance(a: float, b: float, period: float) -> float:
    d = (a - b) % period
    return min(d, period - d)


def sync_arrival(topo: ChannelTopology, train: PulseTrainConfig) -> PulseArrival:
    """The backward sync pulse as it reaches the transceiver detectors."""
    return arrival_at(propagate_pulse(train, topo, Mode.SYNC), "detector")


def run_sync(
    plan: SyncPlan,
    topo: ChannelTopology,
    train: PulseTrainConfig,
    spad: SpadConfig,
    seed: np.random.SeedSequence | int,
    *,
    workers: int = 1,
    stochastic: bool = True,
    tolerance_ps: float | None = None,
) -> SyncOutcome:
    """Locate the returning sync pulse inside the frame.

    Success means the centre of the last winning window lies within
    ``tolerance_ps`` (the last stage's window width by default) of the true
    arrival, measured modulo the frame.
    """
    if len(plan.stages) != 3:
        raise ValueError("the synchronisation procedure runs exactly three stages")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    _, _, frame_ns = round_trip_schedule(topo, plan.stages[0].t_w_ps)
    arrival = sync_arrival(topo, train)

    origin, span = 0.0, frame_ns
    results: list[StageResult] = []
    for k, cfg in enumerate(plan.stages):
        res = run_stage(
            cfg,
            origin,
            span,
            arrival,
            train,
            spad,
            _stage_seed(seed, k),
            period_ns=frame_ns,
            workers=workers,
            stochastic=stochastic,
        )
        results.append(res)
        g = cfg.guard_windows
        origin = res.winner_start_ns - g * res.t_w_ns
        span = (2 * g + 1) * res.t_w_ns

    estimate = results[-1].winner_center_ns
    truth = arrival.time_ns % frame_ns
    residual_ps = _circular_distance(estimate, truth, frame_ns) * 1e3
    tol = plan.final_window_ps if tolerance_ps is None else tolerance_ps
    return SyncOutcome(tuple(results), estimate, truth, residual_ps, residual_ps <= tol, frame_ns)


# -- detection probability -------------------------------------------------


def _check_probabilities(p_signal: float, p_noise: float, n_windows: int, n_polls: int, signal_index: int) -> None:
    for name, p in (("p_signal", p_signal), ("p_noise", p_noise)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if n_windows < 1 or n_polls < 1:
        raise ValueError("n_windows and n_polls must be >= 1")
    if not 0 <= signal_index < n_windows:
        raise ValueError("signal_index out of range")


def detection_probability_bruteforce(
    p_signal: float, p_noise: float, n_windows: int, n_polls: int, signal_index: int
) -> float:
    """Exact P(selected window == signal_index) by enumerating every count vector.

    Each window's count is Binomial(n_polls, p) with ``p_signal`` for the
    signal window and ``p_noise`` elsewhere.
    """
    _check_probabilities(p_signal, p_noise, n_windows, n_polls, signal_index)
    outcomes = (n_polls + 1) ** n_windows
    if outcomes > BRUTEFORCE_MAX_OUTCOMES:
        raise CapacityError(
            f"{outcomes} joint outcomes exceed {BRUTEFORCE_MAX_OUTCOMES}; "
            "use detection_probability_mc or detection_probability_exact"
        )

    def pmf(p: float) -> list[float]:
        return [math.comb(n_polls, k) * p**k * (1 - p) ** (n_polls - k) for k in range(n_polls + 1)]

    sig, noise = pmf(p_signal), pmf(p_noise)
    tables = [sig if w == signal_index else noise for w in range(n_windows)]
    total = 0.0
    for vec in itertools.product(range(n_polls + 1), repeat=n_windows):
        best = max(vec)
        if vec.index(best) != signal_index:
            continue
        prob = 1.0
        for w, k in enumerate(vec):
            prob *= tables[w][k]
        total += prob
    return total


def detection_probability_exact(
    p_signal: float, p_noise: float, n_windows: int, n_polls: int, signal_index: int
) -> float:
    """Same quantity as the brute-force oracle, summed over the signal count only.

    Windows before the signal must stay strictly below it and windows after
    it must not exceed it.
    """
    _check_probabilities(p_signal, p_noise, n_windows, n_polls, signal_index)
    k = np.arange(n_polls + 1)
    p_sig = binom.pmf(k, n_polls, p_signal)
    below = binom.cdf(k - 1, n_polls, p_noise)
    at_most = binom.cdf(k, n_polls, p_noise)
    before = signal_index
    after = n_windows - 1 - signal_index
    return float(np.sum(p_sig * below**before * at_most**after))


def detection_probability_mc(
    p_signal: float,
    p_noise: float,
    n_windows: int,
    n_polls: int,
    signal_index: int,
    trials: int,
    rng: np.random.Generator,
) -> tuple[float, tuple[float, float]]:
    """Monte-Carlo estimate with a Wilson 95% interval."""
    _check_probabilities(p_signal, p_noise, n_windows, n_polls, signal_index)
    if trials < 100:
        raise ValueError("trials must be >= 100")
    p = np.full(n_windows, p_noise)
    p[signal_index] = p_signal
    hits = 0
    chunk = max(1, 2_000_000 // n_windows)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        counts = rng.binomial(n_polls, p, size=(m, n_windows))
        hits += int(np.count_nonzero(np.argmax(counts, axis=1) == signal_index))
        done += m
    ci = binomtest(hits, trials).proportion_ci(confidence_level=0.95, method="wilson")
    return hits / trials, (float(ci.low), float(ci.high))
