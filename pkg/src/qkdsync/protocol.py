"""Station lifecycle and the desk-scale BB84 key session.

Phase coding is reduced to bit and basis labels. Each round the transceiver
sends a bright pulse, the coding station returns it attenuated to ``mu_key``
photons, and two gated detectors (one per bit value) register it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attack import AttackScenario, InjectionEvents, inject
from .detector import SpadConfig
from .framing import FrameSpec, FrameStatus, frame_integrity_check, nearest_slot
from .optics import ChannelTopology, Mode, PulseTrainConfig, arrival_at, propagate_pulse
from .sync import SyncOutcome


class SystemState(str, Enum):
    IDLE = "idle"
    SELF_TEST = "self_test"
    LOSS_ANALYSIS = "loss_analysis"
    SYNC_1 = "sync_1"
    SYNC_2 = "sync_2"
    SYNC_3 = "sync_3"
    KEY_DISTRIBUTION = "key_distribution"
    TUNING = "tuning"

    @property
    def sync_stage(self) -> int | None:
        return {"sync_1": 1, "sync_2": 2, "sync_3": 3}.get(self.value)


class Event(str, Enum):
    START = "start"
    TEST_PASS = "test_pass"
    TEST_FAIL = "test_fail"
    LOSS_OK = "loss_ok"
    STAGE_DONE = "stage_done"
    STAGE_FAIL = "stage_fail"
    FRAME_MISMATCH = "frame_mismatch"
    INTERFERENCE_STOPPED = "interference_stopped"
    SESSION_DONE = "session_done"
    STOP = "stop"


S, E = SystemState, Event
_SYNC = (S.SYNC_1, S.SYNC_2, S.SYNC_3)
_TRANSITIONS: dict[tuple[SystemState, Event], SystemState] = {
    (S.IDLE, E.START): S.SELF_TEST,
    (S.SELF_TEST, E.TEST_PASS): S.LOSS_ANALYSIS,
    (S.SELF_TEST, E.TEST_FAIL): S.IDLE,
    (S.LOSS_ANALYSIS, E.LOSS_OK): S.SYNC_1,
    (S.SYNC_1, E.STAGE_DONE): S.SYNC_2,
    (S.SYNC_2, E.STAGE_DONE): S.SYNC_3,
    (S.SYNC_3, E.STAGE_DONE): S.KEY_DISTRIBUTION,
    (S.TUNING, E.INTERFERENCE_STOPPED): S.SYNC_1,
    # periodic re-synchronisation between key sessions
    (S.KEY_DISTRIBUTION, E.SESSION_DONE): S.SYNC_1,
}
for _s in (*_SYNC, S.KEY_DISTRIBUTION):
    _TRANSITIONS[(_s, E.FRAME_MISMATCH)] = S.TUNING
    _TRANSITIONS[(_s, E.STAGE_FAIL)] = S.TUNING
for _s in S:
    _TRANSITIONS.setdefault((_s, E.STOP), S.IDLE)
del _s


def step_system(state: SystemState, event: Event) -> SystemState:
    """Next station state. Pairs without a transition leave the state unchanged."""
    return _TRANSITIONS.get((SystemState(state), Event(event)), SystemState(state))


@dataclass
class StateMachine:
    """Coordinating wrapper that records every transition."""

    state: SystemState = SystemState.IDLE
    log: list[tuple[int, str, str, str]] = field(default_factory=list)

    def fire(self, event: Event) -> SystemState:
        new = step_system(self.state, event)
        self.log.append((len(self.log), self.state.value, Event(event).value, new.value))
        self.state = new
        return new

    def log_csv(self) -> str:
        rows = ["step,state,event,next_state"]
        rows += [f"{i},{a},{e},{b}" for i, a, e, b in self.log]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class KeySessionConfig:
    n_pulses: int = 100_000
    mu_key: float = 0.5
    visibility: float = 0.98
    sample_fraction_for_qber: float = 0.5
    frame: FrameSpec = field(default_factory=FrameSpec)
    disruption_threshold_dbm: float = -30.0

    def __post_init__(self) -> None:
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        if not self.mu_key > 0:
            raise ValueError("mu_key must be positive")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")
        if not 0.0 < self.sample_fraction_for_qber <= 1.0:
            raise ValueError("sample_fraction_for_qber must lie in (0, 1]")


class AbortReason(str, Enum):
    FRAME_MISMATCH = "frame_mismatch"
    SYNC_LOST = "sync_lost"


@dataclass(frozen=True)
class KeySessionResult:
    sifted_length: int
    qber_actual: float
    qber_theoretical: float
    aborted: bool
    abort_reason: AbortReason | None = None
    compared: int = 0
    errors: int = 0
    rounds: int = 0
    clicks: int = 0

    @property
    def key_bits(self) -> int:
        """Sifted bits left after the disclosed QBER sample."""
        return self.sifted_length - self.compared

    @property
    def qber_sigma(self) -> float:
        """Binomial standard error of ``qber_actual``."""
        if self.compared == 0:
            return 0.0
        q = self.qber_actual
        return math.sqrt(max(q * (1 - q), 1.0 / self.compared) / self.compared)

    def summary(self) -> dict:
        return {
            "sifted_length": self.sifted_length,
            "qber_actual": self.qber_actual,
            "qber_theoretical": self.qber_theoretical,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason.value if self.abort_reason else None,
            "compared": self.compared,
            "errors": self.errors,
            "rounds": self.rounds,
        }


def system_loss_budget_db(topo: ChannelTopology, train: PulseTrainConfig | None = None) -> float:
    """Round-trip loss from laser to detectors that the stations measure with sync pulses."""
    train = train or PulseTrainConfig()
    det = arrival_at(propagate_pulse(train, topo, Mode.SYNC), "detector")
    return 10.0 * math.log10(train.photons_per_pulse / det.mean_photons)


def loss_analysis(topo: ChannelTopology, max_channel_loss_db: float = 10.0) -> bool:
    """LossOk when the measured one-way channel loss is within the station's budget."""
    return topo.channel_loss_db() <= max_channel_loss_db


def theoretical_qber(loss_budget_db: float, spad: SpadConfig, cfg: KeySessionConfig) -> float:
    """The stations' own error estimate for a given loss budget."""
    if loss_budget_db < 0:
        raise ValueError("loss_budget_db must be non-negative")
    p_click = -math.expm1(-cfg.mu_key * spad.efficiency * 10.0 ** (-loss_budget_db / 10.0))
    p_dark = spad.dark_probability()
    visibility_term = (1.0 - cfg.visibility) / 2.0
    if p_click + p_dark == 0:
        return visibility_term
    return visibility_term + 0.5 * p_dark / (p_click + p_dark)


def _seed_child(seed: np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)


def _coding_abort_time(events: InjectionEvents, frame: FrameSpec, n_pulses: int) -> float | None:
    """Grid time of the first injected pulse that breaks a frame at the coding station."""
    if events.coding_times_ns.size == 0:
        return None
    slots = frame.slot_times(n_pulses)
    frame_of = np.floor(events.coding_times_ns / frame.frame_period_ns).astype(np.int64)
    for f in np.unique(frame_of):
        in_frame = events.coding_times_ns[frame_of == f]
        base = f * frame.frame_period_ns
        own = slots[(slots >= base) & (slots < base + frame.frame_period_ns)]
        observed = np.concatenate([own, in_frame]) - base
        if frame_integrity_check(frame, observed, n_frames=1) is FrameStatus.MISMATCH:
            _, dev = nearest_slot(frame, in_frame)
            return float(in_frame[dev > frame.tolerance_ns].min())
    return None


def run_key_session(
    cfg: KeySessionConfig,
    topo: ChannelTopology,
    spad: SpadConfig,
    sync_outcome: SyncOutcome,
    attacks: AttackScenario | None,
    seed: np.random.SeedSequence | int,
    *,
    train: PulseTrainConfig | None = None,
) -> KeySessionResult:
    """Run ``cfg.n_pulses`` two-pass BB84 rounds over ``topo``.

    ``topo`` is used as given (splice taps in with ``attack.apply_scenario``);
    ``attacks`` supplies the injection sources. Round randomness and
    injection randomness come from separate streams, so a session with and
    without injection share every round-level draw.
    """
    if not sync_outcome.success:
        raise ValueError("a key session needs a successful synchronisation")
    train = train or PulseTrainConfig()
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(_seed_child(seed, 0))
    inj_rng = np.random.default_rng(_seed_child(seed, 1))
    n = cfg.n_pulses

    events = inject(
        attacks,
        topo,
        cfg.frame,
        n,
        inj_rng,
        gate_width_ns=spad.gate_width_ns,
        disruption_threshold_dbm=cfg.disruption_threshold_dbm,
    )
    abort_at = _coding_abort_time(events, cfg.frame, n)

    detected = spad.efficiency * arrival_at(propagate_pulse(train, topo, Mode.KEY, cfg.mu_key), "detector").mean_photons
    alice_bit = rng.integers(0, 2, n)
    alice_basis = rng.integers(0, 2, n)
    bob_basis = rng.integers(0, 2, n)
    u_sample = rng.random(n)
    u_d0 = rng.random(n)
    u_d1 = rng.random(n)
    u_tie = rng.random(n)
    u_split = inj_rng.random(len(events.detector_slots))

    match = alice_basis == bob_basis
    right = np.where(match, (1 + cfg.visibility) / 2, 0.5)
    # detector index == bit value it reports
    mean_right = detected * right
    mean_wrong = detected * (1 - right)
    mean_d0 = np.where(alice_bit == 0, mean_right, mean_wrong)
    mean_d1 = np.where(alice_bit == 1, mean_right, mean_wrong)
    if events.detector_slots.size:
        extra = spad.efficiency * events.detector_photons
        np.add.at(mean_d0, events.detector_slots, extra * u_split)
        np.add.at(mean_d1, events.detector_slots, extra * (1 - u_split))
    p_dark = spad.dark_probability()
    click0 = u_d0 < -np.expm1(-mean_d0) * (1 - p_dark) + p_dark
    click1 = u_d1 < -np.expm1(-mean_d1) * (1 - p_dark) + p_dark
    clicked = click0 | click1
    bob_bit = np.where(click0 & click1, (u_tie < 0.5).astype(int), np.where(click1, 1, 0))

    completed = n
    if abort_at is not None:
        slots = cfg.frame.slot_times(n)
        completed = int(np.searchsorted(slots, abort_at, side="left"))
    live = np.arange(n) < completed

    sifted = match & clicked & live
    compared = sifted & (u_sample < cfg.sample_fraction_for_qber)
    n_compared = int(compared.sum())
    n_errors = int((compared & (bob_bit != alice_bit)).sum())
    qber = n_errors / n_compared if n_compared else 0.0
    return KeySessionResult(
        sifted_length=int(sifted.sum()),
        qber_actual=qber,
        qber_theoretical=theoretical_qber(system_loss_budget_db(topo, train), spad, cfg),
        aborted=abort_at is not None,
        abort_reason=AbortReason.FRAME_MISMATCH if abort_at is not None else None,
        compared=n_compared,
        errors=n_errors,
        rounds=completed,
        clicks=int((clicked & live).sum()),
    )


def click_probability(cfg: KeySessionConfig, topo: ChannelTopology, spad: SpadConfig, train: PulseTrainConfig | None = None) -> float:
    """Probability that at least one detector fires in a round without injection."""
    train = train or PulseTrainConfig()
    m = spad.efficiency * arrival_at(propagate_pulse(train, topo, Mode.KEY, cfg.mu_key), "detector").mean_photons
    p_dark = spad.dark_probability()
    no_click = math.exp(-m) * (1 - p_dark) ** 2
    return 1.0 - no_click


def expected_session_qber(
    cfg: KeySessionConfig, topo: ChannelTopology, spad: SpadConfig, train: PulseTrainConfig | None = None
) -> float:
    """Closed-form QBER of :func:`run_key_session` without injection.

    Per matched-basis round the right and wrong detectors fire independently;
    a double click reports a random bit.
    """
    train = train or PulseTrainConfig()
    m = spad.efficiency * arrival_at(propagate_pulse(train, topo, Mode.KEY, cfg.mu_key), "detector").mean_photons
    p_dark = spad.dark_probability()
    right = 1 - math.exp(-m * (1 + cfg.visibility) / 2) * (1 - p_dark)
    wrong = 1 - math.exp(-m * (1 - cfg.visibility) / 2) * (1 - p_dark)
    only_wrong = wrong * (1 - right)
    both = wrong * right
    any_click = right + wrong - both
    return (only_wrong + 0.5 * both) / any_click
