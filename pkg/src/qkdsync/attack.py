"""Eavesdropper toolkit: taps, tapped-port traces, mode inference, injection.

A tap port sees light travelling in the coupler's ``orientation``. Light fed
into a tap port couples back into the line in the opposite direction, so a
forward-oriented port injects toward the transceiver and a backward-oriented
port injects toward the coding station.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .framing import FrameSpec
from .optics import (
    ChannelTopology,
    CouplerSpec,
    Direction,
    FiberSegment,
    Mode,
    PowerLevel,
    PulseTrainConfig,
    _transmittance,
    photon_energy_j,
    propagate_pulse,
    round_trip_schedule,
)


class InjectionDirection(str, Enum):
    TOWARD_TRANSCEIVER = "toward_transceiver"
    TOWARD_CODING = "toward_coding"


class ModeLabel(str, Enum):
    SYNC = "sync"
    KEY = "key"
    IDLE = "idle"


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class InjectionSource:
    entry_port: str
    direction: InjectionDirection
    power: PowerLevel = field(default_factory=lambda: PowerLevel.from_mw(1.0))
    rep_rate_hz: float = 270.0
    wavelength_nm: float = 1550.0
    pulse_duration_ns: float = 300.0
    phase_ns: float | None = None  # None: free-running, random phase
    start_ns: float = 0.0  # source switched on at this session time

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", InjectionDirection(self.direction))
        if not self.power.mw > 0:
            raise ValueError("injection power must be positive")
        if not self.rep_rate_hz > 0:
            raise ValueError("rep_rate_hz must be positive")
        if not self.pulse_duration_ns > 0:
            raise ValueError("pulse_duration_ns must be positive")
        if not self.start_ns >= 0:
            raise ValueError("start_ns must be non-negative")

    @property
    def period_ns(self) -> float:
        return 1e9 / self.rep_rate_hz


@dataclass(frozen=True)
class AttackScenario:
    taps: tuple[CouplerSpec, ...] = ()
    injections: tuple[InjectionSource, ...] = ()
    active_window_ns: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self) -> None:
        object.__setattr__(self, "taps", tuple(self.taps))
        object.__setattr__(self, "injections", tuple(self.injections))
        lo, hi = self.active_window_ns
        if not lo <= hi:
            raise ValueError("active window must satisfy start <= end")
        object.__setattr__(self, "active_window_ns", (float(lo), float(hi)))


def insert_tap(topo: ChannelTopology, spec: CouplerSpec) -> ChannelTopology:
    """Return a copy of ``topo`` with ``spec`` spliced in at its position."""
    if not 0.0 <= spec.position_km <= topo.length_km:
        raise ValueError(f"tap position {spec.position_km} km outside channel of {topo.length_km} km")
    if any(c.position_km == spec.position_km for c in topo.couplers):
        raise ValueError(f"a coupler already sits at {spec.position_km} km")
    return topo.with_couplers(topo.couplers + (spec,))


def apply_scenario(topo: ChannelTopology, scenario: AttackScenario | None) -> ChannelTopology:
    if scenario is None:
        return topo
    for tap in scenario.taps:
        topo = insert_tap(topo, tap)
    _check_injection_ports(topo, scenario)
    return topo


def _check_injection_ports(topo: ChannelTopology, scenario: AttackScenario) -> None:
    for inj in scenario.injections:
        c = topo.coupler(inj.entry_port)
        expected = (
            InjectionDirection.TOWARD_TRANSCEIVER
            if c.orientation is Direction.FORWARD
            else InjectionDirection.TOWARD_CODING
        )
        if inj.direction is not expected:
            raise ValueError(
                f"port {inj.entry_port!r} samples {c.orientation.value} light, "
                f"so light fed into it travels {expected.value}"
            )


# -- tapped traces -----------------------------------------------------------


@dataclass(frozen=True)
class Activity:
    mode: str  # "sync", "key" or "idle"
    start_ns: float
    end_ns: float


@dataclass(frozen=True)
class TapMonitor:
    """The eavesdropper's photodetector on a tap port."""

    efficiency: float = 0.5
    dark_count_rate_hz: float = 0.0


@dataclass(frozen=True, eq=False)
class ObservedTrace:
    times_ns: np.ndarray
    powers_mw: np.ndarray
    directions: tuple[Direction, ...]
    duration_ns: float
    pulse_duration_ns: float = 1.0
    wavelength_nm: float = 1550.0

    @property
    def events(self) -> list[tuple[float, PowerLevel, Direction]]:
        return [
            (float(t), PowerLevel(float(p)), d)
            for t, p, d in zip(self.times_ns, self.powers_mw, self.directions)
        ]

    def photons(self) -> np.ndarray:
        joules = self.powers_mw * 1e-3 * self.pulse_duration_ns * 1e-9
        return joules / photon_energy_j(self.wavelength_nm)

    def scaled(self, factor: float) -> ObservedTrace:
        return ObservedTrace(
            self.times_ns, self.powers_mw * factor, self.directions, self.duration_ns,
            self.pulse_duration_ns, self.wavelength_nm,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ns", "power_dbm", "direction"])
        for t, p, d in zip(self.times_ns.tolist(), self.powers_mw.tolist(), self.directions):
            w.writerow([repr(t), repr(10.0 * math.log10(p)), d.value])
        return buf.getvalue()


def _emission_times(activity: Activity, topo: ChannelTopology, frame: FrameSpec) -> np.ndarray:
    span = activity.end_ns - activity.start_ns
    if activity.mode == "sync":
        _, _, period = round_trip_schedule(topo, 300.0)
        k = np.arange(math.ceil(span / period))
        return activity.start_ns + k * period
    if activity.mode == "key":
        n_frames = math.ceil(span / frame.frame_period_ns)
        t = activity.start_ns + frame.slot_times(n_frames * frame.pulses_per_frame)
        return t[t < activity.end_ns]
    return np.empty(0)


def observe_trace(
    topo: ChannelTopology,
    scenario: AttackScenario,
    system_schedule: list[Activity],
    rng: np.random.Generator,
    *,
    train: PulseTrainConfig | None = None,
    frame: FrameSpec | None = None,
    mu_key: float = 0.5,
    monitor: TapMonitor = TapMonitor(),
) -> dict[str, ObservedTrace]:
    """Record the pulses reaching each tap port during ``system_schedule``.

    The scenario's taps are spliced into ``topo`` first. Each pulse registers
    a Poisson number of photons; pulses that register none leave no event.
    """
    topo = apply_scenario(topo, scenario)
    if not topo.couplers:
        raise ValueError("observe_trace needs at least one tap in the topology")
    train = train or PulseTrainConfig()
    frame = frame or FrameSpec()
    start = min((a.start_ns for a in system_schedule), default=0.0)
    end = max((a.end_ns for a in system_schedule), default=0.0)
    duration = end - start
    per_port: dict[str, list[tuple[np.ndarray, np.ndarray, Direction]]] = {p: [] for p in topo.port_ids()}
    arrivals = {
        m: {a.node_id: a for a in propagate_pulse(train, topo, m, mu_key)} for m in (Mode.SYNC, Mode.KEY)
    }
    for act in system_schedule:
        if act.mode not in ("sync", "key", "idle"):
            raise ValueError(f"unknown activity mode {act.mode!r}")
        emitted = _emission_times(act, topo, frame)
        if emitted.size == 0:
            continue
        node = arrivals[Mode.SYNC if act.mode == "sync" else Mode.KEY]
        for pid in topo.port_ids():
            arr = node[pid]
            n = rng.poisson(arr.mean_photons * monitor.efficiency, size=emitted.size)
            hit = n > 0
            per_port[pid].append((emitted[hit] + arr.time_ns, n[hit].astype(float), arr.direction))
    traces = {}
    for pid, c in zip(topo.port_ids(), topo.couplers):
        parts = per_port[pid]
        if monitor.dark_count_rate_hz > 0 and duration > 0:
            k = rng.poisson(monitor.dark_count_rate_hz * duration * 1e-9)
            parts = parts + [(rng.uniform(start, end, size=k), np.ones(k), c.orientation)]
        times = np.concatenate([p[0] for p in parts]) if parts else np.empty(0)
        photons = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)
        dirs = [d for p in parts for d in [p[2]] * len(p[0])]
        order = np.argsort(times, kind="stable")
        times, photons = times[order], photons[order]
        dirs = tuple(dirs[i] for i in order)
        watts = photons * photon_energy_j(train.wavelength_nm) / (train.duration_ns * 1e-9)
        traces[pid] = ObservedTrace(times, watts * 1e3, dirs, duration, train.duration_ns, train.wavelength_nm)
    return traces


# -- mode inference ----------------------------------------------------------


@dataclass(frozen=True)
class ModeThresholds:
    multiphoton_floor_photons: float = 100.0
    period_cv_max: float = 0.01
    idle_rate_floor_hz: float = 10_000.0
    max_period_ns: float = 500_000.0
    min_periods: int = 10


def classify_mode(trace: ObservedTrace, thresholds: ModeThresholds = ModeThresholds()) -> ModeLabel:
    """Infer what the QKD system is doing from one tapped trace.

    Strong (multiphoton) pulses at one stable period mean synchronisation;
    any other activity above the idle floor is key distribution.
    """
    if trace.duration_ns < thresholds.min_periods * thresholds.max_period_ns:
        raise InsufficientDataError(
            f"trace of {trace.duration_ns:.0f} ns is shorter than "
            f"{thresholds.min_periods} periods of {thresholds.max_period_ns:.0f} ns"
        )
    strong = trace.photons() >= thresholds.multiphoton_floor_photons
    dirs = np.array([d.value for d in trace.directions])
    by_dir = Counter(dirs[strong].tolist())
    if by_dir:
        main_dir, n_main = by_dir.most_common(1)[0]
        if n_main >= thresholds.min_periods:
            gaps = np.diff(trace.times_ns[strong & (dirs == main_dir)])
            if gaps.std() <= thresholds.period_cv_max * gaps.mean():
                return ModeLabel.SYNC
        # multiphoton light only ever travels backward while synchronising
        if by_dir.get(Direction.BACKWARD.value, 0) >= thresholds.min_periods:
            return ModeLabel.SYNC
        if by_dir.get(Direction.FORWARD.value, 0) >= thresholds.min_periods:
            return ModeLabel.KEY
    if len(trace.times_ns) / (trace.duration_ns * 1e-9) < thresholds.idle_rate_floor_hz:
        return ModeLabel.IDLE
    return ModeLabel.KEY


def random_classifier_scenario(rng: np.random.Generator, duration_ns: float = 6e6):
    """One randomised (topology, schedule, monitor, truth) case for the harness."""
    length = float(rng.uniform(1.0, 6.0))
    fraction = float(rng.uniform(0.10, 0.30))
    orientation = Direction.FORWARD if rng.random() < 0.5 else Direction.BACKWARD
    tap = CouplerSpec(fraction, float(rng.uniform(0.05, 0.95)) * length, orientation=orientation, name="eve")
    topo = ChannelTopology(quantum_channel=(FiberSegment(length),))
    truth = ModeLabel(rng.choice([m.value for m in ModeLabel]))
    schedule = [Activity(truth.value, 0.0, duration_ns)]
    monitor = TapMonitor(efficiency=float(rng.uniform(0.3, 0.9)), dark_count_rate_hz=float(rng.uniform(0, 2000)))
    return topo, AttackScenario(taps=(tap,)), schedule, monitor, truth


def evaluate_classifier(n_scenarios: int, seed: int, thresholds: ModeThresholds = ModeThresholds()) -> dict:
    """Accuracy and confusion matrix of :func:`classify_mode` over random cases."""
    labels = [m.value for m in ModeLabel]
    confusion = {t: {p: 0 for p in labels} for t in labels}
    correct = 0
    for i in range(n_scenarios):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        topo, scenario, schedule, monitor, truth = random_classifier_scenario(rng)
        trace = observe_trace(topo, scenario, schedule, rng, monitor=monitor)["eve"]
        label = classify_mode(trace, thresholds)
        confusion[truth.value][label.value] += 1
        correct += label is truth
    return {"n_scenarios": n_scenarios, "accuracy": correct / n_scenarios, "confusion": confusion}


# -- injection ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InjectionEvents:
    """What the injected light does during one key session.

    ``detector_slots`` / ``detector_photons``: session rounds whose gate saw
    injected light and how many photons reached the detectors in that gate.
    ``coding_times_ns`` / ``coding_power_dbm``: pulses reaching the coding
    station above the disruption threshold, in the station's grid time.
    """

    detector_slots: np.ndarray
    detector_photons: np.ndarray
    coding_times_ns: np.ndarray
    coding_power_dbm: np.ndarray

    @classmethod
    def none(cls) -> InjectionEvents:
        return cls(np.empty(0, np.int64), np.empty(0), np.empty(0), np.empty(0))

    @property
    def total(self) -> int:
        return len(self.detector_slots) + len(self.coding_times_ns)


def _pulse_starts(inj: InjectionSource, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    period = inj.period_ns
    phase = inj.phase_ns if inj.phase_ns is not None else rng.uniform(0.0, period)
    if hi <= lo:
        return np.empty(0)
    k0 = math.ceil((lo - phase) / period)
    k1 = math.floor((hi - phase) / period)
    k = np.arange(k0, k1 + 1)
    t = phase + k * period
    return t[(t >= lo) & (t < hi)]


def inject(
    scenario: AttackScenario | None,
    topo: ChannelTopology,
    frame: FrameSpec,
    n_pulses: int,
    rng: np.random.Generator,
    *,
    gate_width_ns: float = 2.5,
    disruption_threshold_dbm: float = -30.0,
) -> InjectionEvents:
    """Deliver each injection source's pulses over the session clock.

    The session occupies the first ``n_pulses`` slots of ``frame``; only
    pulses starting inside the scenario's active window fire. Every source
    is sampled from ``rng`` even when it ends up firing nothing, so adding a
    window never shifts the draws of other sources.
    """
    if scenario is None or not scenario.injections:
        return InjectionEvents.none()
    _check_injection_ports(topo, scenario)
    slots = frame.slot_times(n_pulses)
    session_end = slots[-1] + frame.pulse_spacing_ns if n_pulses else 0.0
    lo = max(0.0, scenario.active_window_ns[0])
    hi = min(session_end, scenario.active_window_ns[1])
    det_slots, det_photons, c_times, c_power = [], [], [], []
    L = topo.length_km
    for inj in scenario.injections:
        starts = _pulse_starts(inj, max(lo, inj.start_ns), hi, rng)
        c = topo.coupler(inj.entry_port)
        x = c.position_km
        launched_mw = inj.power.mw * c.tap_fraction * _transmittance(c.excess_loss_db)
        if inj.direction is InjectionDirection.TOWARD_TRANSCEIVER:
            loss = topo.through_loss_db(0.0, x) + topo.transceiver_internal_loss_db
            p_mw = launched_mw * _transmittance(loss)
            t_arrive = starts + topo.fibre_transit_ns(0.0, x)
            # gates [s, s + gw) overlapping [t, t + d)
            first = np.searchsorted(slots, t_arrive - gate_width_ns, side="right")
            last = np.searchsorted(slots, t_arrive + inj.pulse_duration_ns, side="left")
            for t, a, b in zip(t_arrive, first, last):
                idx = np.arange(a, b)
                if idx.size == 0:
                    continue
                overlap = np.minimum(slots[idx] + gate_width_ns, t + inj.pulse_duration_ns) - np.maximum(slots[idx], t)
                photons = p_mw * 1e-3 * overlap * 1e-9 / photon_energy_j(inj.wavelength_nm)
                det_slots.append(idx)
                det_photons.append(photons)
        else:
            loss = topo.through_loss_db(x, L)
            p = PowerLevel(launched_mw * _transmittance(loss))
            if p.dbm >= disruption_threshold_dbm:
                # coding-station grid time: local arrival minus the forward channel transit
                t_grid = starts + topo.fibre_transit_ns(x, L) - topo.channel_transit_ns()
                c_times.append(t_grid)
                c_power.append(np.full(len(t_grid), p.dbm))
    if det_slots:
        slots_all = np.concatenate(det_slots)
        photons_all = np.concatenate(det_photons)
        uniq, inverse = np.unique(slots_all, return_inverse=True)
        summed = np.zeros(len(uniq))
        np.add.at(summed, inverse, photons_all)
    else:
        uniq, summed = np.empty(0, np.int64), np.empty(0)
    ct = np.concatenate(c_times) if c_times else np.empty(0)
    cp = np.concatenate(c_power) if c_power else np.empty(0)
    order = np.argsort(ct, kind="stable")
    return InjectionEvents(uniq.astype(np.int64), summed, ct[order], cp[order])


# -- coding-station passivity ------------------------------------------------


def passivity_experiment(
    topo: ChannelTopology,
    coding_station_powered: bool,
    input_power: PowerLevel = PowerLevel.from_dbm(0.0),
) -> dict[str, PowerLevel]:
    """Steady-state power at every tap port with the transceiver detached.

    ``input_power`` is launched into the first coupler toward the coding
    station. The sync path through the coding station is entirely passive
    (delay line, attenuator at its sync setting, mirror), so whether the
    station is powered does not enter the calculation.
    """
    if not topo.couplers:
        raise ValueError("passivity experiment needs at least one coupler")
    del coding_station_powered  # no active element on the sync path
    x0 = topo.couplers[0].position_km
    L = topo.length_km

    def forward_loss(x: float) -> float:
        # from just before the first coupler to just before position x
        return topo.fibre_loss_db(x0, x) + sum(c.through_loss_db for c in topo.couplers if x0 <= c.position_km < x)

    coding_in = forward_loss(L) + sum(c.through_loss_db for c in topo.couplers if c.position_km == L)
    turnaround = (
        2 * topo.coding_internal_loss_db + 2 * topo.delay_line.loss_db + topo.mirror_loss_db + topo.station_attenuator_db
    )
    out = {}
    for pid, c in zip(topo.port_ids(), topo.couplers):
        if c.orientation is Direction.FORWARD:
            loss = forward_loss(c.position_km)
        else:
            loss = coding_in + turnaround + topo.through_loss_db(c.position_km, L)
            loss += sum(k.through_loss_db for k in topo.couplers if k.position_km == L and k is not c)
        out[pid] = PowerLevel(input_power.mw * _transmittance(loss + c.tap_loss_db))
    return out


def fit_coding_internal_loss(
    topo: ChannelTopology, port_id: str, target: PowerLevel, input_power: PowerLevel = PowerLevel.from_dbm(0.0)
) -> ChannelTopology:
    """Solve the coding-station internal loss that puts ``target`` on a backward tap port.

    The internal loss is crossed twice, so the port reading moves by -2 dB
    per dB of internal loss.
    """
    if topo.coupler(port_id).orientation is not Direction.BACKWARD:
        raise ValueError("only a backward-oriented port sees the coding-station return")
    base = replace(topo, coding_internal_loss_db=0.0)
    reading = passivity_experiment(base, True, input_power)[port_id].dbm
    loss = (reading - target.dbm) / 2.0
    if loss < 0:
        raise ValueError(f"target {target.dbm:.2f} dBm exceeds the lossless reading {reading:.2f} dBm")
    return replace(topo, coding_internal_loss_db=loss)


def photons_at_tap(topo: ChannelTopology, train: PulseTrainConfig, port_id: str, mode: Mode, mu_key: float = 0.5) -> float:
    for a in propagate_pulse(train, topo, mode, mu_key):
        if a.node_id == port_id:
            return a.mean_photons
    raise KeyError(port_id)

