"""Optical power arithmetic and two-pass propagation through a plug&play link.

Power is carried as linear milliwatts; dBm is derived. The link model is the
auto-compensation layout: transceiver -> quantum channel (with optional taps)
-> coding station (delay line, Faraday mirror, attenuator) -> back along the
same fibre to the transceiver detectors.

Times are in nanoseconds and lengths in kilometres unless a name says
otherwise.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import scipy.constants as const

SPEED_OF_LIGHT_KM_PER_NS = const.c * 1e-12
DEFAULT_ALPHA_DB_PER_KM = 0.2
DEFAULT_GROUP_INDEX = 1.468


def _finite(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def _non_negative(value: float, name: str) -> float:
    value = _finite(value, name)
    if value < 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
    return value


def dbm_to_mw(p_dbm: float) -> float:
    """Convert dBm to linear milliwatts."""
    return 10.0 ** (_finite(p_dbm, "power in dBm") / 10.0)


def mw_to_dbm(p_mw: float) -> float:
    """Convert milliwatts to dBm; zero power maps to ``-inf``."""
    p_mw = _non_negative(p_mw, "power in mW")
    if p_mw == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_mw)


@dataclass(frozen=True, order=True)
class PowerLevel:
    """An optical power, stored in mW."""

    mw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mw", _non_negative(self.mw, "mw"))

    @classmethod
    def from_dbm(cls, p_dbm: float) -> PowerLevel:
        return cls(dbm_to_mw(p_dbm))

    @classmethod
    def from_mw(cls, p_mw: float) -> PowerLevel:
        return cls(p_mw)

    @property
    def dbm(self) -> float:
        return mw_to_dbm(self.mw)

    @property
    def watts(self) -> float:
        return self.mw * 1e-3

    def __str__(self) -> str:
        return f"{self.dbm:.3f} dBm"


class Profile(str, Enum):
    GAUSSIAN = "gaussian"
    RECTANGULAR = "rectangular"


class Direction(str, Enum):
    FORWARD = "forward"  # transceiver -> coding station
    BACKWARD = "backward"  # coding station -> transceiver


class Mode(str, Enum):
    SYNC = "sync"
    KEY = "key"


def photon_energy_j(wavelength_nm: float) -> float:
    return const.h * const.c / (wavelength_nm * 1e-9)


def mean_photons(power: PowerLevel, duration_ns: float, wavelength_nm: float) -> float:
    """Expected photon number of a pulse of ``power`` lasting ``duration_ns``.

    The pulse energy is taken as ``power * duration`` (the equivalent
    rectangular pulse), independent of the temporal profile.
    """
    duration_ns = _finite(duration_ns, "duration_ns")
    wavelength_nm = _finite(wavelength_nm, "wavelength_nm")
    if duration_ns <= 0:
        raise ValueError(f"duration_ns must be positive, got {duration_ns}")
    if wavelength_nm <= 0:
        raise ValueError(f"wavelength_nm must be positive, got {wavelength_nm}")
    energy_j = power.watts * duration_ns * 1e-9
    return energy_j / photon_energy_j(wavelength_nm)


def power_from_photons(photons: float, duration_ns: float, wavelength_nm: float) -> PowerLevel:
    """Inverse of :func:`mean_photons`."""
    watts = photons * photon_energy_j(wavelength_nm) / (duration_ns * 1e-9)
    return PowerLevel(watts * 1e3)


def attenuate(power: PowerLevel, loss_db: float) -> PowerLevel:
    loss_db = _non_negative(loss_db, "loss_db")
    return PowerLevel(power.mw * 10.0 ** (-loss_db / 10.0))


def _transmittance(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class PulseTrainConfig:
    wavelength_nm: float = 1550.0
    duration_ns: float = 1.0
    peak_power: PowerLevel = field(default_factory=lambda: PowerLevel.from_dbm(0.0))
    period_ns: float = 300_000.0
    profile: Profile = Profile.GAUSSIAN

    def __post_init__(self) -> None:
        if not self.duration_ns > 0:
            raise ValueError("duration_ns must be positive")
        if not self.wavelength_nm > 0:
            raise ValueError("wavelength_nm must be positive")
        if not self.period_ns > self.duration_ns:
            raise ValueError("period_ns must exceed duration_ns")
        object.__setattr__(self, "profile", Profile(self.profile))

    @property
    def photons_per_pulse(self) -> float:
        return mean_photons(self.peak_power, self.duration_ns, self.wavelength_nm)

    @property
    def sigma_ns(self) -> float:
        """Gaussian standard deviation for a FWHM of ``duration_ns``."""
        return self.duration_ns / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class FiberSegment:
    length_km: float
    alpha_db_per_km: float = DEFAULT_ALPHA_DB_PER_KM
    group_index: float = DEFAULT_GROUP_INDEX

    def __post_init__(self) -> None:
        _non_negative(self.length_km, "length_km")
        _non_negative(self.alpha_db_per_km, "alpha_db_per_km")
        if not self.group_index >= 1.0:
            raise ValueError(f"group_index must be >= 1, got {self.group_index}")

    @property
    def loss_db(self) -> float:
        return self.length_km * self.alpha_db_per_km

    @property
    def transit_ns(self) -> float:
        return self.length_km * self.group_index / SPEED_OF_LIGHT_KM_PER_NS


@dataclass(frozen=True)
class CouplerSpec:
    """A fused-fibre tap. ``orientation`` is the direction whose light reaches the tap port."""

    tap_fraction: float
    position_km: float
    excess_loss_db: float = 0.3
    orientation: Direction = Direction.FORWARD
    name: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.tap_fraction < 1.0:
            raise ValueError(f"tap_fraction must lie in (0, 1), got {self.tap_fraction}")
        _non_negative(self.excess_loss_db, "excess_loss_db")
        _non_negative(self.position_km, "position_km")
        object.__setattr__(self, "orientation", Direction(self.orientation))

    @property
    def through_loss_db(self) -> float:
        return -10.0 * math.log10(1.0 - self.tap_fraction) + self.excess_loss_db

    @property
    def tap_loss_db(self) -> float:
        return -10.0 * math.log10(self.tap_fraction) + self.excess_loss_db


def coupler_transfer(power: PowerLevel, spec: CouplerSpec) -> tuple[PowerLevel, PowerLevel]:
    """Split ``power`` into (through, tap) outputs of a coupler."""
    common = _transmittance(spec.excess_loss_db)
    through = PowerLevel(power.mw * (1.0 - spec.tap_fraction) * common)
    tap = PowerLevel(power.mw * spec.tap_fraction * common)
    return through, tap


@dataclass(frozen=True)
class ChannelTopology:
    quantum_channel: tuple[FiberSegment, ...] = (FiberSegment(1.0),)
    couplers: tuple[CouplerSpec, ...] = ()
    delay_line_km: float = 24.0
    delay_line_alpha_db_per_km: float = DEFAULT_ALPHA_DB_PER_KM
    delay_line_group_index: float = DEFAULT_GROUP_INDEX
    station_attenuator_db: float = 0.0
    mirror_loss_db: float = 1.0
    transceiver_internal_loss_db: float = 3.0
    coding_internal_loss_db: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "quantum_channel", tuple(self.quantum_channel))
        object.__setattr__(self, "couplers", tuple(self.couplers))
        if not self.quantum_channel:
            raise ValueError("quantum_channel needs at least one fibre segment")
        for name in (
            "delay_line_km",
            "delay_line_alpha_db_per_km",
            "station_attenuator_db",
            "mirror_loss_db",
            "transceiver_internal_loss_db",
            "coding_internal_loss_db",
        ):
            _non_negative(getattr(self, name), name)
        if self.delay_line_group_index < 1.0:
            raise ValueError("delay_line_group_index must be >= 1")
        positions = [c.position_km for c in self.couplers]
        if positions != sorted(positions):
            raise ValueError("couplers must be sorted by position")
        if len(set(positions)) != len(positions):
            raise ValueError("two couplers share a position")
        if positions and positions[-1] > self.length_km:
            raise ValueError("coupler positioned beyond the end of the channel")
        ids = self.port_ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate tap port ids: {ids}")

    @property
    def length_km(self) -> float:
        return sum(s.length_km for s in self.quantum_channel)

    @property
    def delay_line(self) -> FiberSegment:
        return FiberSegment(
            self.delay_line_km, self.delay_line_alpha_db_per_km, self.delay_line_group_index
        )

    def port_ids(self) -> list[str]:
        return [c.name or f"tap{i}" for i, c in enumerate(self.couplers)]

    def coupler(self, port_id: str) -> CouplerSpec:
        for pid, c in zip(self.port_ids(), self.couplers):
            if pid == port_id:
                return c
        raise KeyError(f"no tap port {port_id!r}; have {self.port_ids()}")

    def with_couplers(self, couplers) -> ChannelTopology:
        return replace(self, couplers=tuple(sorted(couplers, key=lambda c: c.position_km)))

    # -- fibre between two points of the quantum channel --------------------

    def _walk(self, x0: float, x1: float) -> tuple[float, float]:
        """Loss (dB) and transit (ns) of bare fibre between positions x0 <= x1."""
        loss = transit = 0.0
        start = 0.0
        for seg in self.quantum_channel:
            end = start + seg.length_km
            lo, hi = max(start, x0), min(end, x1)
            if hi > lo:
                loss += (hi - lo) * seg.alpha_db_per_km
                transit += (hi - lo) * seg.group_index / SPEED_OF_LIGHT_KM_PER_NS
            start = end
        return loss, transit

    def fibre_loss_db(self, x0: float, x1: float) -> float:
        lo, hi = sorted((x0, x1))
        return self._walk(lo, hi)[0]

    def fibre_transit_ns(self, x0: float, x1: float) -> float:
        lo, hi = sorted((x0, x1))
        return self._walk(lo, hi)[1]

    def through_loss_db(self, x0: float, x1: float) -> float:
        """Fibre plus coupler through-loss for light travelling between x0 and x1.

        A coupler sitting exactly at an endpoint is excluded so that a tap port
        can be treated as the point just before (forward) or after its coupler.
        """
        lo, hi = sorted((x0, x1))
        loss = self.fibre_loss_db(lo, hi)
        for c in self.couplers:
            if lo < c.position_km < hi:
                loss += c.through_loss_db
        return loss

    def channel_loss_db(self) -> float:
        """One-way channel loss including every coupler's through-loss."""
        return self.fibre_loss_db(0.0, self.length_km) + sum(c.through_loss_db for c in self.couplers)

    def channel_transit_ns(self) -> float:
        return self.fibre_transit_ns(0.0, self.length_km)

    def round_trip_ns(self) -> float:
        return 2.0 * (self.channel_transit_ns() + self.delay_line.transit_ns)


@dataclass(frozen=True)
class PulseArrival:
    node_id: str
    time_ns: float
    mean_photons: float
    direction: Direction

    def __post_init__(self) -> None:
        if self.time_ns < 0 or self.mean_photons < 0:
            raise ValueError("arrival time and photon number must be non-negative")


def key_mode_attenuator_db(topo: ChannelTopology, train: PulseTrainConfig, mu_key: float) -> float:
    """Attenuation that leaves ``mu_key`` photons per pulse at the coding-station output."""
    if mu_key <= 0:
        raise ValueError("mu_key must be positive")
    loss = (
        topo.transceiver_internal_loss_db
        + topo.channel_loss_db()
        + 2 * topo.coding_internal_loss_db
        + 2 * topo.delay_line.loss_db
        + topo.mirror_loss_db
    )
    photons_unattenuated = train.photons_per_pulse * _transmittance(loss)
    if photons_unattenuated <= mu_key:
        return 0.0
    return 10.0 * math.log10(photons_unattenuated / mu_key)


def propagate_pulse(
    train: PulseTrainConfig,
    topo: ChannelTopology,
    mode: Mode = Mode.SYNC,
    mu_key: float = 0.5,
) -> list[PulseArrival]:
    """Follow one emitted pulse around the two-pass loop.

    Returns arrivals in path order at the transceiver output, every tap port
    (only for the direction its orientation captures), the coding-station
    input, the mirror, the coding-station output, the transceiver input and
    the detectors. In sync mode the station attenuator is taken as
    ``topo.station_attenuator_db`` (0 dB by default); in key mode it is
    solved so that the coding-station output carries ``mu_key`` photons.
    """
    mode = Mode(mode)
    if not topo.quantum_channel:
        raise ValueError("empty topology")
    L = topo.length_km
    n0 = train.photons_per_pulse
    attenuator = (
        key_mode_attenuator_db(topo, train, mu_key) if mode is Mode.KEY else topo.station_attenuator_db
    )
    arrivals: list[PulseArrival] = []

    def add(node, t, loss_db, direction):
        arrivals.append(PulseArrival(node, t, n0 * _transmittance(loss_db), direction))

    fwd = Direction.FORWARD
    bwd = Direction.BACKWARD
    loss = topo.transceiver_internal_loss_db
    add("transceiver_out", 0.0, loss, fwd)
    for pid, c in zip(topo.port_ids(), topo.couplers):
        if c.orientation is fwd:
            x = c.position_km
            add(f"{pid}", topo.fibre_transit_ns(0.0, x), loss + topo.through_loss_db(0.0, x) + c.tap_loss_db, fwd)
    t_in = topo.channel_transit_ns()
    loss += topo.channel_loss_db()
    add("coding_in", t_in, loss, fwd)
    delay = topo.delay_line
    loss += topo.coding_internal_loss_db + delay.loss_db
    t_mirror = t_in + delay.transit_ns
    add("mirror", t_mirror, loss, fwd)
    loss += topo.mirror_loss_db + delay.loss_db + attenuator + topo.coding_internal_loss_db
    t_out = t_mirror + delay.transit_ns
    add("coding_out", t_out, loss, bwd)
    for pid, c in reversed(list(zip(topo.port_ids(), topo.couplers))):
        if c.orientation is bwd:
            x = c.position_km
            add(
                f"{pid}",
                t_out + topo.fibre_transit_ns(x, L),
                loss + topo.through_loss_db(x, L) + c.tap_loss_db,
                bwd,
            )
    t_back = t_out + t_in
    loss += topo.channel_loss_db()
    add("transceiver_in", t_back, loss, bwd)
    loss += topo.transceiver_internal_loss_db
    add("detector", t_back, loss, bwd)
    return arrivals


def arrival_at(arrivals: list[PulseArrival], node_id: str) -> PulseArrival:
    for a in arrivals:
        if a.node_id == node_id:
            return a
    raise KeyError(node_id)


def frame_tiling(t_rt_ps: float, t_w_ps: float) -> tuple[int, float]:
    """Smallest window count ``N_w`` whose frame ``N_w * t_w`` covers ``t_rt_ps``."""
    if not t_w_ps > 0:
        raise ValueError("window duration must be positive")
    n_w = max(1, math.ceil(t_rt_ps / t_w_ps))
    return n_w, n_w * t_w_ps


def round_trip_schedule(topo: ChannelTopology, stage1_window_ps: float) -> tuple[float, int, float]:
    """Return ``(T_rt_ns, N_w, T_s_ns)`` for a first-stage window of ``stage1_window_ps``."""
    t_rt_ps = topo.round_trip_ns() * 1e3
    n_w, t_s_ps = frame_tiling(t_rt_ps, stage1_window_ps)
    return t_rt_ps * 1e-3, n_w, t_s_ps * 1e-3


def insert_sorted(couplers: tuple[CouplerSpec, ...], spec: CouplerSpec) -> tuple[CouplerSpec, ...]:
    positions = [c.position_km for c in couplers]
    i = bisect.bisect(positions, spec.position_km)
    return couplers[:i] + (spec,) + couplers[i:]
