"""Scenario files: strict YAML loading with line-numbered errors, and dumping.

A scenario mirrors the module types section by section. Unknown keys are
rejected so that archived scenarios mean exactly what they say.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import yaml

from .attack import AttackScenario, InjectionSource, ModeThresholds, apply_scenario
from .detector import SpadConfig
from .framing import FrameSpec
from .optics import ChannelTopology, CouplerSpec, FiberSegment, PowerLevel, PulseTrainConfig
from .protocol import KeySessionConfig
from .sync import StageConfig, SyncPlan

PRESET_PACKAGE = "qkdsync.presets"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += source
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class _Mapping(dict):
    """dict that remembers the source line of each key."""

    lines: dict[str, int]
    line: int | None = None


class _Sequence(list):
    line: int | None = None


class _LineLoader(yaml.SafeLoader):
    pass


# YAML 1.1 wants a dot in every float; accept plain exponent forms such as 1e-5 too
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _construct_mapping(loader: _LineLoader, node: yaml.MappingNode) -> _Mapping:
    out = _Mapping()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", key_node.start_mark.line + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


def _construct_sequence(loader: _LineLoader, node: yaml.SequenceNode) -> _Sequence:
    out = _Sequence(loader.construct_object(v, deep=True) for v in node.value)
    out.line = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


@dataclass(frozen=True)
class ScenarioConfig:
    id: str = "default"
    seed: int = 0
    trials: int = 100
    topology: ChannelTopology = field(default_factory=ChannelTopology)
    pulse: PulseTrainConfig = field(default_factory=PulseTrainConfig)
    detector: SpadConfig = field(default_factory=SpadConfig)
    sync: SyncPlan = field(default_factory=SyncPlan)
    session: KeySessionConfig = field(default_factory=KeySessionConfig)
    attack: AttackScenario = field(default_factory=AttackScenario)
    max_channel_loss_db: float = 10.0
    lengths_km: tuple[float, ...] = (1.0, 2.0, 4.0, 6.0)
    classifier: ModeThresholds = field(default_factory=ModeThresholds)


# -- parsing -----------------------------------------------------------------


class _Ctx:
    def __init__(self, source: str | None):
        self.source = source

    def fail(self, msg: str, mapping: Any = None, key: str | None = None):
        line = None
        if isinstance(mapping, _Mapping):
            line = mapping.lines.get(key, mapping.line) if key is not None else mapping.line
        elif isinstance(mapping, _Sequence):
            line = mapping.line
        raise ConfigError(msg, line, self.source)


def _section(
    ctx: _Ctx, data: Any, where: str, fields: dict[str, Callable[[Any], Any]], required: tuple[str, ...] = ()
) -> dict:
    if data is None:
        data = _Mapping()
    if not isinstance(data, dict):
        ctx.fail(f"section {where!r} must be a mapping", data)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        ctx.fail(f"unknown key {unknown[0]!r} in {where!r} (allowed: {', '.join(sorted(fields))})", data, unknown[0])
    for key in required:
        if key not in data:
            ctx.fail(f"missing required key {key!r} in {where!r}", data)
    out = {}
    for key, value in data.items():
        try:
            out[key] = fields[key](value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            ctx.fail(f"{where}.{key}: {exc}", data, key)
    return out


def _build(ctx: _Ctx, data: Any, where: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        ctx.fail(f"{where}: {exc}", data)


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected a number, got {v!r}")
    return float(v)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"expected an integer, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError(f"expected a string, got {v!r}")
    return v


def _list(v):
    if not isinstance(v, list):
        raise TypeError(f"expected a list, got {v!r}")
    return v


def _parse_segment(ctx, d, where):
    kw = _section(ctx, d, where, {"length_km": _num, "alpha_db_per_km": _num, "group_index": _num}, ("length_km",))
    return _build(ctx, d, where, FiberSegment, kw)


def _parse_coupler(ctx, d, where):
    kw = _section(
        ctx,
        d,
        where,
        {"name": _str, "tap_fraction": _num, "position_km": _num, "excess_loss_db": _num, "orientation": _str},
        ("tap_fraction", "position_km"),
    )
    return _build(ctx, d, where, CouplerSpec, kw)


def _parse_topology(ctx, d):
    fields = {
        "channel": _list,
        "couplers": _list,
        "delay_line_km": _num,
        "delay_line_alpha_db_per_km": _num,
        "delay_line_group_index": _num,
        "station_attenuator_db": _num,
        "mirror_loss_db": _num,
        "transceiver_internal_loss_db": _num,
        "coding_internal_loss_db": _num,
    }
    kw = _section(ctx, d, "topology", fields)
    if "channel" in kw:
        kw["quantum_channel"] = tuple(
            _parse_segment(ctx, s, f"topology.channel[{i}]") for i, s in enumerate(kw.pop("channel"))
        )
    if "couplers" in kw:
        kw["couplers"] = tuple(_parse_coupler(ctx, c, f"topology.couplers[{i}]") for i, c in enumerate(kw["couplers"]))
    return _build(ctx, d, "topology", ChannelTopology, kw)


def _parse_pulse(ctx, d):
    kw = _section(
        ctx,
        d,
        "pulse",
        {"wavelength_nm": _num, "duration_ns": _num, "peak_power_dbm": _num, "period_ns": _num, "profile": _str},
    )
    if "peak_power_dbm" in kw:
        kw["peak_power"] = PowerLevel.from_dbm(kw.pop("peak_power_dbm"))
    return _build(ctx, d, "pulse", PulseTrainConfig, kw)


def _parse_detector(ctx, d):
    kw = _section(
        ctx,
        d,
        "detector",
        {"efficiency": _num, "dark_count_rate_hz": _num, "mode": _str, "dead_time_ns": _num, "gate_width_ns": _num},
    )
    return _build(ctx, d, "detector", SpadConfig, kw)


def _parse_sync(ctx, d):
    kw = _section(ctx, d, "sync", {"stages": _list})
    if "stages" not in kw:
        return SyncPlan()
    stages = []
    for i, s in enumerate(kw["stages"]):
        where = f"sync.stages[{i}]"
        skw = _section(ctx, s, where, {"t_w_ps": _num, "n_polls": _int, "guard_windows": _int}, ("t_w_ps", "n_polls"))
        stages.append(_build(ctx, s, where, StageConfig, skw))
    return _build(ctx, d, "sync", SyncPlan, {"stages": tuple(stages)})


def _parse_session(ctx, d):
    kw = _section(
        ctx,
        d,
        "session",
        {
            "n_pulses": _int,
            "mu_key": _num,
            "visibility": _num,
            "sample_fraction_for_qber": _num,
            "disruption_threshold_dbm": _num,
            "frame": lambda v: v,
        },
    )
    if "frame" in kw:
        f = kw["frame"]
        fkw = _section(
            ctx,
            f,
            "session.frame",
            {
                "pulses_per_frame": _int,
                "frame_period_ns": _num,
                "timing_tolerance_ps": _num,
                "pulse_spacing_ns": _num,
                "miss_budget": _num,
            },
        )
        kw["frame"] = _build(ctx, f, "session.frame", FrameSpec, fkw)
    return _build(ctx, d, "session", KeySessionConfig, kw)


def _window_end(v):
    return math.inf if v is None else _num(v)


def _parse_attack(ctx, d):
    kw = _section(ctx, d, "attack", {"taps": _list, "injections": _list, "active_window_ns": _list})
    if "taps" in kw:
        kw["taps"] = tuple(_parse_coupler(ctx, c, f"attack.taps[{i}]") for i, c in enumerate(kw["taps"]))
    if "injections" in kw:
        injs = []
        for i, s in enumerate(kw["injections"]):
            where = f"attack.injections[{i}]"
            ikw = _section(
                ctx,
                s,
                where,
                {
                    "entry_port": _str,
                    "direction": _str,
                    "power_mw": _num,
                    "rep_rate_hz": _num,
                    "wavelength_nm": _num,
                    "pulse_duration_ns": _num,
                    "phase_ns": lambda v: None if v is None else _num(v),
                    "start_ns": _num,
                },
                ("entry_port", "direction"),
            )
            if "power_mw" in ikw:
                ikw["power"] = PowerLevel.from_mw(ikw.pop("power_mw"))
            injs.append(_build(ctx, s, where, InjectionSource, ikw))
        kw["injections"] = tuple(injs)
    if "active_window_ns" in kw:
        w = kw["active_window_ns"]
        if len(w) != 2:
            ctx.fail("attack.active_window_ns must be [start, end]", d, "active_window_ns")
        kw["active_window_ns"] = (_num(w[0]), _window_end(w[1]))
    return _build(ctx, d, "attack", AttackScenario, kw)


def _parse_classifier(ctx, d):
    kw = _section(
        ctx,
        d,
        "classifier",
        {
            "multiphoton_floor_photons": _num,
            "period_cv_max": _num,
            "idle_rate_floor_hz": _num,
            "max_period_ns": _num,
            "min_periods": _int,
        },
    )
    return _build(ctx, d, "classifier", ModeThresholds, kw)


def parse_scenario(text: str, source: str | None = None) -> ScenarioConfig:
    ctx = _Ctx(source)
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.line, source) from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source) from None
    if data is None:
        data = _Mapping()
    kw = _section(
        ctx,
        data,
        "scenario",
        {
            "id": _str,
            "seed": _int,
            "trials": _int,
            "topology": lambda v: v,
            "pulse": lambda v: v,
            "detector": lambda v: v,
            "sync": lambda v: v,
            "session": lambda v: v,
            "attack": lambda v: v,
            "max_channel_loss_db": _num,
            "lengths_km": lambda v: tuple(_num(x) for x in _list(v)),
            "classifier": lambda v: v,
        },
    )
    parsers = {
        "topology": _parse_topology,
        "pulse": _parse_pulse,
        "detector": _parse_detector,
        "sync": _parse_sync,
        "session": _parse_session,
        "attack": _parse_attack,
        "classifier": _parse_classifier,
    }
    for key, parser in parsers.items():
        if key in kw:
            kw[key] = parser(ctx, kw[key])
    if kw.get("seed", 0) < 0 or kw.get("seed", 0) >= 2**64:
        ctx.fail("seed must be an unsigned 64-bit integer", data, "seed")
    if kw.get("trials", 1) < 1:
        ctx.fail("trials must be >= 1", data, "trials")
    cfg = ScenarioConfig(**kw)
    try:
        apply_scenario(cfg.topology, cfg.attack)
    except (KeyError, ValueError) as exc:
        ctx.fail(f"attack does not fit the topology: {exc}", data, "attack")
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(PRESET_PACKAGE).iterdir() if p.name.endswith(".yaml"))


def load_scenario(path_or_preset: str | Path) -> ScenarioConfig:
    """Load a scenario file, or a shipped preset by name (e.g. ``paper_fig3a``)."""
    path = Path(path_or_preset)
    if not path.exists() and str(path_or_preset) in preset_names():
        res = resources.files(PRESET_PACKAGE) / f"{path_or_preset}.yaml"
        return parse_scenario(res.read_text(encoding="utf-8"), f"preset:{path_or_preset}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc.strerror}", source=str(path)) from None
    return parse_scenario(text, str(path))


# -- dumping -----------------------------------------------------------------


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    t = cfg.topology

    def coupler(c: CouplerSpec) -> dict:
        d = {
            "tap_fraction": c.tap_fraction,
            "position_km": c.position_km,
            "excess_loss_db": c.excess_loss_db,
            "orientation": c.orientation.value,
        }
        if c.name:
            d = {"name": c.name, **d}
        return d

    a = cfg.attack
    attack: dict[str, Any] = {
        "taps": [coupler(c) for c in a.taps],
        "injections": [
            {
                "entry_port": i.entry_port,
                "direction": i.direction.value,
                "power_mw": i.power.mw,
                "rep_rate_hz": i.rep_rate_hz,
                "wavelength_nm": i.wavelength_nm,
                "pulse_duration_ns": i.pulse_duration_ns,
                "phase_ns": i.phase_ns,
                "start_ns": i.start_ns,
            }
            for i in a.injections
        ],
        "active_window_ns": [a.active_window_ns[0], None if math.isinf(a.active_window_ns[1]) else a.active_window_ns[1]],
    }
    s = cfg.session
    return {
        "id": cfg.id,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "topology": {
            "channel": [
                {"length_km": seg.length_km, "alpha_db_per_km": seg.alpha_db_per_km, "group_index": seg.group_index}
                for seg in t.quantum_channel
            ],
            "couplers": [coupler(c) for c in t.couplers],
            "delay_line_km": t.delay_line_km,
            "delay_line_alpha_db_per_km": t.delay_line_alpha_db_per_km,
            "delay_line_group_index": t.delay_line_group_index,
            "station_attenuator_db": t.station_attenuator_db,
            "mirror_loss_db": t.mirror_loss_db,
            "transceiver_internal_loss_db": t.transceiver_internal_loss_db,
            "coding_internal_loss_db": t.coding_internal_loss_db,
        },
        "pulse": {
            "wavelength_nm": cfg.pulse.wavelength_nm,
            "duration_ns": cfg.pulse.duration_ns,
            "peak_power_dbm": cfg.pulse.peak_power.dbm,
            "period_ns": cfg.pulse.period_ns,
            "profile": cfg.pulse.profile.value,
        },
        "detector": {
            "efficiency": cfg.detector.efficiency,
            "dark_count_rate_hz": cfg.detector.dark_count_rate_hz,
            "mode": cfg.detector.mode.value,
            "dead_time_ns": cfg.detector.dead_time_ns,
            "gate_width_ns": cfg.detector.gate_width_ns,
        },
        "sync": {
            "stages": [
                {"t_w_ps": st.t_w_ps, "n_polls": st.n_polls, "guard_windows": st.guard_windows} for st in cfg.sync.stages
            ]
        },
        "session": {
            "n_pulses": s.n_pulses,
            "mu_key": s.mu_key,
            "visibility": s.visibility,
            "sample_fraction_for_qber": s.sample_fraction_for_qber,
            "disruption_threshold_dbm": s.disruption_threshold_dbm,
            "frame": {
                "pulses_per_frame": s.frame.pulses_per_frame,
                "frame_period_ns": s.frame.frame_period_ns,
                "timing_tolerance_ps": s.frame.timing_tolerance_ps,
                "pulse_spacing_ns": s.frame.pulse_spacing_ns,
                "miss_budget": s.frame.miss_budget,
            },
        },
        "attack": attack,
        "max_channel_loss_db": cfg.max_channel_loss_db,
        "lengths_km": list(cfg.lengths_km),
        "classifier": {
            "multiphoton_floor_photons": cfg.classifier.multiphoton_floor_photons,
            "period_cv_max": cfg.classifier.period_cv_max,
            "idle_rate_floor_hz": cfg.classifier.idle_rate_floor_hz,
            "max_period_ns": cfg.classifier.max_period_ns,
            "min_periods": cfg.classifier.min_periods,
        },
    }


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False, default_flow_style=False)
