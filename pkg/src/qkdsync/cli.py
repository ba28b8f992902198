"""Command-line runner: ``qkdsync run|calibrate|report``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, load_scenario, preset_names
from .optics import CouplerSpec, PowerLevel, coupler_transfer
from .recipes import RECIPES, RecipeReport, RunContext, to_json, summary_document

OUT_DIR_ENV = "QKDSYNC_OUT_DIR"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2


class InfeasibleCalibration(ValueError):
    pass


def calibrate_coupler(target: PowerLevel, tap_fraction: float, input_power: PowerLevel) -> float:
    """Excess loss (dB) that makes a ``tap_fraction`` coupler deliver ``target`` from ``input_power``."""
    if not 0.0 < tap_fraction < 1.0:
        raise ValueError("tap_fraction must lie in (0, 1)")
    ideal_dbm = input_power.dbm + 10.0 * math.log10(tap_fraction)
    excess = ideal_dbm - target.dbm
    if excess < 0 and not math.isclose(excess, 0.0, abs_tol=1e-12):
        raise InfeasibleCalibration(
            f"target {target.dbm:.4f} dBm is above the ideal tap output {ideal_dbm:.4f} dBm"
        )
    return max(excess, 0.0)


def output_dir(cli_value: str | None) -> Path:
    """The environment override wins over ``--out``, which wins over ./out."""
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cli_value) if cli_value else Path("out")


def emit_report(report: RecipeReport, ctx: RunContext, out: Path) -> list[Path]:
    """Write ``summary.json`` and the report's detail files; returns the paths written."""
    doc = summary_document(report, ctx)
    if not doc["results"] and not doc["checks"]:
        raise ValueError("refusing to emit an empty report")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in {"summary.json": to_json(doc), **report.files}.items():
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)
    return written


def run_recipe(
    recipe: str, cfg: ScenarioConfig, *, seed: int | None = None, trials: int | None = None,
    workers: int = 1, csv_detail: bool = False,
) -> tuple[RecipeReport, RunContext]:
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}; choose from {', '.join(RECIPES)}")
    ctx = RunContext(
        config=cfg,
        seed=cfg.seed if seed is None else seed,
        trials=cfg.trials if trials is None else trials,
        workers=max(1, workers),
        csv_detail=csv_detail,
    )
    if ctx.trials < 1:
        raise ConfigError("--trials must be >= 1")
    if not 0 <= ctx.seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    return RECIPES[recipe](ctx), ctx


def _cmd_run(args) -> int:
    try:
        cfg = load_scenario(args.config)
        report, ctx = run_recipe(
            args.recipe, cfg, seed=args.seed, trials=args.trials, workers=args.workers, csv_detail=args.csv_detail
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except ValueError as exc:
        # invariant violations in otherwise well-formed scenario values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    out = output_dir(args.out)
    emit_report(report, ctx, out)
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"{report.recipe}: {'passed' if report.passed else 'FAILED'} -> {out / 'summary.json'}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _cmd_calibrate(args) -> int:
    try:
        excess = calibrate_coupler(PowerLevel.from_dbm(args.target_dbm), args.fraction, PowerLevel.from_dbm(args.input_dbm))
    except ValueError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    _, tap = coupler_transfer(PowerLevel.from_dbm(args.input_dbm), CouplerSpec(args.fraction, 0.0, excess))
    print(json.dumps({"excess_loss_db": excess, "tap_output_dbm": tap.dbm}, sort_keys=True))
    return EXIT_OK


def _flatten(prefix: str, value, rows: list[tuple[str, str]]) -> None:
    if isinstance(value, dict):
        for k in value:
            _flatten(f"{prefix}.{k}" if prefix else k, value[k], rows)
    elif isinstance(value, list) and value and isinstance(value[0], dict):
        for i, v in enumerate(value):
            _flatten(f"{prefix}[{i}]", v, rows)
    else:
        rows.append((prefix, json.dumps(value)))


def _cmd_report(args) -> int:
    path = Path(args.input) / "summary.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    print(f"recipe {doc.get('recipe')}  scenario {doc.get('scenario')}  seed {doc.get('seed')}  trials {doc.get('trials')}")
    for name, ok in doc.get("checks", {}).items():
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
    rows: list[tuple[str, str]] = []
    _flatten("", doc.get("results", {}), rows)
    width = max((len(k) for k, _ in rows), default=0)
    for k, v in rows:
        print(f"  {k:<{width}}  {v}")
    return EXIT_OK if doc.get("passed") else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment recipe on a scenario")
    run.add_argument("recipe", choices=sorted(RECIPES))
    run.add_argument(
        "--config", default="default", help=f"scenario YAML path or preset name ({', '.join(preset_names())})"
    )
    run.add_argument("--seed", type=int, help="master seed (default: the scenario's)")
    run.add_argument("--trials", type=int, help="trial count (default: the scenario's)")
    run.add_argument("--out", help=f"output directory (overridden by ${OUT_DIR_ENV})")
    run.add_argument("--csv-detail", action="store_true", help="also write windows.csv / trace.csv")
    run.add_argument("--workers", type=int, default=1, help="concurrent trial workers")
    run.set_defaults(func=_cmd_run)

    cal = sub.add_parser("calibrate", help="solve a coupler's excess loss from a measured tap power")
    cal.add_argument("--target-dbm", type=float, required=True)
    cal.add_argument("--fraction", type=float, required=True)
    cal.add_argument("--input-dbm", type=float, default=0.0)
    cal.set_defaults(func=_cmd_calibrate)

    rep = sub.add_parser("report", help="print a summary written by `run`")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
