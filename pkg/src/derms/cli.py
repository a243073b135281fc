"""
Command-line entry point.

    derms run --scenario selftune-low --mode adaptive --out results/
    derms compare results/vpp-step-adaptive-seed0.json results/vpp-step-manual-seed0.json
    derms catalog
    derms oracle test_data/central_instance.yaml
    derms calibrate --scenario vpp-step --horizon 1800

Failures print one line ``error[<category>]: <message>`` on stderr and exit
with the code documented in README.md.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from derms import __version__
from derms.config import (
    CentralInstanceConfig,
    load_scenario,
    override_scenario,
    parse_model,
    parse_override,
    read_yaml,
)
from derms.errors import CompareError, ConfigError, DermsError, ParameterError, SimulationError, TopologyError
from derms.oracle import CentralInstance, grid_search_central, solve_central
from derms.report import RunReport, compare_reports, load_report, render_comparison, write_outputs
from derms.scenarios import builtin_scenarios
from derms.sim import ScenarioConfig, calibrate_manual_step, run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4
EXIT_COMPARE = 5


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CompareError):
        return EXIT_COMPARE
    if isinstance(exc, (ConfigError, TopologyError, ParameterError)):
        return EXIT_CONFIG
    if isinstance(exc, DermsError):
        return EXIT_RUNTIME
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_UNEXPECTED


def category_for(exc: BaseException) -> str:
    if isinstance(exc, DermsError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def resolve_scenario(name_or_path: str, *, mode: str | None = None, seed: int | None = None,
                     overrides: Sequence[str] = ()) -> ScenarioConfig:
    """Built-in scenario by name, or a scenario YAML file, with CLI overrides applied.

    Raises:
        FileNotFoundError: The argument looks like a path and does not exist.
        ConfigError: Unknown built-in name, or the result does not validate.
    """
    values: dict[str, Any] = dict(parse_override(text) for text in overrides)
    if seed is not None:
        values["seed"] = seed
    if mode is not None:
        values["mode"] = mode

    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") or path.exists():
        if not path.exists():
            raise FileNotFoundError(f"scenario file not found: {path}")
        return load_scenario(path, values)

    catalog = builtin_scenarios()
    if name_or_path not in catalog:
        raise ConfigError(f"unknown scenario '{name_or_path}' (built-in: {', '.join(sorted(catalog))})")
    scenario = catalog[name_or_path]["adaptive"]
    return override_scenario(scenario, values) if values else scenario


def cmd_run(scenario: ScenarioConfig, out_dir: str | Path) -> RunReport:
    """Run ``scenario`` and write its trajectory CSV and summary JSON.

    A run that fails partway still writes what it recorded before the error
    is re-raised.
    """
    started = time.perf_counter()
    try:
        trajectory = run(scenario)
    except SimulationError as exc:
        if exc.trajectory is not None:
            write_outputs(exc.trajectory, out_dir, time.perf_counter() - started)
        raise
    return write_outputs(trajectory, out_dir, time.perf_counter() - started)


def cmd_compare(path_a: str | Path, path_b: str | Path, json_path: str | Path | None = None) -> str:
    """Compare two summaries; returns the text table.

    The JSON comparison goes to ``json_path`` when given, otherwise to stdout.
    """
    comparison = compare_reports(load_report(path_a), load_report(path_b))
    payload = comparison.model_dump_json(indent=2)
    if json_path is None:
        print(payload)
    else:
        Path(json_path).write_text(payload + "\n", encoding="utf-8")
    return render_comparison(comparison)


def _run(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario, mode=args.mode, seed=args.seed, overrides=args.set)
    report = cmd_run(scenario, args.out)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def _compare(args: argparse.Namespace) -> int:
    table = cmd_compare(args.report_a, args.report_b, args.json)
    # Keep stdout machine-readable when it carries the JSON
    print(table, file=sys.stderr if args.json is None else sys.stdout)
    return EXIT_OK


def _catalog(args: argparse.Namespace) -> int:
    for name, variants in builtin_scenarios().items():
        scenario = variants["adaptive"]
        services = ", ".join(f"{s.id}({s.kind})" for s in scenario.services)
        print(f"{name:20s} {scenario.horizon_s:7.0f} s  {len(scenario.devices)} DERs  {services}")
    return EXIT_OK


def _oracle(args: argparse.Namespace) -> int:
    cfg = parse_model(CentralInstanceConfig, read_yaml(args.instance), source=args.instance)
    instance = CentralInstance.from_config(cfg)
    solution = solve_central(instance, tolerance=args.tolerance)
    result = {
        "injections": solution.injections.tolist(),
        "d_lower": solution.d_lower.tolist(),
        "d_upper": solution.d_upper.tolist(),
        "value": solution.value,
        "iterations": solution.iterations,
        "residual": solution.residual,
    }
    if args.grid:
        x, value = grid_search_central(instance)
        result["grid"] = {"injections": x.tolist(), "value": value}
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _calibrate(args: argparse.Namespace) -> int:
    scenario = resolve_scenario(args.scenario, seed=args.seed, overrides=args.set)
    step = calibrate_manual_step(scenario, start=args.start, horizon_s=args.horizon)
    print(f"{step:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="derms", description="Primal-dual DER management simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="Run a scenario and write trajectory CSV + summary JSON")
    run_p.add_argument("--scenario", required=True, help="Built-in scenario name or scenario YAML file")
    run_p.add_argument("--mode", choices=["adaptive", "manual"], help="Step-size mode (default: scenario's)")
    run_p.add_argument("--seed", type=int, help="Random seed for synthetic profiles")
    run_p.add_argument("--out", default="results", help="Output directory (default: results)")
    run_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a scenario key, e.g. algorithm.gamma_up=1.01 (repeatable)")
    run_p.set_defaults(handler=_run)

    cmp_p = sub.add_parser("compare", help="Compare two run summaries of the same scenario")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    cmp_p.add_argument("--json", help="Write the JSON comparison here instead of stdout")
    cmp_p.set_defaults(handler=_compare)

    cat_p = sub.add_parser("catalog", help="List built-in scenarios")
    cat_p.set_defaults(handler=_catalog)

    orc_p = sub.add_parser("oracle", help="Solve a central instance file")
    orc_p.add_argument("instance")
    orc_p.add_argument("--tolerance", type=float, default=1e-9, help="KKT residual tolerance (default: 1e-9)")
    orc_p.add_argument("--grid", action="store_true", help="Also run the grid-search cross-check (one DER)")
    orc_p.set_defaults(handler=_oracle)

    cal_p = sub.add_parser("calibrate", help="Find the common manual step size of a scenario")
    cal_p.add_argument("--scenario", required=True)
    cal_p.add_argument("--seed", type=int)
    cal_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    cal_p.add_argument("--start", type=float, default=0.01, help="First step size tried (default: 0.01)")
    cal_p.add_argument("--horizon", type=float, help="Shorter horizon for the trial runs, seconds")
    cal_p.set_defaults(handler=_calibrate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        code = exit_code_for(exc)
        if code == EXIT_UNEXPECTED:
            logger.debug("Unexpected failure", exc_info=True)
        message = " ".join(str(exc).split())
        print(f"error[{category_for(exc)}]: {message}", file=sys.stderr)
        return code
