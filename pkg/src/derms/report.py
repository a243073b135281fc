"""
Run summaries and adaptive-vs-manual comparisons.

A run writes two files next to each other: the trajectory CSV and a JSON
summary (``RunReport``). ``compare_reports`` lines up two summaries of the same
scenario and ``render_comparison`` turns the result into a text table using the
template shipped in ``templates/``.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Literal

from jinja2 import Template
from pydantic import BaseModel, Field, ValidationError

from derms.errors import CompareError, ConfigError
from derms.services import ViolationMetrics, violation_metrics
from derms.sim import SCHEMA_VERSION, Trajectory

logger = logging.getLogger(__name__)

PACKAGE_DIR = os.path.dirname(__file__)
COMPARE_TEMPLATE_PATH = os.path.join(PACKAGE_DIR, "templates", "compare.txt.j2")

METRIC_NAMES = ("max_violation", "integral_violation", "oscillation_count")


class RunReport(BaseModel):
    """Summary JSON of one run."""

    schema_version: int = SCHEMA_VERSION
    scenario: str
    mode: Literal["adaptive", "manual"]
    seed: int
    completed: bool = True
    diagnostic: str | None = None
    ticks: int
    metrics: dict[str, ViolationMetrics]
    final_alpha: dict[str, float]
    final_beta: dict[str, float]
    runtime_s: float = Field(ge=0)
    trajectory_csv: str
    summary_json: str


class ComparisonRow(BaseModel):
    service: str
    metric: str
    a: float
    b: float
    delta: float


class Comparison(BaseModel):
    schema_version: int = SCHEMA_VERSION
    scenario: str
    mode_a: str
    mode_b: str
    rows: list[ComparisonRow]


def output_stem(trajectory: Trajectory) -> str:
    return f"{trajectory.scenario}-{trajectory.mode}-seed{trajectory.seed}"


def build_report(trajectory: Trajectory, runtime_s: float, trajectory_csv: Path,
                 summary_json: Path) -> RunReport:
    metrics = {}
    if len(trajectory):
        metrics = {sid: violation_metrics(trace, sid) for sid, trace in trajectory.services.items()}
    return RunReport(
        scenario=trajectory.scenario,
        mode=trajectory.mode,
        seed=trajectory.seed,
        completed=trajectory.completed,
        diagnostic=trajectory.diagnostic,
        ticks=len(trajectory),
        metrics=metrics,
        final_alpha=trajectory.final_alpha() if len(trajectory) else {},
        final_beta=trajectory.final_beta() if len(trajectory) else {},
        runtime_s=runtime_s,
        trajectory_csv=str(trajectory_csv),
        summary_json=str(summary_json),
    )


def write_outputs(trajectory: Trajectory, out_dir: str | Path, runtime_s: float) -> RunReport:
    """Write ``<scenario>-<mode>-seed<seed>.csv`` and ``.json`` into ``out_dir``.

    Raises:
        OSError: ``out_dir`` cannot be created or written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = output_stem(trajectory)
    csv_path = trajectory.write_csv(out_dir / f"{stem}.csv")
    json_path = out_dir / f"{stem}.json"
    report = build_report(trajectory, runtime_s, csv_path, json_path)
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {csv_path} and {json_path}")
    return report


def load_report(path: str | Path) -> RunReport:
    """Read a summary JSON.

    Raises:
        OSError: The file cannot be read.
        ConfigError: The file is not a valid run report.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        return RunReport.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{path} is not a run report: {exc.error_count()} problem(s), "
                          f"first: {exc.errors()[0]['msg']}") from exc


def compare_reports(a: RunReport, b: RunReport) -> Comparison:
    """Side-by-side metrics of two runs of the same scenario; deltas are ``b - a``."""
    if a.scenario != b.scenario:
        raise CompareError(f"reports are for different scenarios: {a.scenario} vs {b.scenario}")
    services = sorted(set(a.metrics) | set(b.metrics))
    missing = [s for s in services if s not in a.metrics or s not in b.metrics]
    if missing:
        raise CompareError(f"services {missing} are missing from one of the reports")

    rows = []
    for sid in services:
        for name in METRIC_NAMES:
            va = float(getattr(a.metrics[sid], name))
            vb = float(getattr(b.metrics[sid], name))
            rows.append(ComparisonRow(service=sid, metric=name, a=va, b=vb, delta=vb - va))
        if sid in a.final_beta and sid in b.final_beta:
            va, vb = a.final_beta[sid], b.final_beta[sid]
            rows.append(ComparisonRow(service=sid, metric="final_beta", a=va, b=vb, delta=vb - va))
    return Comparison(scenario=a.scenario, mode_a=a.mode, mode_b=b.mode, rows=rows)


def render_comparison(comparison: Comparison, template_path: str = COMPARE_TEMPLATE_PATH) -> str:
    with open(template_path, "r", encoding="utf-8") as f:
        template = Template(f.read(), trim_blocks=True, lstrip_blocks=True)
    return template.render(comparison=comparison)
