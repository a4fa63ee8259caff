"""Command-line entry point: ``v2icoop run | calibrate | report | ablate``.

Exit codes: 0 success, 2 invalid configuration or input, 3 incomplete run.
"""

from __future__ import annotations

import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .ablation import mode_logs, run_ablations
from .geometry import GeometryError, HomographyEstimator, read_correspondences, write_calibration_report
from .metrics import MetricsReport, compute_metrics
from .plots import bev_figure, error_figure
from .scenario import ScenarioError, load_scenario
from .simcore import IncompleteRunError, InvalidConfigError, SimulationLog, load_config, run_simulation

EXIT_OK, EXIT_INVALID, EXIT_INCOMPLETE = 0, 2, 3


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_inputs(scenario, config_path):
    try:
        spec = load_scenario(scenario)
        config = load_config(config_path)
    except (OSError, ScenarioError, InvalidConfigError, ValueError) as exc:
        _fail(str(exc), EXIT_INVALID)
    return spec, config


def write_metrics(report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    (out / "metrics.txt").write_text(report.summary() + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "stream", "value", "samples"])
        for s in sorted(report.samples):
            w.writerow(["mean_iou", s, report.mean_iou.get(s, ""), report.samples[s]])
            w.writerow(["rmse", s, report.rmse.get(s, ""), report.samples[s]])
        for mode, d in sorted(report.first_detection_distance.items()):
            w.writerow(["first_detection_distance", mode, "" if d is None else d, ""])


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log at INFO level.")
def main(verbose):
    """Asynchronous V2I cooperative-perception simulator."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--scenario", required=True, help="Scenario YAML file or a bundled name (redlight_default).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="SimConfig YAML.")
@click.option("--seed", type=int, default=None, help="Master seed (defaults to the scenario seed).")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory for logs.")
@click.option("--no-compensation", is_flag=True, help="Forward raw RSU detections.")
@click.option("--no-v2i", is_flag=True, help="Disable RSU messages (onboard perception only).")
@click.option("--delay-source", type=click.Choice(["reported", "measured"]), default=None)
def run(scenario, config_path, seed, out, no_compensation, no_v2i, delay_source):
    """Run one simulation and write CSV logs plus a metrics summary."""
    spec, config = _load_inputs(scenario, config_path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if no_compensation:
        overrides["compensation"] = False
    if no_v2i:
        overrides["v2i"] = False
    if delay_source:
        overrides["delay_source"] = delay_source
    try:
        config = replace(config, **overrides)
        log = run_simulation(spec, config)
    except InvalidConfigError as exc:
        _fail(str(exc), EXIT_INVALID)
    except IncompleteRunError as exc:
        _fail(str(exc), EXIT_INCOMPLETE)
    log.write(out)
    report = compute_metrics(log)
    write_metrics(report, out)
    click.echo(report.summary())


@main.command()
@click.option("--correspondences", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns u_px, v_px, x_m, y_m.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Calibration report path.")
def calibrate(correspondences, out):
    """Estimate the ground-to-image homography from point correspondences."""
    try:
        pts = read_correspondences(correspondences)
        est = HomographyEstimator().fit([c.image_point for c in pts], [c.ground_point for c in pts])
    except (GeometryError, ValueError) as exc:
        _fail(str(exc), EXIT_INVALID)
    write_calibration_report(out, est.homography_, pts)
    rms = float(np.sqrt(np.mean(est.residuals_ ** 2)))
    click.echo(f"homography from {len(pts)} points, rms reprojection residual {rms:.3g} px")


@main.command()
@click.option("--logs", "logs_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="A run directory, or a directory of run directories.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def report(logs_dir, out):
    """Recompute metrics from logs and draw figures."""
    root = Path(logs_dir)
    runs = [root] if (root / "run.yaml").exists() else sorted(p.parent for p in root.glob("*/run.yaml"))
    if not runs:
        _fail(f"no run logs under {root}", EXIT_INVALID)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for run_dir in runs:
        try:
            log = SimulationLog.read(run_dir)
        except (OSError, ValueError, KeyError) as exc:
            _fail(f"{run_dir}: {exc}", EXIT_INVALID)
        if not log.complete:
            _fail(f"{run_dir}: run did not complete", EXIT_INCOMPLETE)
        name = run_dir.name if run_dir != root else "run"
        dest = out_dir / name if len(runs) > 1 else out_dir
        dest.mkdir(parents=True, exist_ok=True)
        rep = compute_metrics(log)
        write_metrics(rep, dest)
        bev_figure(dest / "bev.svg", log)
        error_figure(dest / "error.svg", {"RSU": (log, "rsu"), "fused": (log, "fused")})
        click.echo(f"[{name}]\n{rep.summary()}")


@main.command()
@click.option("--scenario", required=True)
@click.option("--seeds", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
def ablate(scenario, seeds, out, config_path, jobs):
    """Four-mode ablation over seeds 0..n-1; writes tables and figures."""
    spec, config = _load_inputs(scenario, config_path)
    try:
        result = run_ablations(spec, config, range(seeds), n_jobs=jobs)
        logs = mode_logs(spec, config, 0)
    except IncompleteRunError as exc:
        _fail(str(exc), EXIT_INCOMPLETE)
    out_dir = Path(out)
    result.write(out_dir)
    bev_figure(out_dir / "bev_seed0.svg", logs["compensated"], logs["uncompensated"])
    error_figure(out_dir / "error_seed0.svg", {
        "raw RSU": (logs["uncompensated"], "rsu"),
        "compensated RSU": (logs["compensated"], "rsu"),
        "fused": (logs["compensated"], "fused"),
    })
    click.echo(result.summary())


if __name__ == "__main__":
    main()
