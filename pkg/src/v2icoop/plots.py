"""Static SVG figures: BEV trajectories of the target per stream, and error over time."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import GroundTruthTable, target_records  # noqa: E402
from .simcore import SimulationLog  # noqa: E402


def _truth_track(log: SimulationLog, actor: str):
    rows = [r for r in log.tables["ground_truth"] if r[1] == actor]
    return [r[2] for r in rows], [r[3] for r in rows]


def bev_figure(path, compensated: SimulationLog, uncompensated: Optional[SimulationLog] = None) -> Path:
    """Target ground truth against the raw, compensated and fused streams."""
    fig, ax = plt.subplots(figsize=(9, 4))
    gx, gy = _truth_track(compensated, compensated.target_id)
    ax.plot(gx, gy, "k-", lw=1, label="ground truth")
    ex, ey = _truth_track(compensated, compensated.ego_id)
    ax.plot(ex[:1], ey[:1], "ks", ms=6, label="CAV")
    streams = [(compensated, "rsu", "tab:green", "compensated RSU"),
               (compensated, "fused", "tab:blue", "fused")]
    if uncompensated is not None:
        streams.insert(0, (uncompensated, "rsu", "tab:red", "raw RSU"))
    for log, stream, color, label in streams:
        recs = target_records(log, stream)
        ax.scatter([r.box.center[0] for r in recs], [r.box.center[1] for r in recs], s=8, c=color,
                   label=label, alpha=0.7)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="upper left", fontsize=8)
    ax.set_title(f"{compensated.scenario}, seed {compensated.seed}")
    out = Path(path)
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out


def error_figure(path, logs: dict) -> Path:
    """Center error of the target over time for each ``label -> (log, stream)``."""
    fig, ax = plt.subplots(figsize=(9, 3.5))
    for label, (log, stream) in logs.items():
        gt = GroundTruthTable(log.tables["ground_truth"])
        recs = target_records(log, stream, gt=gt)
        ax.plot([r.time / 1000.0 for r in recs], [r.sq_error ** 0.5 for r in recs], ".-", ms=3, lw=0.6,
                label=label)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("center error [m]")
    ax.legend(fontsize=8)
    out = Path(path)
    fig.savefig(out, format="svg", bbox_inches="tight")
    plt.close(fig)
    return out
