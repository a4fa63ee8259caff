"""Four-way ablation ({compensation off, on} x {V2I off, on}) over many seeds."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .metrics import MetricsReport, compute_metrics
from .scenario import ScenarioSpec
from .simcore import SimConfig, SimulationLog, run_simulation

MODES = {
    "uncompensated": dict(compensation=False, v2i=True),
    "compensated": dict(compensation=True, v2i=True),
    "vehicle_only": dict(compensation=True, v2i=False),
    "uncompensated_vehicle_only": dict(compensation=False, v2i=False),
}
# rows: (table, label, mode, stream-or-distance kind)
TABLE_ROWS = (
    ("I", "rsu_uncompensated", "uncompensated", "rsu"),
    ("I", "rsu_compensated", "compensated", "rsu"),
    ("II", "rsu_compensated", "compensated", "rsu"),
    ("II", "fused", "compensated", "fused"),
    ("III", "vehicle_only", "vehicle_only", "vehicle_only"),
    ("III", "v2i_fusion", "compensated", "v2i_fusion"),
)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Population mean and std with exactly rounded sums (independent of order)."""
    vals = [v for v in values if v is not None]
    if not vals:
        return math.nan, math.nan
    m = math.fsum(vals) / len(vals)
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))


def _run_one(args) -> tuple[int, str, MetricsReport]:
    spec, config, seed, mode = args
    cfg = replace(config, seed=seed, **MODES[mode])
    return seed, mode, compute_metrics(run_simulation(spec, cfg))


@dataclass
class AblationResult:
    seeds: list
    reports: dict = field(default_factory=dict)  # (seed, mode) -> MetricsReport

    def value(self, seed: int, table: str, label: str) -> dict:
        for t, lab, mode, kind in TABLE_ROWS:
            if (t, lab) == (table, label):
                rep = self.reports[(seed, mode)]
                if kind in ("vehicle_only", "v2i_fusion"):
                    return {"first_detection_distance": rep.first_detection_distance[kind]}
                return {"mean_iou": rep.mean_iou.get(kind), "rmse": rep.rmse.get(kind),
                        "samples": rep.samples.get(kind, 0)}
        raise KeyError((table, label))

    def per_seed_rows(self) -> list[dict]:
        rows = []
        for seed in self.seeds:
            for t, lab, _, _ in TABLE_ROWS:
                rows.append({"seed": seed, "table": t, "row": lab, **self.value(seed, t, lab)})
        return rows

    def aggregate(self) -> list[dict]:
        out = []
        for t, lab, _, _ in TABLE_ROWS:
            vals = [self.value(s, t, lab) for s in self.seeds]
            row = {"table": t, "row": lab, "seeds": len(self.seeds)}
            for key in vals[0]:
                if key == "samples":
                    continue
                row[f"{key}_mean"], row[f"{key}_std"] = mean_std([v[key] for v in vals])
            out.append(row)
        return out

    def summary(self) -> str:
        lines = [f"ablation over {len(self.seeds)} seeds (mean +- std)"]
        current = None
        for row in self.aggregate():
            if row["table"] != current:
                current = row["table"]
                lines.append(f"Table {current}")
            metrics = [k[:-5] for k in row if k.endswith("_mean")]
            parts = [f"{m} {row[m + '_mean']:.4f} +- {row[m + '_std']:.4f}" for m in metrics]
            lines.append(f"  {row['row']:18s} " + "  ".join(parts))
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "per_seed.csv", self.per_seed_rows())
        _write_csv(out / "aggregate.csv", self.aggregate())
        (out / "summary.txt").write_text(self.summary() + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in keys})


def run_ablations(spec: ScenarioSpec, config: Optional[SimConfig] = None, seeds: Sequence[int] = range(20),
                  modes: Sequence[str] = tuple(MODES), n_jobs: int = 1) -> AblationResult:
    config = config or SimConfig()
    jobs = [(spec, config, int(s), m) for s in seeds for m in modes]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    res = AblationResult([int(s) for s in seeds])
    for seed, mode, rep in results:
        res.reports[(seed, mode)] = rep
    return res


def mode_logs(spec: ScenarioSpec, config: SimConfig, seed: int) -> dict[str, SimulationLog]:
    """Logs of every ablation mode for one seed (used for figures)."""
    return {m: run_simulation(spec, replace(config, seed=seed, **kw)) for m, kw in MODES.items()}
