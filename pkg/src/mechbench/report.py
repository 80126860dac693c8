"""Leaderboard tables from result records: per-method rows, task columns, macroaverage and sigmoid score."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

# Metric kinds that may share a column; a column must hold a single kind.
METRIC_KINDS = {"cpr": "area", "cmd": "area", "auroc": "rank", "iia_mean": "accuracy", "iia_best": "accuracy",
                "mse_mean": "error", "mse_best": "error"}


class ReportError(ValueError):
    pass


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def row_key(record: Mapping) -> str:
    cfg = record["config"]
    return cfg["method"] if record["track"] == "causal" else f"{cfg['method']} ({cfg['ablation']})"


def _matches(record: Mapping, filters: Mapping[str, Sequence]) -> bool:
    cfg = record["config"]
    for key, allowed in filters.items():
        value = record.get(key, cfg.get(key))
        if value not in allowed:
            return False
    return True


@dataclass
class Report:
    metric: str
    tasks: list[str]
    rows: list[dict]  # {"method", per-task values, "average", "score"}

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "tasks": self.tasks, "rows": self.rows}, sort_keys=True, indent=1) + "\n"

    def to_tsv(self) -> str:
        header = ["method", *self.tasks, "average", "score"]
        lines = ["\t".join(header)]
        for row in self.rows:
            cells = [row["method"]] + [_fmt(row.get(t)) for t in self.tasks] + [_fmt(row["average"]), _fmt(row["score"])]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def aggregate_report(records: Iterable[Mapping], metric: str, filters: Mapping[str, Sequence] | None = None) -> Report:
    """One row per method; cells average the metric over matching records (e.g. seeds).

    Averages and scores are recomputed from whatever survives ``filters``.
    The score is the mean over tasks of sigmoid(cell value).
    """
    if metric not in METRIC_KINDS:
        raise ReportError(f"unknown metric {metric!r}")
    records = [r for r in records if _matches(r, filters or {})]
    if not records:
        raise ReportError("no records left to report")
    cells: dict[str, dict[str, list[float]]] = {}
    for r in records:
        metrics = r.get("metrics", {})
        if metric not in metrics:
            kinds = sorted({METRIC_KINDS.get(m, "?") for m in metrics})
            raise ReportError(f"record for {row_key(r)} on {r['config']['task']} has no {metric!r} "
                              f"(it reports {kinds}); cannot mix metric kinds in one column")
        value = float(metrics[metric])
        if not math.isfinite(value):
            raise ReportError(f"non-finite {metric} in record for {row_key(r)}")
        cells.setdefault(row_key(r), {}).setdefault(r["config"]["task"], []).append(value)
    tasks = sorted({t for row in cells.values() for t in row})
    rows = []
    for method in sorted(cells):
        row: dict = {"method": method}
        vals = []
        for task in tasks:
            if task in cells[method]:
                row[task] = sum(cells[method][task]) / len(cells[method][task])
                vals.append(row[task])
        row["average"] = sum(vals) / len(vals)
        row["score"] = sum(sigmoid(v) for v in vals) / len(vals)
        rows.append(row)
    return Report(metric, tasks, rows)


def load_records(paths: Iterable[str | Path]) -> list[dict]:
    """Record files, or directories searched recursively for record.json."""
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("record.json")) if p.is_dir() else [p]
        for f in files:
            out.append(json.loads(f.read_text()))
    return out


def write_report(report: Report, records: Sequence[Mapping], out_dir: str | Path) -> Path:
    """Leaderboard as JSON and TSV, plus one faithfulness-curve file per circuit record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"leaderboard-{report.metric}.json").write_text(report.to_json())
    (out / f"leaderboard-{report.metric}.tsv").write_text(report.to_tsv())
    curves = out / "curves"
    for r in records:
        if r.get("track") != "circuit" or "curve" not in r:
            continue
        cfg = r["config"]
        curves.mkdir(exist_ok=True)
        name = f"{cfg['task']}-{cfg['method']}-{cfg['ablation']}-s{cfg['seed']}.tsv"
        lines = ["k\tf_value\tf_magnitude"]
        value, magnitude = r["curve"]["value"], r["curve"]["magnitude"]
        for k, fv, fm in zip(value["k"], value["f"], magnitude["f"]):
            lines.append(f"{k!r}\t{fv!r}\t{fm!r}")
        (curves / name).write_text("\n".join(lines) + "\n")
    return out
