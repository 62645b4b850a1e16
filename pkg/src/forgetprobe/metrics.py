"""Metric records, their CSV persistence, and grouped aggregation."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from .errors import AggregationError, FormatError, InputError

COLUMNS = ("experiment", "model", "dataset", "seed", "task", "epoch", "metric", "value")
METRIC_RANGES = {
    "accuracy": (0.0, 1.0),
    "cka": (0.0, 1.0 + 1e-6),
    "recon_loss": (0.0, math.inf),
    "train_loss": (0.0, math.inf),
}


@dataclass(frozen=True, order=True)
class MetricRecord:
    experiment: str
    model: str
    dataset: str
    seed: int
    task: int
    epoch: int
    metric: str
    value: float

    def check(self) -> "MetricRecord":
        lo, hi = METRIC_RANGES.get(self.metric, (-math.inf, math.inf))
        if not (lo <= self.value <= hi) or math.isnan(self.value):
            raise InputError(f"{self.metric} value {self.value} outside [{lo}, {hi}]")
        return self


def format_value(value: float) -> str:
    return f"{value:.6g}"


def write_metrics(records, path) -> Path:
    """Write records as RFC-4180 CSV with values at 6 significant digits."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(COLUMNS)
    for r in records:
        row = list(astuple(r))
        row[-1] = format_value(r.value)
        writer.writerow(row)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(buf.getvalue(), encoding="utf-8", newline="")
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path) -> list[MetricRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read metrics from {path}: {exc}") from exc
    rows = csv.reader(io.StringIO(text, newline=""))
    header = next(rows, None)
    if header is None or tuple(header) != COLUMNS:
        raise FormatError(f"line 1: expected header {','.join(COLUMNS)}", path)
    out = []
    types = [f.type for f in fields(MetricRecord)]
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(COLUMNS):
            raise FormatError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(row)}", path)
        try:
            values = [int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
                      for v, t in zip(row, types)]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", path) from None
        out.append(MetricRecord(*values))
    return out


def read_many(paths) -> list[MetricRecord]:
    records = []
    for p in paths:
        records.extend(read_metrics(p))
    return records


@dataclass(frozen=True)
class AggregateResult:
    key: tuple
    mean: float
    std: float
    n_runs: int


def mean_std(values) -> tuple[float, float]:
    values = [float(v) for v in values]
    if not values:
        raise AggregationError("cannot aggregate an empty group")
    # fsum keeps the result independent of record order
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def aggregate(records, grouping=("experiment", "model", "dataset", "task", "epoch", "metric")):
    """Population mean and std of ``value`` per distinct ``grouping`` key, sorted by key."""
    groups = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, g) for g in grouping)].append(r.value)
    if not groups:
        raise AggregationError("no records to aggregate")
    results = []
    for key in sorted(groups):
        m, s = mean_std(groups[key])
        results.append(AggregateResult(key, m, s, len(groups[key])))
    return results
