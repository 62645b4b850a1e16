"""Tables and plot-data files built from metrics files.

Every output is a pure function of the input records: inputs are sorted
before use and all numbers are printed with fixed formats, so the same
metrics always give byte-identical reports.

Targets
-------
``table1``  mean 2-way probe accuracy over all tasks after training on task 1 (e3)
``table2``  joint 10-way probe accuracy after training on task 1 (e3, task 0)
``fig3``    frozen-probe accuracy per task over continual training (e1)
``fig4``    CKA of each task's representations against its reference (e2)
``fig5``    reconstruction loss per task while training on task 1 (e4)
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import DATASETS
from .errors import ReportError
from .metrics import COLUMNS, MetricRecord, format_value, mean_std, read_metrics
from .models import ModelKind

TARGETS = ("table1", "table2", "fig3", "fig4", "fig5")
TARGET_EXPERIMENT = {"table1": "e3", "table2": "e3", "fig3": "e1", "fig4": "e2", "fig5": "e4"}
TARGET_METRIC = {"table1": "accuracy", "table2": "accuracy", "fig3": "accuracy", "fig4": "cka",
                 "fig5": "recon_loss"}
MODEL_ORDER = [k.value for k in ModelKind]
METRICS_GLOB = "*.metrics.csv"
MODEL_LABEL = {"discriminative": "D", "autoencoder": "G_AE", "vae": "G_VAE"}


@dataclass(frozen=True)
class Sourced:
    """A record plus the file and line it was read from."""

    record: MetricRecord
    source: str
    line: int


def load(paths) -> list[Sourced]:
    """Read metrics files; directories contribute every ``*.metrics.csv`` below them."""
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(p.rglob(METRICS_GLOB)) if p.is_dir() else [p]
    out = []
    for f in sorted(set(files)):
        # read_metrics skips nothing but blank rows, which writers never produce
        for i, rec in enumerate(read_metrics(f)):
            out.append(Sourced(rec, str(f), i + 2))
    return out


def wrap(records, source: str = "<memory>") -> list[Sourced]:
    return [Sourced(r, source, i + 2) for i, r in enumerate(records)]


def _ordered(values, order):
    return sorted(values, key=lambda v: (order.index(v) if v in order else len(order), v))


def _select(items: list[Sourced], target: str) -> list[Sourced]:
    if not items:
        raise ReportError("no data: the metrics contain no records")
    exp, metric = TARGET_EXPERIMENT[target], TARGET_METRIC[target]
    chosen = [s for s in items if s.record.experiment == exp and s.record.metric == metric]
    if target == "table1":
        chosen = [s for s in chosen if s.record.task > 0]
    elif target == "table2":
        chosen = [s for s in chosen if s.record.task == 0]
    if not chosen:
        raise ReportError(f"{target} needs experiment {exp} ({metric} records), none found in the metrics")
    return sorted(chosen, key=lambda s: (s.record, s.source, s.line))


# ---------------------------------------------------------------- tables

@dataclass
class Cell:
    dataset: str
    model: str
    mean: float
    std: float
    std_seeds: float
    n_runs: int
    sources: list[Sourced] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.dataset}/{self.model}"


def _final_epoch(items: list[Sourced]) -> list[Sourced]:
    # several epochs may be present if a run was extended; keep the last one per run
    last = defaultdict(int)
    for s in items:
        r = s.record
        key = (r.model, r.dataset, r.seed)
        last[key] = max(last[key], r.epoch)
    return [s for s in items if s.record.epoch == last[(s.record.model, s.record.dataset, s.record.seed)]]


def table1_cells(items: list[Sourced]) -> list[Cell]:
    """Per (dataset, model): mean over tasks and seeds.

    ``std`` is the spread across the five tasks of the seed-averaged per-task
    accuracies; ``std_seeds`` is the spread across seeds of each run's mean.
    """
    groups = defaultdict(list)
    for s in _final_epoch(_select(items, "table1")):
        groups[(s.record.dataset, s.record.model)].append(s)
    cells = []
    for (dataset, model), srcs in groups.items():
        by_task, by_seed = defaultdict(list), defaultdict(list)
        for s in srcs:
            by_task[s.record.task].append(s.record.value)
            by_seed[s.record.seed].append(s.record.value)
        task_means = [mean_std(v)[0] for _, v in sorted(by_task.items())]
        mean, std = mean_std(task_means)
        _, std_seeds = mean_std([mean_std(v)[0] for _, v in sorted(by_seed.items())])
        cells.append(Cell(dataset, model, mean, std, std_seeds, len(by_seed), srcs))
    return _sort_cells(cells)


def table2_cells(items: list[Sourced]) -> list[Cell]:
    """Per (dataset, model): mean and std across seeds of the joint accuracy."""
    groups = defaultdict(list)
    for s in _final_epoch(_select(items, "table2")):
        groups[(s.record.dataset, s.record.model)].append(s)
    cells = []
    for (dataset, model), srcs in groups.items():
        mean, std = mean_std([s.record.value for s in srcs])
        cells.append(Cell(dataset, model, mean, std, std, len({s.record.seed for s in srcs}), srcs))
    return _sort_cells(cells)


def _rank(dataset: str, model: str):
    d = DATASETS.index(dataset) if dataset in DATASETS else len(DATASETS)
    m = MODEL_ORDER.index(model) if model in MODEL_ORDER else len(MODEL_ORDER)
    return d, dataset, m, model


def _sort_cells(cells):
    return sorted(cells, key=lambda c: _rank(c.dataset, c.model))


def format_table(cells: list[Cell], title: str, seed_std: bool = False) -> str:
    """Models as rows, datasets as columns, values in percent."""
    datasets = _ordered({c.dataset for c in cells}, list(DATASETS))
    models = _ordered({c.model for c in cells}, MODEL_ORDER)
    lookup = {(c.dataset, c.model): c for c in cells}
    header = ["model"] + datasets
    rows = []
    for m in models:
        row = [MODEL_LABEL.get(m, m)]
        for d in datasets:
            c = lookup.get((d, m))
            if c is None:
                row.append("-")
            else:
                text = f"{100 * c.mean:.1f} ± {100 * c.std:.1f}"
                if seed_std:
                    text += f" ({100 * c.std_seeds:.1f})"
                row.append(text)
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [title, ""]
    for r in [header] + rows:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"


def cells_csv(cells: list[Cell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["dataset", "model", "mean", "std", "std_seeds", "n_runs"])
    for c in cells:
        w.writerow([c.dataset, c.model, format_value(c.mean), format_value(c.std), format_value(c.std_seeds), c.n_runs])
    return buf.getvalue()


# ---------------------------------------------------------------- figures

@dataclass
class Panel:
    """One figure panel: x values and per-task series of (mean, std) over seeds."""

    name: str
    dataset: str
    model: str
    x: list[int]
    series: dict[int, dict[int, tuple[float, float, int]]]
    sources: dict[tuple[int, int], list[Sourced]]

    def value(self, task: int, x: int):
        return self.series.get(task, {}).get(x)


def panels(items: list[Sourced], target: str) -> list[Panel]:
    chosen = _select(items, target)
    groups = defaultdict(list)
    for s in chosen:
        groups[(s.record.dataset, s.record.model)].append(s)
    out = []
    for (dataset, model), srcs in groups.items():
        cells = defaultdict(list)
        for s in srcs:
            cells[(s.record.task, s.record.epoch)].append(s)
        series: dict[int, dict[int, tuple[float, float, int]]] = defaultdict(dict)
        for (task, epoch), ss in sorted(cells.items()):
            m, sd = mean_std([s.record.value for s in ss])
            series[task][epoch] = (m, sd, len(ss))
        xs = sorted({e for (_, e) in cells})
        out.append(Panel(f"{target}_{dataset}_{model}", dataset, model, xs, dict(series), dict(cells)))
    return sorted(out, key=lambda p: _rank(p.dataset, p.model))


def panel_csv(panel: Panel) -> str:
    """``epoch`` column then ``task<j>_mean`` / ``task<j>_std`` per task; blank where undefined."""
    tasks = sorted(panel.series)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["epoch"] + [f"task{t}_{s}" for t in tasks for s in ("mean", "std")])
    for x in panel.x:
        row = [x]
        for t in tasks:
            v = panel.value(t, x)
            row += ["", ""] if v is None else [format_value(v[0]), format_value(v[1])]
        w.writerow(row)
    return buf.getvalue()


def task_boundaries(panel: Panel, n_tasks: int | None = None) -> list[int]:
    """Global epochs at which each task ended, inferred from the panel's x-range."""
    tasks = sorted(panel.series)
    n_tasks = n_tasks or (max(tasks) if tasks else 1)
    last = max(panel.x) if panel.x else 0
    per = last // n_tasks if n_tasks else last
    return [per * k for k in range(1, n_tasks + 1)] if per else [last]


def format_task_ends(panel: Panel, fmt: str = "{:.3f}") -> str:
    """Rows: 'after task k'; columns: task j (value at the end of each task)."""
    tasks = sorted(panel.series)
    ends = task_boundaries(panel, len(tasks))
    header = ["after"] + [f"task{t}" for t in tasks]
    rows = []
    for k, e in enumerate(ends, start=1):
        row = [f"task {k} (epoch {e})"]
        for t in tasks:
            v = panel.value(t, e)
            row.append("-" if v is None else fmt.format(v[0]))
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [f"{panel.name}", ""]
    for r in [header] + rows:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(lines) + "\n"


def format_epochs(panel: Panel, fmt: str = "{:.4f}") -> str:
    """Rows: every x; columns: task j mean."""
    tasks = sorted(panel.series)
    header = ["epoch"] + [f"task{t}" for t in tasks]
    rows = []
    for x in panel.x:
        rows.append([str(x)] + ["-" if panel.value(t, x) is None else fmt.format(panel.value(t, x)[0])
                                for t in tasks])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = [f"{panel.name}", ""]
    for r in [header] + rows:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def panel_svg(panel: Panel, width: int = 480, height: int = 300) -> str:
    """A bare line chart of the per-task means; deterministic text output."""
    pad = 40
    xs = panel.x or [0]
    vals = [v[0] for s in panel.series.values() for v in s.values()]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if math.isclose(lo, hi):
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-size="12">{panel.name}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="4" y="{pad}" font-size="10">{hi:.3g}</text>',
             f'<text x="4" y="{height - pad}" font-size="10">{lo:.3g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10">{x1}</text>']
    for i, t in enumerate(sorted(panel.series)):
        pts = " ".join(f"{px(x):.1f},{py(v[0]):.1f}" for x, v in sorted(panel.series[t].items()))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">task{t}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- provenance

def provenance_csv(entries: list[tuple[str, list[Sourced]]]) -> str:
    """One row per contributing record of every output cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["cell", "source", "line"] + list(COLUMNS))
    for cell, srcs in entries:
        for s in sorted(srcs, key=lambda s: (s.source, s.line)):
            r = s.record
            w.writerow([cell, s.source, s.line, r.experiment, r.model, r.dataset, r.seed, r.task, r.epoch,
                        r.metric, format_value(r.value)])
    return buf.getvalue()


# ---------------------------------------------------------------- driver

@dataclass
class Report:
    """Rendered outputs of one target: ``text`` for the terminal, ``files`` name -> content."""

    target: str
    text: str
    files: dict[str, str]

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, content in sorted(self.files.items()):
            path = out_dir / name
            path.write_text(content, encoding="utf-8", newline="")
            written.append(path)
        return written


def build(items: list[Sourced], target: str, svg: bool = False, provenance: bool = True) -> Report:
    if target not in TARGETS:
        raise ReportError(f"unknown report target {target!r}; choose from {', '.join(TARGETS)}")
    files: dict[str, str] = {}
    if target in ("table1", "table2"):
        if target == "table1":
            cells = table1_cells(items)
            text = format_table(cells, "Average 2-way probe accuracy over all tasks after task 1 "
                                       "(% ± std across tasks; across-seed std in parentheses)", seed_std=True)
        else:
            cells = table2_cells(items)
            text = format_table(cells, "Joint 10-way probe accuracy after task 1 (% ± std across seeds)")
        files[f"{target}.txt"] = text
        files[f"{target}.csv"] = cells_csv(cells)
        if provenance:
            files[f"{target}_provenance.csv"] = provenance_csv([(c.key, c.sources) for c in cells])
        return Report(target, text, files)

    chunks, prov = [], []
    for p in panels(items, target):
        files[f"{p.name}.csv"] = panel_csv(p)
        if svg:
            files[f"{p.name}.svg"] = panel_svg(p)
        chunks.append(format_epochs(p) if target == "fig5" else format_task_ends(p))
        prov += [(f"{p.dataset}/{p.model}/task{t}/epoch{e}", srcs) for (t, e), srcs in sorted(p.sources.items())]
    text = "\n".join(chunks)
    files[f"{target}.txt"] = text
    if provenance:
        files[f"{target}_provenance.csv"] = provenance_csv(prov)
    return Report(target, text, files)
