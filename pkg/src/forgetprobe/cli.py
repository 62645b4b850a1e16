"""``forgetprobe`` command line: run experiments, build reports, check data and gradients.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, report
from .datasets import DATASETS, dataset_files, default_data_dir, load_cifar10, load_idx
from .errors import (ConfigurationError, DimensionError, FormatError, InputError, NumericalError,
                     ReportError, UsageError)
from .experiments import EXPERIMENTS, RunConfig, SweepConfig, run
from .metrics import read_metrics, write_metrics
from .models import ModelKind

log = logging.getLogger("forgetprobe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EXPECTED_COUNTS = {"mnist": (60000, 10000), "fashion": (60000, 10000), "cifar10": (50000, 10000)}

# RunConfig fields a config file may set (besides the sweep axes below)
_OPTION_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)
                  if f.name not in ("dataset", "model", "seed", "experiments")}
_SWEEP_KEYS = {"dataset": "datasets", "datasets": "datasets", "model": "models", "models": "models",
               "seed": "seeds", "seeds": "seeds", "experiment": "experiments", "experiments": "experiments"}
_PLAN_KEYS = ("jobs",)


# ---------------------------------------------------------------- config parsing

@dataclass
class RunPlan:
    sweep: SweepConfig
    jobs: int = 1
    out_dir: str = "runs"


def _split(value) -> list[str]:
    items = value if isinstance(value, (list, tuple)) else [value]
    out = []
    for item in items:
        out += [p.strip() for p in str(item).split(",") if p.strip()]
    return out


def parse_seeds(value, key: str = "seeds") -> tuple[int, ...]:
    """``"1-5"``, ``"1,3,5"``, ``3`` or a list of those."""
    seeds = []
    for part in _split(value):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds += range(int(lo), int(hi) + 1)
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"{key}: cannot parse {part!r} as a seed or seed range") from None
    if not seeds or min(seeds) < 0:
        raise UsageError(f"{key}: need at least one non-negative seed")
    return tuple(dict.fromkeys(seeds))


def _choices(value, valid, key: str) -> tuple[str, ...]:
    out = []
    for v in _split(value):
        if v == "all":
            out += list(valid)
        elif v in valid:
            out.append(v)
        else:
            raise UsageError(f"{key}: unknown value {v!r}; valid choices: {', '.join(valid)}")
    return tuple(dict.fromkeys(out))


def _models(value, key: str = "models") -> tuple[str, ...]:
    out = []
    for v in _split(value):
        if v == "all":
            out += [k.value for k in ModelKind]
            continue
        try:
            out.append(ModelKind.parse(v).value)
        except ConfigurationError:
            valid = ", ".join(k.value for k in ModelKind)
            raise UsageError(f"{key}: unknown model {v!r}; valid choices: {valid}") from None
    return tuple(dict.fromkeys(out))


def _coerce(key: str, value):
    """Convert a config-file or flag value to the type of RunConfig field ``key``."""
    f = _OPTION_FIELDS[key]
    kind = str(f.type)
    if value is None:
        if "None" in kind:
            return None
        raise UsageError(f"{key}: a value is required")
    try:
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind.startswith("str"):
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise ValueError(value)
            return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: cannot parse {value!r} as {kind.split(' ')[0]}") from None
    return value


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as exc:  # both parsers raise their own error hierarchies
        raise UsageError(f"cannot parse config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping of keys to values")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def parse_config(args: argparse.Namespace) -> RunPlan:
    """Defaults, then config file values, then command-line flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    flags = {
        "datasets": args.dataset, "models": args.model, "seeds": args.seeds, "experiments": args.experiment,
        "epochs_per_task": args.epochs_per_task, "batch_size": args.batch_size, "bottleneck": args.bottleneck,
        "bottleneck_activation": args.bottleneck_activation, "train_limit": args.train_limit,
        "val_limit": args.val_limit, "data_dir": args.data_dir, "out_dir": args.out_dir, "jobs": args.jobs,
    }
    values.update({k: v for k, v in flags.items() if v is not None})

    sweep_axes, options, jobs = {}, {}, 1
    for key, value in values.items():
        if key in _SWEEP_KEYS:
            sweep_axes[_SWEEP_KEYS[key]] = value
        elif key in _OPTION_FIELDS:
            options[key] = _coerce(key, value)
        elif key in _PLAN_KEYS:
            try:
                jobs = int(value)
            except (TypeError, ValueError):
                raise UsageError(f"jobs: cannot parse {value!r} as int") from None
            if jobs < 1:
                raise UsageError("jobs: must be >= 1")
        else:
            raise UsageError(f"unknown configuration key {key!r}")
    options.setdefault("data_dir", default_data_dir())
    options.setdefault("out_dir", "runs")

    sweep = SweepConfig(
        datasets=_choices(sweep_axes.get("datasets", "mnist"), DATASETS, "dataset"),
        models=_models(sweep_axes.get("models", "all"), "model"),
        seeds=parse_seeds(sweep_axes.get("seeds", "1-5"), "seeds"),
        experiments=_choices(sweep_axes.get("experiments", "all"), EXPERIMENTS, "experiment"),
        options=options,
    )
    try:
        sweep.expand()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    return RunPlan(sweep, jobs, options["out_dir"])


# ---------------------------------------------------------------- run

# modules whose code determines the metric stream of a run
TRAINING_SOURCES = ("cka.py", "datasets.py", "errors.py", "experiments.py", "metrics.py", "models.py",
                    "nncore.py", "probes.py")


def code_version() -> str:
    """Package version plus a digest of the source files that shape a run's metrics."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in (root / n for n in TRAINING_SOURCES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def run_name(cfg: RunConfig) -> str:
    return f"{cfg.dataset}-{cfg.model}-seed{cfg.seed}"


def manifest_for(cfg: RunConfig) -> dict:
    config = cfg.to_dict()
    config.pop("out_dir")
    return {"config": config, "seed": cfg.seed, "code_version": code_version()}


def run_paths(cfg: RunConfig) -> tuple[Path, Path]:
    base = Path(cfg.out_dir) / run_name(cfg)
    return base.with_name(base.name + ".metrics.csv"), base.with_name(base.name + ".manifest.json")


def is_complete(cfg: RunConfig) -> bool:
    """True when the run's metrics exist beside a manifest equal to the current one."""
    metrics, manifest = run_paths(cfg)
    if not (metrics.exists() and manifest.exists()):
        return False
    try:
        stored = json.loads(manifest.read_text(encoding="utf-8"))
        read_metrics(metrics)
    except (OSError, ValueError):
        return False
    return stored == manifest_for(cfg)


def execute(cfg: RunConfig) -> tuple[str, int, float]:
    """Run one configuration and write its metrics and manifest; returns (name, n_records, seconds)."""
    metrics, manifest = run_paths(cfg)
    start = time.perf_counter()
    records = run(cfg)
    write_metrics(records, metrics)
    manifest.write_text(json.dumps(manifest_for(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run_name(cfg), len(records), time.perf_counter() - start


def cmd_run(args) -> int:
    plan = parse_config(args)
    configs = plan.sweep.expand()
    todo = []
    for cfg in configs:
        if is_complete(cfg):
            log.info("skip %s (complete, manifest matches)", run_name(cfg))
        else:
            todo.append(cfg)
    log.info("%d runs planned, %d to execute, %d worker(s)", len(configs), len(todo), plan.jobs)
    Path(plan.out_dir).mkdir(parents=True, exist_ok=True)
    if plan.jobs == 1 or len(todo) <= 1:
        results = map(execute, todo)
        for name, n, secs in results:
            print(f"{name}: {n} records in {secs:.0f}s")
    else:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            for name, n, secs in pool.map(execute, todo):
                print(f"{name}: {n} records in {secs:.0f}s")
    print(f"{len(configs)} runs in {plan.out_dir} ({len(configs) - len(todo)} reused)")
    return EXIT_OK


# ---------------------------------------------------------------- report

def cmd_report(args) -> int:
    items = report.load(args.paths)
    targets = args.target or list(report.TARGETS)
    built = []
    for target in targets:
        try:
            built.append(report.build(items, target, svg=args.svg, provenance=not args.no_provenance))
        except ReportError:
            # with no explicit target, skip the ones the metrics cannot support
            if args.target or not items:
                raise
            log.info("skip %s: required experiment missing", target)
    if not built:
        raise ReportError("no data for any report target in " + ", ".join(map(str, args.paths)))
    for r in built:
        print(r.text)
        for path in r.write(args.out_dir):
            log.info("wrote %s", path)
    return EXIT_OK


# ---------------------------------------------------------------- verify-data

def verify_dataset(data_dir, dataset: str) -> list[str]:
    """Problems found in one dataset's files (empty when it is complete)."""
    files = dataset_files(data_dir, dataset)
    problems = []
    for split, expected in zip(("train", "test"), EXPECTED_COUNTS[dataset]):
        data = load_cifar10(files[split]) if dataset == "cifar10" else load_idx(*files[split])
        if len(data) != expected:
            problems.append(f"{split}: {len(data)} records, expected {expected}")
        counts = np.bincount(data.labels, minlength=10)
        if len(counts) > 10 or np.any(counts[:10] == 0):
            problems.append(f"{split}: labels outside 0..9 or a class is missing (counts {counts.tolist()})")
    return problems


def cmd_verify_data(args) -> int:
    data_dir = args.data_dir or default_data_dir()
    datasets = _choices(args.dataset or "all", DATASETS, "dataset")
    bad = 0
    for ds in datasets:
        try:
            problems = verify_dataset(data_dir, ds)
        except (FileNotFoundError, FormatError) as exc:
            problems = [str(exc)]
        if problems:
            bad += 1
            for p in problems:
                print(f"{ds}: FAIL {p}")
        else:
            train, test = EXPECTED_COUNTS[ds]
            print(f"{ds}: ok ({train} train, {test} test)")
    return EXIT_DATA if bad else EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(instances=args.instances, seed=args.seed)
    names = sorted({r.name for r in results})
    failed = 0
    for name in names:
        rs = [r for r in results if r.name == name]
        bad = [r for r in rs if not r.passed]
        failed += len(bad)
        worst = max(r.violation for r in rs)
        status = "ok" if not bad else f"FAIL ({len(bad)} instances)"
        print(f"{name:<22} {len(rs):>3} instances  worst margin {worst:+.2e}  {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetprobe", description="Run forgetting experiments, build reports, check data and gradients.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="train models and write per-run metrics files")
    p.add_argument("--config", help="YAML or JSON file of defaults (flags override it)")
    p.add_argument("--data-dir", help="dataset root (default: $FORGETPROBE_DATA_DIR or ./data)")
    p.add_argument("--out-dir", help="directory for metrics and manifests (default: runs)")
    p.add_argument("--dataset", action="append", help=f"one of {', '.join(DATASETS)} or all (default mnist)")
    p.add_argument("--model", action="append", help="discriminative, autoencoder, vae or all (default all)")
    p.add_argument("--experiment", action="append", help=f"one of {', '.join(EXPERIMENTS)} or all (default all)")
    p.add_argument("--seeds", help="seed list or range such as 1-5 (default 1-5)")
    p.add_argument("--epochs-per-task", help="epochs per task (default 20, 40 for cifar10)")
    p.add_argument("--batch-size", help="minibatch size (default 128)")
    p.add_argument("--bottleneck", help="bottleneck width (default 8, 128 for cifar10)")
    p.add_argument("--bottleneck-activation", help="identity (default) or relu")
    p.add_argument("--train-limit", help="cap on training examples per task")
    p.add_argument("--val-limit", help="cap on validation examples per task")
    p.add_argument("--jobs", help="parallel worker processes (default 1)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tables and plot-data files from metrics")
    p.add_argument("paths", nargs="*", default=["runs"], help="metrics files or directories (default: runs)")
    p.add_argument("--target", action="append", choices=report.TARGETS, help="report target (default: all available)")
    p.add_argument("--out-dir", default="report", help="where report files go (default: report)")
    p.add_argument("--svg", action="store_true", help="also render each figure panel as SVG")
    p.add_argument("--no-provenance", action="store_true", help="skip provenance listings")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify-data", help="check dataset files, magic numbers and record counts")
    p.add_argument("--data-dir", help="dataset root (default: $FORGETPROBE_DATA_DIR or ./data)")
    p.add_argument("--dataset", action="append", help="dataset to check (default: all)")
    p.set_defaults(func=cmd_verify_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--instances", type=int, default=50, help="random instances per check (default 50)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"forgetprobe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, InputError, DimensionError, ReportError) as exc:
        print(f"forgetprobe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"forgetprobe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
