"""Training loops and the four forgetting / transfer experiments.

* ``e1`` frozen-probe accuracy on every task during continual training
* ``e2`` CKA drift of each task's representations during continual training
* ``e3`` transfer: backbone trained on task 1 only, probes on all tasks plus
  one joint 10-way probe (recorded with ``task = 0``)
* ``e4`` reconstruction loss on every task while training on task 1 only

e1/e2 share one continual trajectory and e3/e4 share one task-1 trajectory;
the measurement hooks never touch the weights or the training noise stream.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nncore
from .cka import DriftTracker, eval_subset
from .datasets import DATASETS, INPUT_DIMS, LabeledSet, TaskSequence, batches, load_dataset, split_tasks
from .errors import ConfigurationError, NumericalError
from .metrics import MetricRecord
from .models import DEFAULT_BOTTLENECK, Model, ModelKind, build_model
from .probes import ProbeBank, evaluate_probe, train_probe

log = logging.getLogger(__name__)

EXPERIMENTS = ("e1", "e2", "e3", "e4")
CONTINUAL = ("e1", "e2")
FIRST_TASK = ("e3", "e4")
DEFAULT_EPOCHS = {"mnist": 20, "fashion": 20, "cifar10": 40}


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "mnist"
    model: str = "autoencoder"
    seed: int = 1
    experiments: tuple[str, ...] = EXPERIMENTS
    epochs_per_task: int | None = None
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bottleneck: int | None = None
    bottleneck_activation: str = "identity"
    probe_steps: int = 200
    probe_lr: float = 1e-2
    n_tasks: int = 5
    classes_per_task: int = 2
    eval_cap: int = 2000
    train_limit: int | None = None
    val_limit: int | None = None
    freeze_backbone_after: int | None = None
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}; choose from {', '.join(DATASETS)}")
        object.__setattr__(self, "model", ModelKind.parse(self.model).value)
        exps = tuple(self.experiments)
        for e in exps:
            if e not in EXPERIMENTS:
                raise ConfigurationError(f"unknown experiment {e!r}; choose from {', '.join(EXPERIMENTS)}")
        object.__setattr__(self, "experiments", tuple(e for e in EXPERIMENTS if e in exps))
        if "e4" in exps and self.model == ModelKind.DISCRIMINATIVE.value:
            raise ConfigurationError("experiment e4 needs a generative model (autoencoder or vae)")
        if self.epochs_per_task is None:
            object.__setattr__(self, "epochs_per_task", DEFAULT_EPOCHS[self.dataset])
        if self.bottleneck is None:
            object.__setattr__(self, "bottleneck", DEFAULT_BOTTLENECK[self.dataset])
        for name in ("epochs_per_task", "batch_size", "bottleneck", "probe_steps", "n_tasks",
                     "classes_per_task", "eval_cap"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("train_limit", "val_limit"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.bottleneck_activation not in nncore.ACTIVATIONS:
            raise ConfigurationError(f"bottleneck_activation must be one of {', '.join(nncore.ACTIVATIONS)}")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")

    @property
    def kind(self) -> ModelKind:
        return ModelKind(self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experiments"] = list(self.experiments)
        return d


# ---------------------------------------------------------------- data

@functools.lru_cache(maxsize=2)
def _load(data_dir: str, dataset: str):
    return load_dataset(data_dir, dataset)


def _limit(s: LabeledSet, n: int | None) -> LabeledSet:
    return s if n is None or len(s) <= n else s.subset(np.arange(n))


def task_sequence(cfg: RunConfig) -> TaskSequence:
    """The run's curriculum. The split seed is fixed so all seeds see the same tasks."""
    train, test = _load(cfg.data_dir, cfg.dataset)
    seq = split_tasks(train, cfg.n_tasks, cfg.classes_per_task, seed=0, test=test)
    if cfg.train_limit is None and cfg.val_limit is None:
        return seq
    tasks = tuple(replace(t, train=_limit(t.train, cfg.train_limit), val=_limit(t.val, cfg.val_limit))
                  for t in seq)
    return TaskSequence(tasks, seq.source)


# ---------------------------------------------------------------- training

@dataclass
class EpochContext:
    model: Model
    sequence: TaskSequence
    task: int
    epoch_in_task: int
    global_epoch: int


class Trainer:
    """Sequential training over tasks with end-of-epoch and end-of-task hooks.

    A fresh Adam state is created at every task boundary, over the trunk and
    the head in use, so inactive heads never move.
    """

    def __init__(self, model: Model, cfg: RunConfig, hooks=(), experiment: str = "train"):
        self.model = model
        self.cfg = cfg
        self.hooks = list(hooks)
        self.experiment = experiment
        self.records: list[MetricRecord] = []

    def _record(self, task, epoch, metric, value):
        self.records.append(MetricRecord(self.experiment, self.cfg.model, self.cfg.dataset, self.cfg.seed,
                                         task, epoch, metric, float(value)).check())

    def run(self, sequence: TaskSequence, n_tasks: int | None = None) -> list[MetricRecord]:
        cfg = self.cfg
        model = self.model
        global_epoch = 0
        for h in self.hooks:
            h.on_start(EpochContext(model, sequence, 0, 0, 0))
        for task in list(sequence)[:n_tasks]:
            frozen = cfg.freeze_backbone_after is not None and task.index > cfg.freeze_backbone_after
            opt = nncore.Adam(model.trainable_parameters(task.index), cfg.learning_rate,
                              cfg.beta1, cfg.beta2, cfg.epsilon)
            data = LabeledSet(task.train.inputs, task.local_labels("train"))
            for epoch in range(1, cfg.epochs_per_task + 1):
                global_epoch += 1
                total, count = 0.0, 0
                for xb, yb in batches(data, cfg.batch_size, cfg.seed, global_epoch):
                    loss, grads = model.loss_and_grads(xb, yb, task.index)
                    if not math.isfinite(loss):
                        raise NumericalError(
                            f"non-finite loss {loss} at task {task.index}, epoch {global_epoch}")
                    if not frozen:
                        opt.step(grads)
                    total += loss * len(yb)
                    count += len(yb)
                self._record(task.index, global_epoch, "train_loss", total / max(count, 1))
                ctx = EpochContext(model, sequence, task.index, epoch, global_epoch)
                for h in self.hooks:
                    h.on_epoch_end(ctx)
            log.info("%s %s seed %d: finished task %d (epoch %d, train loss %.4g)", cfg.dataset, cfg.model,
                     cfg.seed, task.index, global_epoch, total / max(count, 1))
            for h in self.hooks:
                h.on_task_end(EpochContext(model, sequence, task.index, cfg.epochs_per_task, global_epoch))
        return self.records


class Hook:
    experiment = ""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.records: list[MetricRecord] = []

    def record(self, task, epoch, metric, value):
        self.records.append(MetricRecord(self.experiment, self.cfg.model, self.cfg.dataset, self.cfg.seed,
                                         task, epoch, metric, float(value)).check())

    def on_start(self, ctx: EpochContext):
        pass

    def on_epoch_end(self, ctx: EpochContext):
        pass

    def on_task_end(self, ctx: EpochContext):
        pass


class ProbeHook(Hook):
    """Frozen-probe accuracy of every task's probe after every epoch."""

    experiment = "e1"

    def on_start(self, ctx):
        self.bank = ProbeBank(len(ctx.sequence), seed=self.cfg.seed, steps=self.cfg.probe_steps,
                              lr=self.cfg.probe_lr)
        self.val_labels = [t.local_labels("val") for t in ctx.sequence]

    def on_epoch_end(self, ctx):
        task = ctx.sequence[ctx.task - 1]
        train_reps = ctx.model.representations(task.train.inputs)
        val_reps = [ctx.model.representations(t.val.inputs) for t in ctx.sequence]
        results = self.bank.on_epoch_end(ctx.task, ctx.global_epoch, train_reps, task.local_labels("train"),
                                         val_reps, self.val_labels)
        for j, acc in results:
            self.record(j, ctx.global_epoch, "accuracy", acc)

    def on_task_end(self, ctx):
        self.bank.on_task_end(ctx.task)


class DriftHook(Hook):
    """CKA between each finished task's reference snapshot and the current one."""

    experiment = "e2"

    def on_start(self, ctx):
        self.tracker = DriftTracker(len(ctx.sequence))
        self.inputs = {}
        for t in ctx.sequence:
            idx = eval_subset(len(t.val), self.cfg.seed, self.cfg.eval_cap)
            self.inputs[t.index] = t.val.inputs[idx]

    def on_epoch_end(self, ctx):
        snaps = {k: ctx.model.representations(self.inputs[k]) for k in self.tracker.references}
        for k, value in self.tracker.on_epoch_end(ctx.task, ctx.global_epoch, snaps):
            self.record(k, ctx.global_epoch, "cka", min(value, 1.0))

    def on_task_end(self, ctx):
        value = self.tracker.on_task_end(ctx.task, ctx.global_epoch, ctx.model.representations(self.inputs[ctx.task]))
        self.record(ctx.task, ctx.global_epoch, "cka", min(value, 1.0))


class ReconstructionHook(Hook):
    """Mean per-pixel squared error of the mean-path reconstruction on every task's validation data."""

    experiment = "e4"

    def _emit(self, ctx, epoch):
        for t in ctx.sequence:
            self.record(t.index, epoch, "recon_loss", reconstruction_loss(ctx.model, t.val.inputs))

    def on_start(self, ctx):
        self._emit(ctx, 0)

    def on_epoch_end(self, ctx):
        self._emit(ctx, ctx.global_epoch)


def reconstruction_loss(model: Model, inputs: np.ndarray) -> float:
    recon = model.reconstruct(inputs)
    return float(np.mean(np.square(recon - inputs, dtype=np.float64)))


# ---------------------------------------------------------------- experiments

def _model_for(cfg: RunConfig) -> Model:
    return build_model(cfg.kind, INPUT_DIMS[cfg.dataset], cfg.n_tasks, cfg.bottleneck, cfg.seed,
                       bottleneck_activation=cfg.bottleneck_activation)


def run_continual(cfg: RunConfig, hooks, sequence: TaskSequence | None = None, model: Model | None = None):
    sequence = sequence if sequence is not None else task_sequence(cfg)
    model = model if model is not None else _model_for(cfg)
    trainer = Trainer(model, cfg, hooks, experiment="cl")
    records = trainer.run(sequence)
    return records + [r for h in hooks for r in h.records], model


def run_first_task(cfg: RunConfig, hooks, sequence: TaskSequence | None = None, model: Model | None = None):
    sequence = sequence if sequence is not None else task_sequence(cfg)
    model = model if model is not None else _model_for(cfg)
    trainer = Trainer(model, cfg, hooks, experiment="t1")
    records = trainer.run(sequence, n_tasks=1)
    return records + [r for h in hooks for r in h.records], model


def transfer_records(cfg: RunConfig, model: Model, sequence: TaskSequence, epoch: int) -> list[MetricRecord]:
    """Per-task 2-way probes and a joint 10-way probe on a task-1-trained backbone."""
    out = []

    def rec(task, value):
        out.append(MetricRecord("e3", cfg.model, cfg.dataset, cfg.seed, task, epoch, "accuracy", value).check())

    kwargs = {"steps": cfg.probe_steps, "lr": cfg.probe_lr}
    train_reps, val_reps = [], []
    for t in sequence:
        tr = model.representations(t.train.inputs)
        va = model.representations(t.val.inputs)
        train_reps.append(tr)
        val_reps.append(va)
        probe = train_probe(tr, t.local_labels("train"), 2, seed=_seed(cfg.seed, t.index), task=t.index, **kwargs)
        rec(t.index, evaluate_probe(probe, va, t.local_labels("val")))
    n_classes = sum(len(t.classes) for t in sequence)
    joint = train_probe(np.concatenate(train_reps), np.concatenate([t.train.labels for t in sequence]),
                        n_classes, seed=_seed(cfg.seed, 0), task=0, **kwargs)
    rec(0, evaluate_probe(joint, np.concatenate(val_reps), np.concatenate([t.val.labels for t in sequence])))
    return out


def _seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k, 0xE3]).generate_state(1)[0])


def run_e1_forgetting(cfg: RunConfig, sequence=None):
    return run_continual(cfg, [ProbeHook(cfg)], sequence)[0]


def run_e2_cka(cfg: RunConfig, sequence=None):
    return run_continual(cfg, [DriftHook(cfg)], sequence)[0]


def run_e3_transfer(cfg: RunConfig, sequence=None):
    sequence = sequence if sequence is not None else task_sequence(cfg)
    records, model = run_first_task(cfg, [], sequence)
    return records + transfer_records(cfg, model, sequence, cfg.epochs_per_task)


def run_e4_reconstruction(cfg: RunConfig, sequence=None):
    if cfg.kind is ModelKind.DISCRIMINATIVE:
        raise ConfigurationError("experiment e4 needs a generative model (autoencoder or vae)")
    return run_first_task(cfg, [ReconstructionHook(cfg)], sequence)[0]


def run(cfg: RunConfig, sequence: TaskSequence | None = None) -> list[MetricRecord]:
    """Every experiment selected by ``cfg``, sharing trajectories where possible."""
    sequence = sequence if sequence is not None else task_sequence(cfg)
    records: list[MetricRecord] = []
    hooks = [cls(cfg) for exp, cls in (("e1", ProbeHook), ("e2", DriftHook)) if exp in cfg.experiments]
    if hooks:
        records += run_continual(cfg, hooks, sequence)[0]
    if any(e in cfg.experiments for e in FIRST_TASK):
        hooks = [ReconstructionHook(cfg)] if "e4" in cfg.experiments else []
        recs, model = run_first_task(cfg, hooks, sequence)
        records += recs
        if "e3" in cfg.experiments:
            records += transfer_records(cfg, model, sequence, cfg.epochs_per_task)
    return records


@dataclass(frozen=True)
class SweepConfig:
    """Datasets x models x seeds expanded into individual ``RunConfig``s.

    ``options`` holds every other ``RunConfig`` field that was set explicitly;
    unset dataset-dependent fields fall back to per-dataset defaults.
    """

    datasets: tuple[str, ...] = ("mnist",)
    models: tuple[str, ...] = tuple(k.value for k in ModelKind)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    experiments: tuple[str, ...] = EXPERIMENTS
    options: dict = field(default_factory=dict)

    def expand(self) -> list[RunConfig]:
        out = []
        for dataset in self.datasets:
            for model in self.models:
                exps = tuple(e for e in self.experiments
                             if not (e == "e4" and ModelKind.parse(model) is ModelKind.DISCRIMINATIVE))
                if not exps:
                    continue
                for seed in self.seeds:
                    out.append(RunConfig(dataset=dataset, model=model, seed=seed, experiments=exps, **self.options))
        return out
