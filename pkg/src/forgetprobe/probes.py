"""Softmax-regression probes on frozen representations.

``ProbeBank`` implements the frozen-probe forgetting protocol: while task k is
active its probe is retrained from scratch after every epoch; when task k ends
the probe is frozen, so any later accuracy loss on task k can only come from
the backbone's representations drifting.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .errors import DimensionError, ProtocolError

PROBE_LR = 1e-2
PROBE_STEPS = 200
PROBE_TOL = 1e-5


@dataclass
class Probe:
    weights: np.ndarray
    bias: np.ndarray
    classes: int
    task: int = 0
    frozen: bool = False

    @classmethod
    def untrained(cls, width: int, classes: int, task: int = 0) -> "Probe":
        return cls(np.zeros((width, classes), np.float32), np.zeros((1, classes), np.float32), classes, task)

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    def freeze(self) -> None:
        self.frozen = True
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)

    def logits(self, reps: np.ndarray) -> np.ndarray:
        if reps.ndim != 2 or reps.shape[1] != self.width:
            raise DimensionError(f"probe expects {self.width}-wide representations, got shape {reps.shape}")
        return reps @ self.weights + self.bias

    def predict(self, reps: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lower class
        return np.argmax(self.logits(reps), axis=1)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weights, "<f4").tobytes())
        h.update(np.ascontiguousarray(self.bias, "<f4").tobytes())
        return h.hexdigest()


def fit_probe(probe: Probe, reps: np.ndarray, labels, seed: int = 0, steps: int = PROBE_STEPS,
              lr: float = PROBE_LR, tol: float = PROBE_TOL) -> Probe:
    """Reinitialize ``probe`` from ``seed`` and fit it by full-batch Adam on cross-entropy."""
    if probe.frozen:
        raise ProtocolError(f"probe for task {probe.task} is frozen and cannot be trained")
    if reps.shape[1] != probe.width:
        raise DimensionError(f"probe expects {probe.width}-wide representations, got {reps.shape[1]}")
    rng = np.random.default_rng(seed)
    probe.weights[...] = rng.normal(0.0, 0.01, size=probe.weights.shape)
    probe.bias[...] = 0.0
    opt = nncore.Adam([probe.weights, probe.bias], learning_rate=lr)
    reps = np.asarray(reps, dtype=np.float32)
    prev = np.inf
    for _ in range(steps):
        loss, g = nncore.cross_entropy(probe.logits(reps), labels)
        if abs(prev - loss) < tol:
            break
        prev = loss
        opt.step([reps.T @ g, g.sum(axis=0, keepdims=True)])
    return probe


def train_probe(reps: np.ndarray, labels, classes: int, seed: int = 0, task: int = 0, **kwargs) -> Probe:
    probe = Probe.untrained(reps.shape[1], classes, task)
    return fit_probe(probe, reps, labels, seed=seed, **kwargs)


def evaluate_probe(probe: Probe, reps: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(probe.predict(reps) == labels))


@dataclass
class ProbeBank:
    """Per-task 2-way probes driven by training hooks.

    Call ``on_epoch_end`` after every training epoch and ``on_task_end`` after
    the last epoch of each task; tasks must arrive in order 1..N.
    """

    n_tasks: int
    width: int = 512
    classes: int = 2
    seed: int = 0
    steps: int = PROBE_STEPS
    lr: float = PROBE_LR
    probes: list[Probe] = field(default_factory=list)
    current_task: int = 0
    finished: int = 0
    frozen_digests: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.probes:
            self.probes = [Probe.untrained(self.width, self.classes, j + 1) for j in range(self.n_tasks)]

    def _enter(self, task: int) -> None:
        if task != self.finished + 1 or task > self.n_tasks:
            raise ProtocolError(
                f"epoch hook for task {task} but task {self.finished} was the last one finished")
        self.current_task = task

    def on_epoch_end(self, task: int, global_epoch: int, train_reps: np.ndarray, train_labels,
                     val_reps: list[np.ndarray], val_labels: list[np.ndarray]) -> list[tuple[int, float]]:
        """Retrain probe ``task`` and evaluate every probe on its own task's validation reps.

        Returns ``(task j, accuracy)`` pairs for all j; probes j > task are
        still untrained and score the tie-break baseline.
        """
        self._enter(task)
        probe = self.probes[task - 1]
        fit_probe(probe, train_reps, train_labels, seed=_probe_seed(self.seed, task, global_epoch),
                  steps=self.steps, lr=self.lr)
        self._check_frozen()
        return [(j + 1, evaluate_probe(p, val_reps[j], val_labels[j])) for j, p in enumerate(self.probes)]

    def on_task_end(self, task: int) -> None:
        if task != self.current_task or task != self.finished + 1:
            raise ProtocolError(f"task {task} ended but task {self.current_task} is active")
        self.probes[task - 1].freeze()
        self.frozen_digests[task] = self.probes[task - 1].digest()
        self.finished = task

    def _check_frozen(self) -> None:
        for task, digest in self.frozen_digests.items():
            if self.probes[task - 1].digest() != digest:
                raise ProtocolError(f"frozen probe {task} changed")


def _probe_seed(seed: int, task: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, task, epoch, 0xB0BE]).generate_state(1)[0])
