"""Linear centered kernel alignment and per-task representation drift."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, ProtocolError

log = logging.getLogger(__name__)

EVAL_CAP = 2000


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA, ``||X'Y||_F^2 / (||X'X||_F ||Y'Y||_F)`` on column-centered inputs.

    Accumulates in float64. Raises ``DegenerateInputError`` if either input
    has zero variance in every column.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError(f"cka needs 2-D inputs, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError("cka needs at least 2 rows")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = _centered(x)
    y = _centered(y)
    # the smaller Gram side keeps the cost at min(n, m)^2
    if x.shape[0] < max(x.shape[1], y.shape[1]):
        kx, ky = x @ x.T, y @ y.T
        cross = np.sum(kx * ky)
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    else:
        cross = np.linalg.norm(x.T @ y) ** 2
        nx, ny = np.linalg.norm(x.T @ x), np.linalg.norm(y.T @ y)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("similarity undefined: an input has zero variance")
    return float(cross / (nx * ny))


def _centered(a: np.ndarray) -> np.ndarray:
    scale = np.abs(a).max()
    c = a - a.mean(axis=0)
    # rounding residue from centering a constant column is not variance
    if scale == 0 or np.abs(c).max() <= 1e-12 * scale:
        raise DegenerateInputError("similarity undefined: an input has zero variance")
    return c


@dataclass
class DriftCurve:
    source_task: int
    points: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class DriftTracker:
    """Reference-vs-current CKA for each task's fixed evaluation subset.

    ``on_task_end(k, reps)`` stores the reference for task k (and records its
    value 1.0 at that epoch); ``on_epoch_end`` compares later snapshots against
    every stored reference.
    """

    n_tasks: int
    references: dict[int, np.ndarray] = field(default_factory=dict)
    curves: dict[int, DriftCurve] = field(default_factory=dict)

    def on_epoch_end(self, task: int, global_epoch: int, snapshots: dict[int, np.ndarray]) -> list[tuple[int, float]]:
        out = []
        for k in sorted(self.references):
            if k >= task:
                raise ProtocolError(f"reference for task {k} exists while task {task} is training")
            if k not in snapshots:
                raise ProtocolError(f"no snapshot supplied for task {k}")
            value = similarity(self.references[k], snapshots[k])
            self.curves[k].points.append((global_epoch, value))
            out.append((k, value))
        return out

    def on_task_end(self, task: int, global_epoch: int, reference: np.ndarray) -> float:
        if task in self.references:
            raise ProtocolError(f"reference for task {task} captured twice")
        if task != len(self.references) + 1:
            raise ProtocolError(f"task {task} ended before tasks 1..{task - 1}")
        self.references[task] = np.array(reference, copy=True)
        value = similarity(self.references[task], reference)
        self.curves[task] = DriftCurve(task, [(global_epoch, value)])
        return value

    def reference(self, task: int) -> np.ndarray:
        if task not in self.references:
            raise ProtocolError(f"no reference captured for task {task}")
        return self.references[task]


def similarity(reference: np.ndarray, current: np.ndarray) -> float:
    """``cka`` that scores a collapsed (constant) current snapshot as 0."""
    try:
        return cka(reference, current)
    except DegenerateInputError:
        log.warning("representation snapshot collapsed to a constant; recording CKA 0")
        return 0.0


def eval_subset(n: int, seed: int, cap: int = EVAL_CAP) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng([seed, 0xC4A])
    return np.sort(rng.choice(n, size=cap, replace=False))
