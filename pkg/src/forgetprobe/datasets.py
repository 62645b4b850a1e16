"""Loaders for MNIST-family IDX files and CIFAR-10 binary batches, and the
split into a sequence of class-disjoint tasks."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072

DATASETS = ("mnist", "fashion", "cifar10")
INPUT_DIMS = {"mnist": 784, "fashion": 784, "cifar10": 3072}


@dataclass(frozen=True)
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise FormatError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.labels) != self.inputs.shape[0]:
            raise FormatError(f"{self.inputs.shape[0]} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index, name=None) -> "LabeledSet":
        return LabeledSet(self.inputs[index], self.labels[index], self.name if name is None else name)


@dataclass(frozen=True)
class Task:
    """One 2-class step of the curriculum. ``index`` is 1-based."""

    index: int
    classes: tuple[int, ...]
    train: LabeledSet
    val: LabeledSet

    def local_labels(self, split: str = "train") -> np.ndarray:
        labels = (self.train if split == "train" else self.val).labels
        return np.searchsorted(np.asarray(self.classes), labels).astype(np.int64)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[Task, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"cannot read {exc}", path) from exc


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise FormatError("truncated IDX image header", path, len(raw))
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", path, 0)
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        record = (len(raw) - 16) // (rows * cols) if rows * cols else 0
        raise FormatError(f"image file truncated inside record {record} of {n}", path, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError("truncated IDX label header", path, len(raw))
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", path, 0)
    if len(raw) < 8 + n:
        raise FormatError(f"label file truncated: {n} labels declared", path, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, name: str = "") -> LabeledSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", labels_path, 4)
    return LabeledSet((images / np.float32(255)).astype(np.float32), labels.astype(np.int64), name)


# ---------------------------------------------------------------- CIFAR-10

def load_cifar10(batch_paths, name: str = "cifar10") -> LabeledSet:
    """Concatenate CIFAR-10 binary batches (label byte + 3072 channel-major pixels)."""
    xs, ys = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD
            raise FormatError(
                f"file length {len(raw)} is not a multiple of {CIFAR_RECORD}", path, whole * CIFAR_RECORD)
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(records[:, 0].astype(np.int64))
        xs.append((records[:, 1:] / np.float32(255)).astype(np.float32))
    if not xs:
        return LabeledSet(np.zeros((0, 3072), np.float32), np.zeros(0, np.int64), name)
    return LabeledSet(np.concatenate(xs), np.concatenate(ys), name)


# ---------------------------------------------------------------- on-disk layout

def _first_existing(folder: Path, names) -> Path:
    for n in names:
        for candidate in (folder / n, folder / f"{n}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(names)} (or .gz) found in {folder}")


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_IDX_ALIASES = {
    "train-images-idx3-ubyte": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train-labels-idx1-ubyte": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "t10k-images-idx3-ubyte": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "t10k-labels-idx1-ubyte": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}
_DIR_ALIASES = {
    "mnist": ("mnist", "MNIST", "MNIST/raw"),
    "fashion": ("fashion", "fashion_mnist", "FashionMNIST", "FashionMNIST/raw"),
    "cifar10": ("cifar10", "cifar-10-batches-bin", "cifar10/cifar-10-batches-bin"),
}


def dataset_dir(data_dir, dataset: str) -> Path:
    if dataset not in DATASETS:
        raise ConfigurationError(f"unknown dataset {dataset!r}; choose from {', '.join(DATASETS)}")
    root = Path(data_dir)
    for alias in _DIR_ALIASES[dataset]:
        if (root / alias).is_dir():
            return root / alias
    raise FileNotFoundError(f"no directory for {dataset} under {root} (tried {', '.join(_DIR_ALIASES[dataset])})")


def dataset_files(data_dir, dataset: str) -> dict[str, list[Path]]:
    folder = dataset_dir(data_dir, dataset)
    if dataset == "cifar10":
        train = [_first_existing(folder, (f"data_batch_{i}.bin", f"data_batch_{i}")) for i in range(1, 6)]
        test = [_first_existing(folder, ("test_batch.bin", "test_batch"))]
        return {"train": train, "test": test}
    return {split: [_first_existing(folder, _IDX_ALIASES[f]) for f in files] for split, files in IDX_FILES.items()}


def load_dataset(data_dir, dataset: str) -> tuple[LabeledSet, LabeledSet]:
    """(train, test) for one of ``DATASETS`` from the directory layout under ``data_dir``."""
    files = dataset_files(data_dir, dataset)
    if dataset == "cifar10":
        return load_cifar10(files["train"], "cifar10/train"), load_cifar10(files["test"], "cifar10/test")
    return (load_idx(*files["train"], name=f"{dataset}/train"),
            load_idx(*files["test"], name=f"{dataset}/test"))


def default_data_dir() -> str:
    return os.environ.get("FORGETPROBE_DATA_DIR", "data")


# ---------------------------------------------------------------- task split

def split_tasks(data: LabeledSet, n_tasks: int = 5, classes_per_task: int = 2, seed: int = 0,
                test: LabeledSet | None = None, val_fraction: float = 1 / 6) -> TaskSequence:
    """Assign ascending class groups to tasks: task k gets classes
    ``{c(k-1), ..., c(k-1)+c-1}`` with c = classes_per_task.

    When ``test`` is given it supplies each task's validation split; otherwise
    ``val_fraction`` of every task's shuffled samples is held out.
    """
    classes = np.unique(data.labels)
    if n_tasks * classes_per_task != len(classes):
        raise ConfigurationError(
            f"{n_tasks} tasks x {classes_per_task} classes != {len(classes)} distinct classes")
    rng = np.random.default_rng(seed)
    tasks = []
    for k in range(n_tasks):
        task_classes = tuple(int(c) for c in classes[k * classes_per_task:(k + 1) * classes_per_task])
        idx = np.flatnonzero(np.isin(data.labels, task_classes))
        idx = idx[rng.permutation(len(idx))]
        if test is None:
            n_val = int(round(len(idx) * val_fraction))
            val_idx, train_idx = np.sort(idx[:n_val]), idx[n_val:]
            val = data.subset(val_idx, f"{data.name}#task{k + 1}/val")
        else:
            train_idx = idx
            val = test.subset(np.flatnonzero(np.isin(test.labels, task_classes)), f"{test.name}#task{k + 1}")
        train = data.subset(train_idx, f"{data.name}#task{k + 1}/train")
        tasks.append(Task(k + 1, task_classes, train, val))
    return TaskSequence(tuple(tasks), data.name)


def batches(data: LabeledSet, batch_size: int, seed: int, epoch: int):
    """Yield shuffled ``(inputs, labels)`` minibatches; the permutation depends on (seed, epoch)."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield data.inputs[sel], data.labels[sel]
