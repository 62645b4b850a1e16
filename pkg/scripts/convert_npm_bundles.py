"""Rebuild canonical dataset files from npm-packaged copies.

Offline sandboxes often lack the original dataset mirrors but can reach the npm
registry. This script turns three npm tarballs into the on-disk formats the
loaders expect:

    mnist-data      -> <out>/mnist/*-ubyte            (copied verbatim)
    fashion-mnist   -> <out>/fashion/*-ubyte          (JSON per class -> IDX)
    tfjs-cifar10    -> <out>/cifar10/*.bin            (PNG strips -> 3073-byte records)

Usage:
    npm pack mnist-data fashion-mnist tfjs-cifar10
    python scripts/convert_npm_bundles.py --tarballs . --out /path/to/data
"""
from __future__ import annotations

import argparse
import glob
import io
import json
import os
import struct
import tarfile

import numpy as np
from PIL import Image


def _open(tarballs: str, prefix: str) -> tarfile.TarFile:
    matches = sorted(glob.glob(os.path.join(tarballs, f"{prefix}-[0-9]*.tgz")))
    if not matches:
        raise SystemExit(f"no {prefix} tarball under {tarballs}")
    return tarfile.open(matches[-1])


def write_idx_images(path: str, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, n, rows, cols))
        fh.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def convert_mnist(tarballs: str, out: str) -> None:
    dest = os.path.join(out, "mnist")
    os.makedirs(dest, exist_ok=True)
    with _open(tarballs, "mnist-data") as tar:
        for member in tar.getmembers():
            if member.name.startswith("package/data/") and member.isfile():
                data = tar.extractfile(member).read()
                with open(os.path.join(dest, os.path.basename(member.name)), "wb") as fh:
                    fh.write(data)


def convert_fashion(tarballs: str, out: str, test_per_class: int = 1000) -> None:
    # The bundle stores 7000 images per class with the official train/test
    # membership lost; the last `test_per_class` of each class become test.
    dest = os.path.join(out, "fashion")
    os.makedirs(dest, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    with _open(tarballs, "fashion-mnist") as tar:
        for c in range(10):
            raw = json.load(tar.extractfile(f"package/src/clothes/{c}.json"))["data"]
            imgs = np.array([r for r in raw if len(r) == 784], dtype=np.uint8)
            train_x.append(imgs[:-test_per_class])
            test_x.append(imgs[-test_per_class:])
            train_y.append(np.full(len(imgs) - test_per_class, c, dtype=np.uint8))
            test_y.append(np.full(test_per_class, c, dtype=np.uint8))
    rng = np.random.default_rng(0)
    for split, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        write_idx_images(os.path.join(dest, f"{split}-images-idx3-ubyte"), x[order].reshape(-1, 28, 28))
        write_idx_labels(os.path.join(dest, f"{split}-labels-idx1-ubyte"), y[order])


def convert_cifar(tarballs: str, out: str) -> None:
    # Each PNG strip is 1024 wide x 10000 tall: one image per row, RGB
    # interleaved; canonical records want label + R plane + G plane + B plane.
    dest = os.path.join(out, "cifar10")
    os.makedirs(dest, exist_ok=True)
    with _open(tarballs, "tfjs-cifar10") as tar:
        train_labels = json.load(tar.extractfile("package/train_lables.json"))
        test_labels = json.load(tar.extractfile("package/test_lables.json"))
        batches = [(f"data_batch_{i}", train_labels[(i - 1) * 10000:i * 10000]) for i in range(1, 6)]
        batches.append(("test_batch", test_labels))
        for name, labels in batches:
            png = Image.open(io.BytesIO(tar.extractfile(f"package/{name}.png").read())).convert("RGB")
            pixels = np.asarray(png, dtype=np.uint8).reshape(-1, 1024, 3)
            assert pixels.shape[0] == len(labels) == 10000
            planes = pixels.transpose(0, 2, 1).reshape(-1, 3072)
            records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
            with open(os.path.join(dest, f"{name}.bin"), "wb") as fh:
                fh.write(records.tobytes())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tarballs", default=".")
    parser.add_argument("--out", required=True)
    args = parser.parse_args()
    convert_mnist(args.tarballs, args.out)
    convert_fashion(args.tarballs, args.out)
    convert_cifar(args.tarballs, args.out)


if __name__ == "__main__":
    main()
