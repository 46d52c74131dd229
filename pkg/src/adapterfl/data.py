"""Datasets (CIFAR binaries, synthetic clusters) and client sharding."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import write_csv

# Per-channel mean/std of the training splits, applied after scaling pixels to [0, 1].
CIFAR_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}
_RECORD = {"cifar10": 3073, "cifar100": 3074}
_FILES = {
    "cifar10": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (["train.bin"], ["test.bin"]),
}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    info: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    def __post_init__(self):
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{split} labels outside [0, {self.num_classes})")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


# -- CIFAR ---------------------------------------------------------------

def read_cifar_records(path: str | os.PathLike, which: str = "cifar10") -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels from one binary batch file.
    CIFAR-100 records carry (coarse, fine) labels; the fine label is returned."""
    if which not in _RECORD:
        raise ValueError(f"unknown CIFAR variant {which!r}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    raw = np.fromfile(path, dtype=np.uint8)
    rec = _RECORD[which]
    if raw.size == 0:
        raise DataFormatError(f"{path}: empty file")
    if raw.size % rec:
        whole = raw.size // rec
        raise DataFormatError(f"{path}: truncated record at byte offset {whole * rec} "
                              f"({raw.size % rec} of {rec} bytes present)")
    recs = raw.reshape(-1, rec)
    nlab = rec - 3072
    labels = recs[:, nlab - 1].astype(np.int64)
    return recs[:, nlab:].reshape(-1, 3, 32, 32), labels


def normalize(images: np.ndarray, which: str) -> np.ndarray:
    mean, std = (np.asarray(v, dtype=np.float32)[:, None, None] for v in CIFAR_STATS[which])
    return ((images.astype(np.float32) / 255.0) - mean) / std


def load_cifar(path: str | os.PathLike, which: str = "cifar10", n_train: int | None = None,
               n_test: int | None = None) -> Dataset:
    """Load the canonical binary distribution from directory ``path``.

    ``n_train``/``n_test`` keep only a leading subset (handy for desk-scale runs).
    """
    if which not in _FILES:
        raise ValueError(f"unknown CIFAR variant {which!r}")
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: dataset directory not found")
    parts = []
    for names in _FILES[which]:
        xs, ys = zip(*(read_cifar_records(root / n, which) for n in names))
        parts.append((np.concatenate(xs), np.concatenate(ys)))
    (xtr, ytr), (xte, yte) = parts
    xtr, ytr, xte, yte = xtr[:n_train], ytr[:n_train], xte[:n_test], yte[:n_test]
    mean, std = CIFAR_STATS[which]
    return Dataset(which, normalize(xtr, which), ytr, normalize(xte, which), yte,
                   10 if which == "cifar10" else 100, {"mean": list(mean), "std": list(std)})


# -- synthetic -------------------------------------------------------------

def synthetic_dataset(num_classes: int = 4, shape: Sequence[int] = (3, 16, 16), n_train: int = 2000,
                      n_test: int = 500, seed: int = 0, separability: float = 0.5,
                      grid: int = 4) -> Dataset:
    """Gaussian class clusters laid out as images.

    Each class mean is a smooth image: a ``grid x grid`` field of standard normals,
    upsampled by nearest neighbour and scaled by ``separability``. Samples add unit
    white noise, so the Bayes classifier is nearest-mean in Euclidean distance.
    """
    if separability <= 0:
        raise ValueError("separability must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    c, h, w = (int(v) for v in shape)
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((num_classes, c, grid, grid))
    rows = np.arange(h) * grid // h
    cols = np.arange(w) * grid // w
    means = separability * coarse[:, :, rows][:, :, :, cols]

    def draw(n):
        y = rng.permutation(np.arange(n) % num_classes)
        x = means[y] + rng.standard_normal((n, c, h, w))
        return x.astype(np.float32), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset("synthetic", xtr, ytr, xte, yte, num_classes,
                   {"separability": separability, "grid": grid, "seed": seed, "class_means": means})


# -- client sharding -------------------------------------------------------

def _labels(source) -> np.ndarray:
    return np.asarray(source.y_train if isinstance(source, Dataset) else source)


def iid_split(source, num_clients: int, seed: int = 0) -> list[ClientShard]:
    """Random permutation cut into near-equal chunks (sizes differ by at most one)."""
    n = len(_labels(source))
    if not 1 <= num_clients <= n:
        raise ValueError(f"num_clients must lie in [1, {n}], got {num_clients}")
    perm = np.random.default_rng(seed).permutation(n)
    return [ClientShard(k, np.sort(chunk)) for k, chunk in enumerate(np.array_split(perm, num_clients))]


def dirichlet_split(source, num_clients: int, beta: float, seed: int = 0) -> list[ClientShard]:
    """Per class, client proportions ~ Dir(beta); counts are floored and the leftover
    samples of that class go one at a time to the currently smallest shards."""
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    labels = _labels(source)
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    sizes = np.zeros(num_clients, dtype=np.int64)
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        p = rng.dirichlet(np.full(num_clients, float(beta)))
        counts = np.floor(p * len(idx)).astype(np.int64)
        leftover = len(idx) - counts.sum()
        # stable sort: ties go to the lower client id
        for k in np.argsort(sizes + counts, kind="stable")[:leftover]:
            counts[k] += 1
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if len(part):
                buckets[k].append(part)
        sizes += counts
    return [ClientShard(k, np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64))
            for k, b in enumerate(buckets)]


def class_histograms(shards: Sequence[ClientShard], labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(labels[s.indices], minlength=num_classes) for s in shards])


def write_shards_csv(path: str | os.PathLike, shards: Sequence[ClientShard]) -> None:
    write_csv(path, ["client_id", "sample_index"],
              ((s.client_id, int(i)) for s in shards for i in s.indices))
