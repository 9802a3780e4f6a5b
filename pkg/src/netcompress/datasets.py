"""Datasets: a train/validation split container, CSV loading and synthetic tasks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    val_fraction: float = 0.1
    seed: int = 0
    num_classes: int | None = None
    _train_idx: np.ndarray = field(init=False, repr=False)
    _val_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if n < 1 or len(self.inputs) != n:
            raise ValueError("dataset needs n >= 1 inputs with one label each")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        order = np.random.default_rng(self.seed).permutation(n)
        n_val = int(round(self.val_fraction * n))
        self._val_idx = np.sort(order[:n_val])
        self._train_idx = np.sort(order[n_val:])

    @property
    def train(self):
        return self.inputs[self._train_idx], self.labels[self._train_idx]

    @property
    def val(self):
        return self.inputs[self._val_idx], self.labels[self._val_idx]

    @property
    def input_shape(self):
        return self.inputs.shape[1:]


def make_blobs(n: int = 200, seed: int = 0, radius: float = 1.5, offset: float = 2.0):
    """Two disks centred at ``(-offset, -offset)`` and ``(offset, offset)``.

    Points never cross the line ``x0 + x1 = 0`` while ``radius < offset*sqrt(2)``,
    so the task is linearly separable.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    centre = np.where(labels[:, None] == 1, offset, -offset)
    X = centre + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return X, labels


def make_bars(n: int = 200, seed: int = 0, size: int = 6, noise: float = 0.1):
    """Single-channel images holding one horizontal (label 0) or vertical (label 1) bar."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    X = noise * rng.standard_normal((n, 1, size, size))
    pos = rng.integers(0, size, size=n)
    for i in range(n):
        if labels[i] == 0:
            X[i, 0, pos[i], :] += 1.0
        else:
            X[i, 0, :, pos[i]] += 1.0
    return X, labels


GENERATORS = {"blobs": make_blobs, "bars": make_bars}


def load_dataset(name: str, seed: int = 0, n: int = 200, val_fraction: float = 0.1) -> Dataset:
    if name not in GENERATORS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}")
    X, y = GENERATORS[name](n=n, seed=seed)
    return Dataset(X, y, val_fraction=val_fraction, seed=seed)


def load_csv(path, val_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Rows of ``feature..., label``; a non-numeric first row is treated as a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    data = np.array(rows, dtype=np.float64)
    return Dataset(data[:, :-1], data[:, -1].astype(np.int64), val_fraction=val_fraction, seed=seed)
