"""Synthetic cluster data, stratified splits, minibatching and toy corruptions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CORRUPTION_FAMILIES = ("gaussian_noise", "rotation", "coordinate_scale", "translation",
                       "feature_dropout")

# Index 0 is the clean identity; 1..5 are the benchmark intensities.
CORRUPTION_MAGNITUDES = {
    "gaussian_noise": (0.0, 0.1, 0.25, 0.5, 1.0, 2.0),     # noise std
    "rotation": (0.0, 0.1, 0.2, 0.35, 0.5, 0.7),           # radians
    "coordinate_scale": (0.0, 0.1, 0.25, 0.45, 0.7, 0.9),  # anisotropic stretch
    "translation": (0.0, 0.5, 1.0, 1.5, 2.25, 3.0),        # shift length
    "feature_dropout": (0.0, 0.05, 0.1, 0.2, 0.35, 0.5),   # per-coordinate zeroing prob
}


@dataclass
class LabeledDataset:
    """Features with hard (int[N]) or soft (float[N, C]) labels."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "all"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y)
        if self.x.ndim != 2 or self.y.shape[0] != self.x.shape[0]:
            raise ValueError("x must be [N, d] with one label per row")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def soft(self) -> bool:
        return self.y.ndim == 2

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1) if self.soft else self.y.astype(int)

    def one_hot(self) -> np.ndarray:
        if self.soft:
            return self.y.astype(float)
        return np.eye(self.n_classes)[self.y.astype(int)]

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes, split or self.split)


def ring_centers(n: int, radius: float = 3.0) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class ClusterSpec:
    n_clusters: int = 5
    centers: np.ndarray | None = None
    radii: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    samples_per_cluster: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.centers is None:
            self.centers = ring_centers(self.n_clusters)
        self.centers = np.asarray(self.centers, dtype=float)
        self.radii = tuple(float(r) for r in self.radii)
        if self.centers.shape[0] != self.n_clusters or len(self.radii) != self.n_clusters:
            raise ValueError("need one center and one radius per cluster")
        if any(r < 0 for r in self.radii):
            raise ValueError("cluster radii must be non-negative")
        if self.samples_per_cluster < 1:
            raise ValueError("clusters must be non-empty")


def make_clusters(spec: ClusterSpec) -> LabeledDataset:
    rng = np.random.default_rng(spec.seed)
    xs, ys = [], []
    for k in range(spec.n_clusters):
        noise = rng.standard_normal((spec.samples_per_cluster, spec.centers.shape[1]))
        xs.append(spec.centers[k] + spec.radii[k] * noise)
        ys.append(np.full(spec.samples_per_cluster, k))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), spec.n_clusters)


def split(dataset: LabeledDataset, val_fraction: float, seed: int,
          test_fraction: float = 0.0) -> dict[str, LabeledDataset]:
    """Class-stratified disjoint split into train/val (and test if requested).

    Per class, ``round(n_c * fraction)`` examples go to each held-out split.
    """
    if not 0 < val_fraction < 1 or not 0 <= test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise ValueError("fractions must be in (0, 1) and leave room for training data")
    rng = np.random.default_rng(seed)
    labels = dataset.hard_labels
    parts = {"train": [], "val": [], "test": []}
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        n_test = int(round(len(idx) * test_fraction))
        if n_val == 0:
            raise ValueError(f"val_fraction {val_fraction} leaves class {c} without validation data")
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val:n_val + n_test])
        parts["train"].append(idx[n_val + n_test:])
    names = ["train", "val"] + (["test"] if test_fraction > 0 else [])
    return {name: dataset.subset(np.sort(np.concatenate(parts[name])), name) for name in names}


@dataclass
class CorruptionSpec:
    family: str
    intensity: int
    seed: int = 0
    magnitudes: dict = field(default_factory=lambda: dict(CORRUPTION_MAGNITUDES))

    def __post_init__(self):
        if self.family not in self.magnitudes:
            raise ValueError(f"unknown corruption family {self.family!r}")
        if not 0 <= self.intensity < len(self.magnitudes[self.family]):
            raise ValueError(f"intensity {self.intensity} out of range")

    @property
    def magnitude(self) -> float:
        return float(self.magnitudes[self.family][self.intensity])


def corrupt(dataset: LabeledDataset, spec: CorruptionSpec) -> LabeledDataset:
    """Apply one covariate shift. Labels are passed through untouched."""
    x = dataset.x.copy()
    mag = spec.magnitude
    # one stream per (seed, family): intensities reuse the same draws, so shifts nest
    rng = np.random.default_rng([spec.seed, CORRUPTION_FAMILIES.index(spec.family)
                                 if spec.family in CORRUPTION_FAMILIES else 99])
    if spec.family == "gaussian_noise":
        x = x + mag * rng.standard_normal(x.shape)
    elif spec.family == "rotation":
        c, s = np.cos(mag), np.sin(mag)
        x[:, :2] = x[:, :2] @ np.array([[c, s], [-s, c]])
    elif spec.family == "coordinate_scale":
        scale = np.where(np.arange(x.shape[1]) % 2 == 0, 1.0 + mag, 1.0 - mag)
        x = x * scale
    elif spec.family == "translation":
        direction = rng.standard_normal(x.shape[1])
        x = x + mag * direction / np.linalg.norm(direction)
    elif spec.family == "feature_dropout":
        x = x * (rng.random(x.shape) >= mag)
    else:
        raise ValueError(f"unknown corruption family {spec.family!r}")
    return LabeledDataset(x, dataset.y.copy(), dataset.n_classes, dataset.split)


def minibatches(data: LabeledDataset, batch_size: int, seed: int, epoch: int):
    """Yield (indices, x, y) over a fresh permutation for this (seed, epoch).

    Indices are positions within ``data``; the last batch may be short.
    """
    n = len(data)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield idx, data.x[idx], data.y[idx]


def save_csv(dataset: LabeledDataset, path) -> None:
    d = dataset.x.shape[1]
    header = [f"x{j}" for j in range(d)]
    header += [f"p{c}" for c in range(dataset.n_classes)] if dataset.soft else ["label"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for xi, yi in zip(dataset.x, dataset.y):
            ys = [repr(float(v)) for v in yi] if dataset.soft else [int(yi)]
            w.writerow([repr(float(v)) for v in xi] + ys)


def load_csv(path, n_classes: int | None = None) -> LabeledDataset:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    x = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
    if "label" in header:
        y = np.array([int(r[header.index("label")]) for r in body], dtype=int)
        n_classes = n_classes or int(y.max()) + 1
    else:
        pcols = [i for i, h in enumerate(header) if h.startswith("p")]
        y = np.array([[float(r[i]) for i in pcols] for r in body])
        n_classes = len(pcols)
    return LabeledDataset(x, y, n_classes)
