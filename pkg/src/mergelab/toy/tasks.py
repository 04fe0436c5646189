"""Synthetic Gaussian-cluster classification tasks.

Each task is a mixture of ``n_classes * clusters_per_class`` isotropic
unit-variance Gaussian clusters. Cluster centres are drawn at random (with
rejection until every pair is at least ``separation`` apart) and shifted by a
task-specific offset, so different tasks occupy different input regions.
Cluster ``c`` carries label ``c % n_classes``; with several clusters per class
the decision boundary is non-linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError

FAMILIES = ("gaussian_clusters",)
_CENTER_SPREAD = 0.75  # per-axis std of cluster centres, in units of separation
_MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class ToyTaskSpec:
    seed: int
    input_dim: int = 16
    n_classes: int = 4
    n_train: int = 1024
    n_eval: int = 512
    task_family: str = "gaussian_clusters"
    separation: float = 6.0
    clusters_per_class: int = 4
    offset: float = 32.0

    def __post_init__(self):
        if self.task_family not in FAMILIES:
            raise ArgumentError(f"unknown task family {self.task_family!r}")
        if self.input_dim < 1 or self.n_classes < 2 or self.clusters_per_class < 1:
            raise ArgumentError("need input_dim >= 1, n_classes >= 2, clusters_per_class >= 1")
        if self.n_train < 1 or self.n_eval < 1:
            raise ArgumentError("n_train and n_eval must be positive")
        if not (self.separation > 0 and self.offset >= 0):
            raise ArgumentError("separation must be positive and offset non-negative")

    @property
    def chance(self) -> float:
        return 1.0 / self.n_classes

    @property
    def n_clusters(self) -> int:
        return self.n_classes * self.clusters_per_class


@dataclass(frozen=True)
class ToyDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    centers: np.ndarray  # (n_clusters, input_dim)
    center_labels: np.ndarray


def task_centers(spec: ToyTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0])
    m = spec.n_clusters
    for _ in range(_MAX_REJECTIONS):
        c = rng.standard_normal((m, spec.input_dim)) * (_CENTER_SPREAD * spec.separation)
        d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        if m == 1 or d2.min() >= spec.separation**2:
            break
    else:
        raise ArgumentError("could not place well-separated clusters; lower separation or cluster count")
    shift = rng.standard_normal(spec.input_dim) * (spec.offset / math.sqrt(spec.input_dim))
    return c + shift, np.arange(m) % spec.n_classes


def sample_task(spec: ToyTaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fresh draws with labels balanced to within one item."""
    centers, labels = task_centers(spec)
    y = rng.permutation(np.arange(n) % spec.n_classes)
    # each item picks one of its class's clusters uniformly
    pick = rng.integers(0, spec.clusters_per_class, size=n)
    cluster = pick * spec.n_classes + y
    x = centers[cluster] + rng.standard_normal((n, spec.input_dim))
    return x, y


def generate_task(spec: ToyTaskSpec) -> ToyDataset:
    centers, labels = task_centers(spec)
    train_x, train_y = sample_task(spec, spec.n_train, np.random.default_rng([spec.seed, 1]))
    eval_x, eval_y = sample_task(spec, spec.n_eval, np.random.default_rng([spec.seed, 2]))
    return ToyDataset(train_x, train_y, eval_x, eval_y, centers, labels)


def nearest_centroid_accuracy(data: ToyDataset) -> float:
    """Eval accuracy of labelling each point with its nearest true cluster centre's class."""
    d = ((data.eval_x[:, None, :] - data.centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(data.center_labels[np.argmin(d, axis=1)] == data.eval_y))
