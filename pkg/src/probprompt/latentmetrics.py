"""Cluster-structure analytics for labelled embeddings.

Clusters are given by integer (or string) labels; distances are Euclidean.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ClusterCountError, DegenerateError, SizeError


@dataclass
class LabeledEmbeddings:
    X: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.X.shape[0]:
            raise SizeError("one label per row required")

    @property
    def groups(self) -> np.ndarray:
        """Sorted distinct labels."""
        return np.unique(self.labels)

    @property
    def k(self) -> int:
        return len(self.groups)


@dataclass
class MetricReport:
    ch: float
    silhouette_mean: float
    silhouette: np.ndarray
    centroid_distances: np.ndarray


def _centroids(data: LabeledEmbeddings) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    groups, inverse, counts = np.unique(data.labels, return_inverse=True, return_counts=True)
    sums = np.zeros((len(groups), data.X.shape[1]))
    np.add.at(sums, inverse, data.X)
    return sums / counts[:, None], inverse, counts


def calinski_harabasz(data: LabeledEmbeddings) -> float:
    if data.k < 2:
        raise ClusterCountError(f"Calinski-Harabasz needs >= 2 clusters, got {data.k}")
    centroids, inverse, counts = _centroids(data)
    overall = data.X.mean(axis=0)
    between = float(np.sum(counts * np.sum((centroids - overall) ** 2, axis=1)))
    within = float(np.sum((data.X - centroids[inverse]) ** 2))
    # centroid round-off leaves ~eps^2 * |x|^2 behind even for coincident points
    if within <= 1e-20 * float(np.sum(data.X**2)):
        raise DegenerateError("within-cluster dispersion is zero")
    n, k = data.X.shape[0], data.k
    return between / within * (n - k) / (k - 1)


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def silhouette(data: LabeledEmbeddings) -> tuple[float, np.ndarray]:
    """Mean silhouette and per-point values; singleton-cluster points score 0."""
    if data.k < 2:
        raise ClusterCountError(f"silhouette needs >= 2 clusters, got {data.k}")
    _, inverse, counts = _centroids(data)
    dist = pairwise_distances(data.X)
    n = data.X.shape[0]
    onehot = np.zeros((n, len(counts)))
    onehot[np.arange(n), inverse] = 1.0
    mean_to = (dist @ onehot) / counts  # mean distance from each point to each cluster
    own = counts[inverse]
    a = np.where(own > 1, mean_to[np.arange(n), inverse] * own / np.maximum(own - 1, 1), 0.0)
    others = mean_to.copy()
    others[np.arange(n), inverse] = np.inf
    b = others.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean()), s


def centroid_distances(data: LabeledEmbeddings) -> np.ndarray:
    centroids, _, _ = _centroids(data)
    dist = pairwise_distances(centroids)
    np.fill_diagonal(dist, 0.0)
    return dist


def metric_report(data: LabeledEmbeddings) -> MetricReport:
    s_mean, s = silhouette(data)
    return MetricReport(calinski_harabasz(data), s_mean, s, centroid_distances(data))


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (out_dims, D)
    explained: np.ndarray


def pca_project(X, out_dims: int = 2) -> PCAResult:
    """Project onto the top principal axes of the sample covariance.

    Each component is flipped so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise SizeError("PCA needs at least two rows")
    if not 1 <= out_dims <= min(n - 1, d):
        raise SizeError(f"out_dims must be in [1, {min(n - 1, d)}]")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise DegenerateError("data has zero variance")
    comps = evecs[:, :out_dims].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(out_dims), pivot])
    comps *= signs[:, None]
    return PCAResult(centered @ comps.T, comps, evals[:out_dims] / total)


# ---------------------------------------------------------------------------
# CSV emitters (9 significant digits)


def _g(x: float) -> str:
    return format(float(x), ".9g")


def write_metric_csv(path, rows: list[tuple[str, float | None, float]]) -> None:
    """One row per label; a ``None`` CH (zero within-cluster dispersion) is written as ``degenerate``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "ch", "silhouette_mean"])
        for label, ch, s in rows:
            w.writerow([label, "degenerate" if ch is None else _g(ch), _g(s)])


def write_scatter_csv(path, labels, coords: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "pc1", "pc2"])
        for label, row in zip(labels, coords):
            w.writerow([label, _g(row[0]), _g(row[1]) if len(row) > 1 else _g(0.0)])


def write_distance_csv(path, names, dist: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_a", "scene_b", "distance"])
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                w.writerow([names[i], names[j], _g(dist[i, j])])
