"""K-Means (k-means++ seeding, Lloyd iterations) and one-hot motion codes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from viflow.errors import ContractError


@dataclass
class SffmsCodebook:
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list)
    labels: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _sq_dists(points, centroids):
    return np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)


def _kmeans_pp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a centre already; fall back to unused indices
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans_fit(points, k: int = 20, seed: int = 0, max_iter: int = 100) -> SffmsCodebook:
    """Cluster ``points`` (N, D).

    An emptied cluster is re-seeded at the point farthest from its current
    centroid.  Stops at an assignment fixpoint or after ``max_iter`` rounds.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError("points must be an (N, D) array")
    if k < 1 or len(points) < k:
        raise ContractError(f"need at least k={k} points, got {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = np.argmin(_sq_dists(points, centroids), axis=1)
    history = []
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            d2 = np.sum((points - centroids[labels]) ** 2, axis=1)
            d2[counts[labels] < 2] = -1.0  # never empty another cluster
            far = int(np.argmax(d2))
            labels[far] = empty
            counts = np.bincount(labels, minlength=k)
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
        d = _sq_dists(points, centroids)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(points)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return SffmsCodebook(centroids, history, labels)


def sffms_encode(delta, codebook: SffmsCodebook):
    """One-hot code of the nearest centroid and the distance to it."""
    delta = np.asarray(delta, dtype=np.float64)
    d = np.sqrt(np.sum((codebook.centroids - delta) ** 2, axis=1))
    idx = int(np.argmin(d))
    code = np.zeros(codebook.k)
    code[idx] = 1.0
    return code, float(d[idx])
