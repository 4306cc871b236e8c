"""K-means clustering of camera centres and per-cluster reference views."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MAX_LLOYD_ITERS = 100


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray  # (n,) int in [0, k)
    centroids: np.ndarray  # (k, 3)
    view_ids: tuple[int, ...] = ()
    inertia_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign_cluster(self, view_id: int) -> int:
        try:
            return int(self.labels[self.view_ids.index(view_id)])
        except ValueError:
            raise KeyError(f"view {view_id} was not part of the clustering") from None

    def members(self, cluster: int) -> list[int]:
        return [vid for vid, lab in zip(self.view_ids, self.labels) if lab == cluster]


@dataclass(frozen=True)
class ReferenceSet:
    reference_view_ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.reference_view_ids)) != len(self.reference_view_ids):
            raise ValidationError("reference views must be distinct")

    def reference_for(self, cluster: int) -> int:
        return self.reference_view_ids[cluster]


def _inertia(points, labels, centroids) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def _nearest(points, centroids):
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1), d2  # argmin picks the lowest index on ties


def _kmeans_pp(points, k, rng):
    n = len(points)
    centroids = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(np.sum((points[:, None, :] - np.array(centroids)[None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total)
        centroids.append(points[idx])
    return np.array(centroids, dtype=np.float64)


def _repair_empty(points, labels, centroids, k):
    """Move the point farthest from its centroid into each empty cluster."""
    for j in range(k):
        if np.any(labels == j):
            continue
        dist = np.sum((points - centroids[labels]) ** 2, axis=1)
        counts = np.bincount(labels, minlength=k)
        dist[counts[labels] < 2] = -1.0  # never empty another cluster
        i = int(np.argmax(dist))
        labels[i] = j
        centroids[j] = points[i]
    return labels


def kmeans(points, k: int, seed: int = 0, view_ids=None) -> ClusterAssignment:
    """Seeded k-means++ followed by Lloyd iterations.

    Deterministic for fixed ``(points, k, seed)``. Stops once assignments no
    longer change or after 100 iterations.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ValidationError("k must be >= 1")
    n_distinct = len(np.unique(points, axis=0))
    if n_distinct < k:
        raise ValidationError(f"need at least {k} distinct points, got {n_distinct}")
    view_ids = tuple(range(len(points))) if view_ids is None else tuple(int(v) for v in view_ids)
    if len(view_ids) != len(points):
        raise ValidationError("view_ids length does not match points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels, _ = _nearest(points, centroids)
    labels = _repair_empty(points, labels, centroids, k)
    history = [_inertia(points, labels, centroids)]
    for _ in range(MAX_LLOYD_ITERS):
        centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
        history.append(_inertia(points, labels, centroids))
        new_labels, _ = _nearest(points, centroids)
        new_labels = _repair_empty(points, new_labels, centroids, k)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        history.append(_inertia(points, labels, centroids))
    return ClusterAssignment(labels.astype(np.int64), centroids, view_ids, tuple(history))


def select_references(assignment: ClusterAssignment, centers) -> ReferenceSet:
    """Per cluster, the member whose camera centre is nearest the centroid."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    ids = assignment.view_ids or tuple(range(len(centers)))
    refs = []
    for j in range(assignment.k):
        members = [i for i in range(len(ids)) if assignment.labels[i] == j]
        best = min(members, key=lambda i: (np.linalg.norm(centers[i] - assignment.centroids[j]), ids[i]))
        refs.append(ids[best])
    return ReferenceSet(tuple(refs))


def format_cluster_report(assignment: ClusterAssignment, refs: ReferenceSet) -> str:
    lines = []
    for vid, lab in sorted(zip(assignment.view_ids, assignment.labels)):
        lines.append(f"{vid} {int(lab)} {int(vid in refs.reference_view_ids)}")
    return "\n".join(lines) + "\n"
