"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np


def wcss(points, labels):
    points = np.asarray(points, float)
    labels = np.asarray(labels)
    return sum(float(np.sum((points[labels == j] - points[labels == j].mean(axis=0)) ** 2))
               for j in np.unique(labels))


def canonical(labels):
    """Relabel so clusters are numbered in order of first appearance."""
    seen = {}
    return [seen.setdefault(int(x), len(seen)) for x in labels]


def exhaustive_partition(points, k):
    """Minimum-WCSS partition into exactly ``k`` non-empty clusters by enumeration."""
    n = len(points)
    best = (np.inf, None)
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) != k or canonical(labels) != list(labels):
            continue
        c = wcss(points, labels)
        if c < best[0]:
            best = (c, list(labels))
    return best[1], best[0]


def exact_partition(points, k):
    """Minimum-WCSS partition by branch and bound over canonical labelings.

    Partial within-cluster sums of squares only grow as points are added, so
    the running cost is a valid lower bound for pruning.
    """
    points = np.asarray(points, float)
    n = len(points)
    best = [np.inf, None]
    cnt = np.zeros(k)
    s = np.zeros((k, points.shape[1]))
    ss = np.zeros(k)
    labels = np.full(n, -1)

    def cost_of(j):
        return ss[j] - (s[j] @ s[j]) / cnt[j] if cnt[j] else 0.0

    def rec(i, used, cost):
        if cost >= best[0] or n - i < k - used:
            return
        if i == n:
            best[0], best[1] = cost, labels.copy()
            return
        p = points[i]
        opts = sorted(range(min(used + 1, k)),
                      key=lambda j: np.sum((s[j] / cnt[j] - p) ** 2) if cnt[j] else np.inf)
        for j in opts:
            before = cost_of(j)
            cnt[j] += 1
            s[j] += p
            ss[j] += p @ p
            labels[i] = j
            rec(i + 1, max(used, j + 1), cost - before + cost_of(j))
            cnt[j] -= 1
            s[j] -= p
            ss[j] -= p @ p
        labels[i] = -1

    rec(0, 0, 0.0)
    return list(best[1]), best[0]


def separated_clusters(seed, n_per=10, spread=0.3, separation=10.0):
    """Three Gaussian blobs whose centres are ``separation`` apart (>= 10x the spread)."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0, 0], [separation, 0, 0], [0, separation, 0]], float)
    truth = np.repeat(np.arange(3), n_per)
    pts = centers[truth] + rng.normal(0, spread, (3 * n_per, 3))
    perm = rng.permutation(len(pts))
    return pts[perm], truth[perm]
