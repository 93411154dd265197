"""Shared test utilities: naive reference implementations and finite-difference
gradient checking. Everything here is deliberately simple and independent of
the library's own code paths so tests compare two routes to the same answer.
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray


# -- naive DBSCAN (reference implementation) ----------------------------------------


def naive_dbscan(dist: Array, eps: float, min_samples: int) -> Array:
    """O(n^2) DBSCAN on a precomputed distance matrix.

    Semantics mirror the textbook algorithm: neighborhoods are closed balls
    (d <= eps, self included), a point is core when its neighborhood has at
    least min_samples points, clusters are the connected components of core
    points under the neighbor relation, and border points join the
    earliest-seeded cluster (seeds scanned in index order) that reaches them.
    Returns labels with -1 for noise.
    """
    n = dist.shape[0]
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_samples for nb in neighbors])
    labels = np.full(n, -1, dtype=int)
    current = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        frontier = [seed]
        labels[seed] = current
        while frontier:
            p = frontier.pop()
            for q in neighbors[p]:
                if labels[q] == -1:
                    labels[q] = current
                    if core[q]:
                        frontier.append(q)
        current += 1
    return labels


def labelings_equivalent(a: Array, b: Array) -> bool:
    """True when two cluster labelings agree up to a relabeling of the
    non-noise clusters (noise must match exactly)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    if not ((a == -1) == (b == -1)).all():
        return False
    mapping: dict[int, int] = {}
    seen: set[int] = set()
    for x, y in zip(a.tolist(), b.tolist()):
        if x == -1:
            continue
        if x not in mapping:
            if y in seen:
                return False
            mapping[x] = y
            seen.add(y)
        elif mapping[x] != y:
            return False
    return True


# -- naive average precision ---------------------------------------------------------


def naive_average_precision(relevance: list[bool]) -> float:
    """AP of a ranked relevance list: mean of precision-at-r over relevant r."""
    hits = 0
    precisions = []
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return float("nan")
    return sum(precisions) / len(precisions)


# -- finite differences ---------------------------------------------------------------


def central_difference(f, x: Array, step: float = 1e-5) -> Array:
    """Central-difference gradient of scalar f at x, probing every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1.0) -> float:
    """max |a - n| / max(floor, |n|) over all coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())


# -- random inputs --------------------------------------------------------------------


def unit_rows(rng: np.random.Generator, n: int, d: int) -> Array:
    """n random unit vectors in R^d."""
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
