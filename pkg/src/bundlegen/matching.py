"""Minimal-cost assignment: O(n^3) Hungarian solver plus a brute-force oracle.

Cost matrices are square, with ``costs[j][k]`` = cross-entropy of slot j's
distribution against target k. Consumers rely only on ``total_cost`` and on
some cost-minimal permutation; tie-breaking between equally cheap
permutations is unspecified.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericDomainError, ShapeError
from .types import DataError

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class Assignment:
    """A bijection slot j -> target index perm[j] and its summed cost."""

    perm: tuple[int, ...]
    total_cost: float


def _validated(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"cost matrix must be square, got shape {c.shape}")
    if c.shape[0] == 0:
        raise ShapeError("cost matrix must be non-empty")
    if not np.isfinite(c).all():
        raise NumericDomainError("cost matrix contains non-finite entries")
    return c


def hungarian_min_assignment(cost) -> Assignment:
    """Globally minimal-cost permutation via shortest augmenting paths.

    Runs in O(n^3) using row/column potentials; exact for any finite square
    matrix (costs may be negative, although cross-entropies never are).
    """
    c = _validated(cost)
    n = c.shape[0]
    # 1-indexed potentials; p[j] = row currently assigned to column j (0 = free).
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    perm = tuple(perm)
    total = float(c[np.arange(n), perm].sum())
    return Assignment(perm=perm, total_cost=total)


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all n! permutations; the reference oracle."""
    c = _validated(cost)
    n = c.shape[0]
    if n > BRUTE_FORCE_LIMIT:
        raise DataError(f"brute force assignment limited to n <= {BRUTE_FORCE_LIMIT}, got {n}")
    rows = np.arange(n)
    best_perm = None
    best_cost = np.inf
    for perm in itertools.permutations(range(n)):
        total = float(c[rows, perm].sum())
        if total < best_cost:
            best_cost = total
            best_perm = perm
    return Assignment(perm=best_perm, total_cost=best_cost)
