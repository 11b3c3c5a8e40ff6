"""Exact 3-D KD-tree for nearest-neighbour and proximity queries.

The tree is stored as flat node arrays (bounding boxes, child indices and
contiguous index ranges into a permutation of the input points) so that the
query kernels can be compiled with numba. Queries are exact: a subtree is
skipped only when its bounding box is strictly farther than the current
k-th candidate, so equal-distance points are always seen and ties resolve to
the lowest insertion index.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import InvalidInputError

LEAF_SIZE = 8
_NO_INDEX = np.iinfo(np.int64).max


@numba.njit(cache=True)
def _build_nodes(points, leaf_size):
    n = points.shape[0]
    max_nodes = max(1, 2 * ((n + leaf_size - 1) // leaf_size) * 2 + 1)
    perm = np.arange(n)
    start = np.zeros(max_nodes, dtype=np.int64)
    end = np.zeros(max_nodes, dtype=np.int64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    lo = np.zeros((max_nodes, 3))
    hi = np.zeros((max_nodes, 3))

    n_nodes = 1
    start[0] = 0
    end[0] = n
    stack = np.zeros(max_nodes, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        if e == s:
            continue
        for d in range(3):
            mn = points[perm[s], d]
            mx = mn
            for j in range(s + 1, e):
                c = points[perm[j], d]
                if c < mn:
                    mn = c
                if c > mx:
                    mx = c
            lo[node, d] = mn
            hi[node, d] = mx
        if e - s <= leaf_size:
            continue
        axis = 0
        extent = hi[node, 0] - lo[node, 0]
        for d in range(1, 3):
            if hi[node, d] - lo[node, d] > extent:
                extent = hi[node, d] - lo[node, d]
                axis = d
        sub = perm[s:e].copy()
        order = np.argsort(points[sub, axis], kind="mergesort")
        perm[s:e] = sub[order]
        mid = s + (e - s) // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        start[lc] = s
        end[lc] = mid
        start[rc] = mid
        end[rc] = e
        left[node] = lc
        right[node] = rc
        stack[top] = lc
        top += 1
        stack[top] = rc
        top += 1
    return (perm, start[:n_nodes].copy(), end[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            lo[:n_nodes].copy(), hi[:n_nodes].copy())


@numba.njit(cache=True)
def _box_d2(q, lo, hi):
    s = 0.0
    for d in range(3):
        if q[d] < lo[d]:
            t = lo[d] - q[d]
            s += t * t
        elif q[d] > hi[d]:
            t = q[d] - hi[d]
            s += t * t
    return s


@numba.njit(cache=True)
def _knn_one(points, perm, start, end, left, right, lo, hi, q, k,
             best_d2, best_idx):
    for j in range(k):
        best_d2[j] = np.inf
        best_idx[j] = _NO_INDEX
    if points.shape[0] == 0:
        return
    stack = np.zeros(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_d2(q, lo[node], hi[node]) > best_d2[k - 1]:
            continue
        lc = left[node]
        if lc < 0:
            for j in range(start[node], end[node]):
                i = perm[j]
                dx = points[i, 0] - q[0]
                dy = points[i, 1] - q[1]
                dz = points[i, 2] - q[2]
                d2 = dx * dx + dy * dy + dz * dz
                worst_d2 = best_d2[k - 1]
                if d2 < worst_d2 or (d2 == worst_d2 and i < best_idx[k - 1]):
                    pos = k - 1
                    while pos > 0 and (d2 < best_d2[pos - 1] or (
                            d2 == best_d2[pos - 1] and i < best_idx[pos - 1])):
                        best_d2[pos] = best_d2[pos - 1]
                        best_idx[pos] = best_idx[pos - 1]
                        pos -= 1
                    best_d2[pos] = d2
                    best_idx[pos] = i
            continue
        rc = right[node]
        # push the farther child first so the nearer one is expanded next
        if _box_d2(q, lo[lc], hi[lc]) <= _box_d2(q, lo[rc], hi[rc]):
            stack[top] = rc
            stack[top + 1] = lc
        else:
            stack[top] = lc
            stack[top + 1] = rc
        top += 2


@numba.njit(cache=True)
def _knn_batch(points, perm, start, end, left, right, lo, hi, queries, k):
    m = queries.shape[0]
    d2 = np.empty((m, k))
    idx = np.empty((m, k), dtype=np.int64)
    bd = np.empty(k)
    bi = np.empty(k, dtype=np.int64)
    for r in range(m):
        _knn_one(points, perm, start, end, left, right, lo, hi, queries[r], k,
                 bd, bi)
        for j in range(k):
            d2[r, j] = bd[j]
            idx[r, j] = bi[j]
    return d2, idx


@numba.njit(cache=True)
def _within_batch(points, perm, start, end, left, right, lo, hi, queries,
                  radius):
    m = queries.shape[0]
    out = np.zeros(m, dtype=np.bool_)
    if points.shape[0] == 0:
        return out
    r2 = radius * radius
    stack = np.zeros(128, dtype=np.int64)
    for r in range(m):
        q = queries[r]
        top = 0
        stack[top] = 0
        top += 1
        found = False
        while top > 0 and not found:
            top -= 1
            node = stack[top]
            # loose box test; the exact comparison happens on the points
            if _box_d2(q, lo[node], hi[node]) > r2 * (1.0 + 1e-12) + 1e-300:
                continue
            lc = left[node]
            if lc < 0:
                for j in range(start[node], end[node]):
                    i = perm[j]
                    dx = points[i, 0] - q[0]
                    dy = points[i, 1] - q[1]
                    dz = points[i, 2] - q[2]
                    if np.sqrt(dx * dx + dy * dy + dz * dz) <= radius:
                        found = True
                        break
                continue
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
        out[r] = found
    return out


class KdTree:
    """Immutable 3-D KD-tree over a fixed point set.

    Points keep their insertion order in ``points``; every index returned by
    a query refers to that order.
    """

    def __init__(self, points):
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("KdTree points must have finite coordinates")
        pts.setflags(write=False)
        self.points = pts
        (self._perm, self._start, self._end, self._left, self._right,
         self._lo, self._hi) = _build_nodes(pts, LEAF_SIZE)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    def _arrays(self):
        return (self.points, self._perm, self._start, self._end, self._left,
                self._right, self._lo, self._hi)

    def query(self, queries, k: int = 1):
        """Batch k-nearest search.

        Returns ``(dist, idx)`` arrays of shape ``(m, min(k, size))`` sorted by
        ascending distance per row.
        """
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        q = np.ascontiguousarray(np.asarray(queries, dtype=float).reshape(-1, 3))
        kk = min(k, self.size)
        if kk == 0:
            return np.empty((q.shape[0], 0)), np.empty((q.shape[0], 0), dtype=np.int64)
        d2, idx = _knn_batch(*self._arrays(), q, kk)
        return np.sqrt(d2), idx

    def knn(self, query, k: int = 1) -> list[tuple[np.ndarray, float]]:
        dist, idx = self.query(query, k)
        return [(self.points[i], float(d)) for d, i in zip(dist[0], idx[0])]

    def within(self, queries, radius: float) -> np.ndarray:
        """Per query, whether any stored point lies at distance <= radius."""
        if radius < 0:
            raise InvalidInputError(f"radius must be >= 0, got {radius}")
        q = np.ascontiguousarray(np.asarray(queries, dtype=float).reshape(-1, 3))
        return _within_batch(*self._arrays(), q, float(radius))

    def has_within(self, query, radius: float) -> bool:
        return bool(self.within(query, radius)[0])


def build(points) -> KdTree:
    return KdTree(points)


def knn(tree: KdTree, query, k: int) -> list[tuple[np.ndarray, float]]:
    return tree.knn(query, k)


def has_within(tree: KdTree, query, radius: float) -> bool:
    return tree.has_within(query, radius)
