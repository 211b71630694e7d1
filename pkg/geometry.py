"""
Index building for the attention blocks
Farthest point sampling, temporal k-nearest neighbours, nearest-event
grouping and the sparse active-site grid. All ties break toward the lowest
index so every result is reproducible and matches exhaustive search.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from numba import njit

from errors import EmptyStreamError, GeometryError

logger = logging.getLogger(__name__)


@njit(cache=True)
def _fps_kernel(points, m_out, start):
    n = points.shape[0]
    selected = np.empty(m_out, np.int64)
    min_dist = np.full(n, np.inf)
    current = start
    for k in range(m_out):
        selected[k] = current
        min_dist[current] = -1.0
        best = -1
        best_dist = -1.0
        for j in range(n):
            if min_dist[j] < 0.0:
                continue
            d = 0.0
            for c in range(points.shape[1]):
                diff = points[j, c] - points[current, c]
                d += diff * diff
            if d < min_dist[j]:
                min_dist[j] = d
            if min_dist[j] > best_dist:
                best_dist = min_dist[j]
                best = j
        current = best
    return selected


def farthest_point_sampling(points: np.ndarray, m_out: int, seed: int = 0, start: int = None) -> np.ndarray:
    """Greedy FPS over the rows of points; the first pick is seed mod N unless start is given"""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m_out <= n:
        raise GeometryError(f"cannot select {m_out} of {n} points")
    first = seed % n if start is None else int(start)
    return _fps_kernel(points, m_out, first)


@njit(cache=True)
def _insert(best_d, best_i, count, limit, d, j):
    # keeps (distance, index) ascending; equal distances keep the earlier index first
    if count < limit:
        pos = count
        count += 1
    elif d < best_d[limit - 1]:
        pos = limit - 1
    else:
        return count
    while pos > 0 and best_d[pos - 1] > d:
        best_d[pos] = best_d[pos - 1]
        best_i[pos] = best_i[pos - 1]
        pos -= 1
    best_d[pos] = d
    best_i[pos] = j
    return count


@njit(cache=True)
def _knn_temporal_kernel(times, m):
    n = times.shape[0]
    out = np.empty((n, m), np.int64)
    best_d = np.empty(m)
    best_i = np.empty(m, np.int64)
    for i in range(n):
        count = 0
        for j in range(n):
            if j != i:
                count = _insert(best_d, best_i, count, m, abs(times[j] - times[i]), j)
        if count == 0:
            for k in range(m):
                out[i, k] = i
        else:
            for k in range(m):
                out[i, k] = best_i[k] if k < count else best_i[0]
    return out


def knn_temporal(times: np.ndarray, M: int) -> np.ndarray:
    """(N, M) indices of the M events closest in time to each event, itself excluded"""
    if M < 1:
        raise GeometryError("M must be at least 1")
    times = np.ascontiguousarray(times, dtype=np.float64)
    if times.size == 0:
        raise EmptyStreamError("no events to index")
    return _knn_temporal_kernel(times, M)


@njit(cache=True)
def _group_kernel(points, centers, k):
    n = points.shape[0]
    out = np.empty((centers.shape[0], k), np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    for g in range(centers.shape[0]):
        c = centers[g]
        best_d[0] = -1.0
        best_i[0] = c
        count = 1
        for j in range(n):
            if j == c:
                continue
            d = 0.0
            for a in range(points.shape[1]):
                diff = points[j, a] - points[c, a]
                d += diff * diff
            count = _insert(best_d, best_i, count, k, d, j)
        for q in range(k):
            out[g, q] = best_i[q] if q < count else best_i[0]
    return out


def group_nearest(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """(m, k) groups: the center first, then its nearest events by (distance, index)

    Groups larger than N are padded by repeating the center.
    """
    if k < 1:
        raise GeometryError("group size must be at least 1")
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    if centers.size and (centers.min() < 0 or centers.max() >= points.shape[0]):
        raise GeometryError("center index out of range")
    return _group_kernel(points, centers, k)


@dataclass
class SampledSet:
    center_indices: np.ndarray
    groups: np.ndarray


def sample_and_group(points: np.ndarray, m: int, k: int, seed: int = 0) -> SampledSet:
    centers = farthest_point_sampling(points, m, seed)
    return SampledSet(centers, group_nearest(points, centers, k))


# sparse grid -----------------------------------------------------------------

@dataclass
class SparseGrid:
    """Active pixels of an H x W frame; sites are in row-major order"""

    dims: Tuple[int, int]
    sites: np.ndarray
    site_of_event: np.ndarray
    order: np.ndarray
    offsets: np.ndarray
    site_map: np.ndarray

    @property
    def num_sites(self) -> int:
        return int(self.sites.shape[0])

    def members(self, site: int) -> np.ndarray:
        return self.order[self.offsets[site]:self.offsets[site + 1]]

    def as_dict(self) -> Dict[Tuple[int, int], List[int]]:
        return {(int(y), int(x)): self.members(s).tolist() for s, (y, x) in enumerate(self.sites)}


def build_sparse_grid(px: np.ndarray, py: np.ndarray, H: int, W: int) -> SparseGrid:
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    if px.size == 0:
        raise EmptyStreamError("cannot build a grid from no events")
    if px.min() < 0 or py.min() < 0 or px.max() >= W or py.max() >= H:
        raise GeometryError(f"event coordinate outside the {H}x{W} frame")
    keys, site_of_event = np.unique(py * W + px, return_inverse=True)
    site_of_event = site_of_event.reshape(-1)
    order = np.argsort(site_of_event, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(site_of_event, minlength=keys.size))])
    sites = np.column_stack([keys // W, keys % W])
    site_map = np.full((H, W), -1, dtype=np.int64)
    site_map[sites[:, 0], sites[:, 1]] = np.arange(keys.size)
    return SparseGrid((H, W), sites, site_of_event, order, offsets, site_map)


@njit(cache=True)
def _neighbor_table_kernel(sites, site_map, w):
    r = w // 2
    height, width = site_map.shape
    out = np.full((sites.shape[0], w * w), -1, np.int64)
    for s in range(sites.shape[0]):
        k = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                yy = sites[s, 0] + dy
                xx = sites[s, 1] + dx
                if 0 <= yy < height and 0 <= xx < width:
                    out[s, k] = site_map[yy, xx]
                k += 1
    return out


def neighbor_table(grid: SparseGrid, w: int) -> np.ndarray:
    """(S, w*w) active-site index per window offset (row-major dy, dx), -1 where inactive

    Column o doubles as the submanifold rulebook for kernel offset o.
    """
    if w < 1 or w % 2 == 0:
        raise GeometryError(f"window size must be odd, got {w}")
    return _neighbor_table_kernel(np.ascontiguousarray(grid.sites), grid.site_map, w)


def window_neighbors(grid: SparseGrid, site: int, w: int = 3) -> List[int]:
    """Active sites within the w x w window around site, itself included"""
    if w < 1 or w % 2 == 0:
        raise GeometryError(f"window size must be odd, got {w}")
    r = w // 2
    y, x = grid.sites[site]
    height, width = grid.dims
    patch = grid.site_map[max(y - r, 0):min(y + r + 1, height), max(x - r, 0):min(x + r + 1, width)]
    return [int(s) for s in patch.reshape(-1) if s >= 0]
