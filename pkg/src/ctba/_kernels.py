"""Numba kernels for the voxel hash map (open addressing, linear probing)."""

import math

import numpy as np
from numba import njit

EMPTY = -1

# spatial-hash primes (Teschner et al.)
_P1 = 73856093
_P2 = 19349663
_P3 = 83492791


@njit(cache=True)
def _slot(i, j, k, mask):
    h = (i * _P1) ^ (j * _P2) ^ (k * _P3)
    return h & mask


@njit(cache=True)
def build_table(keys, d2, capacity):
    """Insert every point; per voxel keep the index with the smallest ``d2``.

    Points are visited in index order and replaced only on a strictly smaller
    distance, so ties keep the lower index.
    """
    mask = capacity - 1
    tkeys = np.zeros((capacity, 3), dtype=np.int64)
    tvals = np.full(capacity, EMPTY, dtype=np.int64)
    n_cells = 0
    for n in range(keys.shape[0]):
        i = keys[n, 0]
        j = keys[n, 1]
        k = keys[n, 2]
        s = _slot(i, j, k, mask)
        while True:
            v = tvals[s]
            if v == EMPTY:
                tkeys[s, 0] = i
                tkeys[s, 1] = j
                tkeys[s, 2] = k
                tvals[s] = n
                n_cells += 1
                break
            if tkeys[s, 0] == i and tkeys[s, 1] == j and tkeys[s, 2] == k:
                if d2[n] < d2[v]:
                    tvals[s] = n
                break
            s = (s + 1) & mask
    return tkeys, tvals, n_cells


@njit(cache=True)
def _lookup(tkeys, tvals, i, j, k):
    mask = tvals.shape[0] - 1
    s = _slot(i, j, k, mask)
    while True:
        v = tvals[s]
        if v == EMPTY:
            return EMPTY
        if tkeys[s, 0] == i and tkeys[s, 1] == j and tkeys[s, 2] == k:
            return v
        s = (s + 1) & mask


@njit(cache=True)
def lookup_many(tkeys, tvals, keys):
    out = np.empty(keys.shape[0], dtype=np.int64)
    for n in range(keys.shape[0]):
        out[n] = _lookup(tkeys, tvals, keys[n, 0], keys[n, 1], keys[n, 2])
    return out


@njit(cache=True)
def nearest_27(tkeys, tvals, points, voxel_size, queries):
    """Closest stored representative in the 3x3x3 voxel block around each query.

    Returns ``(index, squared distance)``; index is ``EMPTY`` when all 27 cells
    are empty. Equal distances resolve to the lower point index.
    """
    nq = queries.shape[0]
    best_idx = np.full(nq, EMPTY, dtype=np.int64)
    best_d2 = np.full(nq, np.inf)
    for n in range(nq):
        qx = queries[n, 0]
        qy = queries[n, 1]
        qz = queries[n, 2]
        ci = np.int64(math.floor(qx / voxel_size))
        cj = np.int64(math.floor(qy / voxel_size))
        ck = np.int64(math.floor(qz / voxel_size))
        bi = EMPTY
        bd = np.inf
        for di in range(-1, 2):
            for dj in range(-1, 2):
                for dk in range(-1, 2):
                    v = _lookup(tkeys, tvals, ci + di, cj + dj, ck + dk)
                    if v == EMPTY:
                        continue
                    dx = points[v, 0] - qx
                    dy = points[v, 1] - qy
                    dz = points[v, 2] - qz
                    d = dx * dx + dy * dy + dz * dz
                    if d < bd or (d == bd and v < bi):
                        bd = d
                        bi = v
        best_idx[n] = bi
        best_d2[n] = bd
    return best_idx, best_d2
