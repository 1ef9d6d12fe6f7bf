"""Scans, grid subsampling, normal estimation and the voxel hash map."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels


@dataclass(frozen=True, eq=False)
class Scan:
    """One LiDAR sweep.

    ``points`` are sensor-frame coordinates ``(N, 3)`` and ``times`` absolute
    timestamps ``(N,)`` inside ``[t_b, t_e]``. ``normals`` is optional; rows of
    NaN mark points whose normal could not be estimated.
    """

    index: int
    points: np.ndarray
    times: np.ndarray
    t_b: float
    t_e: float
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        times = np.array(self.times, dtype=np.float64).reshape(-1)
        if len(pts) != len(times):
            raise ValueError(f"scan {self.index}: {len(pts)} points but {len(times)} timestamps")
        if not self.t_e - self.t_b >= 1e-12:
            raise ValueError(f"scan {self.index}: malformed scan timing t_b={self.t_b!r}, t_e={self.t_e!r}")
        if len(times) and (times.min() < self.t_b or times.max() > self.t_e):
            raise ValueError(f"scan {self.index}: point timestamp outside [{self.t_b!r}, {self.t_e!r}]")
        pts.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "t_b", float(self.t_b))
        object.__setattr__(self, "t_e", float(self.t_e))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"scan {self.index}: {len(nrm)} normals for {len(pts)} points")
            ok = ~np.isnan(nrm).any(axis=1)
            if not np.allclose(np.linalg.norm(nrm[ok], axis=1), 1.0, atol=1e-6):
                raise ValueError(f"scan {self.index}: normals must be unit length or NaN")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def alphas(self) -> np.ndarray:
        return (self.times - self.t_b) / (self.t_e - self.t_b)

    @property
    def valid_normals(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.normals).any(axis=1)

    def subset(self, idx: np.ndarray) -> "Scan":
        return Scan(
            self.index,
            self.points[idx],
            self.times[idx],
            self.t_b,
            self.t_e,
            None if self.normals is None else self.normals[idx],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scan):
            return NotImplemented
        if (self.normals is None) != (other.normals is None):
            return False
        same_normals = self.normals is None or np.array_equal(self.normals, other.normals, equal_nan=True)
        return (
            self.index == other.index
            and self.t_b == other.t_b
            and self.t_e == other.t_e
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.times, other.times)
            and same_normals
        )


# --------------------------------------------------------------------------
# voxel hash map
# --------------------------------------------------------------------------


def voxel_key(p, voxel_size: float) -> tuple[int, int, int]:
    """Integer voxel coordinates ``floor(p / voxel_size)``."""
    k = voxel_keys(np.asarray(p, dtype=np.float64).reshape(1, 3), voxel_size)[0]
    return int(k[0]), int(k[1]), int(k[2])


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size!r}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValueError("non-finite point coordinates")
    return np.floor(points / voxel_size).astype(np.int64)


class VoxelHashMap:
    """Sparse voxel grid storing one point index per occupied voxel.

    Each voxel keeps the index of the point closest to the voxel center
    (ties go to the lower index). The map only stores indices; coordinates
    stay in the backing array it was built from.
    """

    def __init__(self, points: np.ndarray, voxel_size: float):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        keys = voxel_keys(points, voxel_size)
        centers = (keys + 0.5) * voxel_size
        d2 = np.sum((points - centers) ** 2, axis=1)
        capacity = 16
        while capacity < 2 * len(points):
            capacity *= 2
        self.voxel_size = float(voxel_size)
        self.points = points
        self._tkeys, self._tvals, self._n_cells = _kernels.build_table(keys, d2, capacity)

    def __len__(self) -> int:
        return int(self._n_cells)

    def indices(self) -> np.ndarray:
        """Stored point indices in ascending order."""
        v = self._tvals[self._tvals != _kernels.EMPTY]
        return np.sort(v)

    def cells(self) -> dict[tuple[int, int, int], int]:
        occ = self._tvals != _kernels.EMPTY
        return {tuple(int(x) for x in k): int(v) for k, v in zip(self._tkeys[occ], self._tvals[occ])}

    def get(self, key) -> Optional[int]:
        v = _kernels.lookup_many(self._tkeys, self._tvals, np.asarray(key, dtype=np.int64).reshape(1, 3))[0]
        return None if v == _kernels.EMPTY else int(v)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised 27-cell search: ``(indices, distances)``, index -1 if none."""
        queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        idx, d2 = _kernels.nearest_27(self._tkeys, self._tvals, self.points, self.voxel_size, queries)
        return idx, np.sqrt(d2)


def build_map(points: np.ndarray, voxel_size: float) -> VoxelHashMap:
    return VoxelHashMap(points, voxel_size)


def nearest_in_27(vmap: VoxelHashMap, query, points: Optional[np.ndarray] = None):
    """Closest stored point to ``query`` among the 27 surrounding voxels.

    Returns ``(index, distance)`` or ``None`` when every cell is empty.
    ``points`` must be the array the map was built over, if given.
    """
    if points is not None and points is not vmap.points and not np.array_equal(points, vmap.points):
        raise ValueError("map was built over different backing points")
    idx, dist = vmap.nearest(np.asarray(query, dtype=np.float64).reshape(1, 3))
    if idx[0] < 0:
        return None
    return int(idx[0]), float(dist[0])


def grid_subsample(scan: Scan, cell: float) -> Scan:
    """Keep the closest-to-center point of every occupied voxel."""
    if len(scan) == 0:
        return scan
    keep = VoxelHashMap(scan.points, cell).indices()
    return scan.subset(keep)


def pca_normals(
    points: np.ndarray,
    k: int = 30,
    max_curvature: Optional[float] = None,
    viewpoints: Optional[np.ndarray] = None,
    workers: int = 1,
    max_plane_rms: Optional[float] = None,
) -> np.ndarray:
    """PCA normals from the ``k`` nearest neighbours (including the point).

    Each normal is oriented towards its viewpoint (default: the origin).
    Rank-deficient neighbourhoods give NaN rows, and so do neighbourhoods
    whose surface variation ``l0 / (l0 + l1 + l2)`` exceeds ``max_curvature``
    or whose RMS distance to the fitted plane, ``sqrt(l0)``, exceeds
    ``max_plane_rms`` (each only when set).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    normals = np.full((n, 3), np.nan)
    if n < 3:
        return normals
    kk = min(k, n)
    _, nbr = cKDTree(pts).query(pts, k=kk, workers=workers)
    local = pts[nbr.reshape(n, kk)]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.empty((n, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            cov[:, i, j] = cov[:, j, i] = np.mean(local[:, :, i] * local[:, :, j], axis=1)
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    valid = evals[:, 1] > 1e-10 * scale
    valid &= evals[:, 2] > 1e-20
    if max_curvature is not None:
        curvature = evals[:, 0] / np.maximum(evals.sum(axis=1), np.finfo(float).tiny)
        valid &= curvature <= max_curvature
    if max_plane_rms is not None:
        valid &= np.sqrt(np.maximum(evals[:, 0], 0.0)) <= max_plane_rms
    view = pts if viewpoints is None else pts - viewpoints
    flip = np.einsum("ni,ni->n", normal, view) > 0
    normal[flip] *= -1.0
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normals[valid] = normal[valid]
    return normals


def estimate_normals(
    scan: Scan,
    k: int = 30,
    max_curvature: Optional[float] = None,
    workers: int = 1,
) -> Scan:
    """Copy of ``scan`` with sensor-facing PCA normals (see :func:`pca_normals`)."""
    normals = pca_normals(scan.points, k, max_curvature, workers=workers)
    return Scan(scan.index, scan.points, scan.times, scan.t_b, scan.t_e, normals)


def preprocess_scan(
    scan: Scan,
    subsample_cell: float = 0.15,
    normal_k: int = 30,
    max_curvature: Optional[float] = None,
    workers: int = 1,
) -> Scan:
    """Normals on the raw scan, then grid subsampling that carries them along."""
    with_normals = estimate_normals(scan, normal_k, max_curvature=max_curvature, workers=workers)
    return grid_subsample(with_normals, subsample_cell)
