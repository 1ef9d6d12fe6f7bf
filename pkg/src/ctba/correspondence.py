"""Candidate-scan sampling and closest-point association.

Every iteration, each scan samples up to ``n_matches`` other scans whose
start position lies within ``tau``; its points are then matched against a
voxel hash map built over each candidate deskewed with the current
trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Trajectory, quat_to_matrix
from .pointcloud import Scan, VoxelHashMap, pca_normals
from .storage import LRUBuffer


@dataclass(frozen=True)
class AssociationConfig:
    tau: float = 30.0
    n_matches: int = 10
    search_voxel: float = 0.30
    max_corr_dist: float = 0.5
    # reject pairs whose global normals differ by more than this (None: off)
    max_normal_angle_deg: Optional[float] = None
    seed: int = 0
    resample_every_iteration: bool = True
    # re-estimate normals on the deskewed points instead of using stored ones
    deskewed_normals: bool = False
    normal_k: int = 30
    max_curvature: Optional[float] = None
    max_plane_rms: Optional[float] = None

    def __post_init__(self):
        if not (self.tau > 0 and self.search_voxel > 0 and self.max_corr_dist > 0):
            raise ValueError("tau, search_voxel and max_corr_dist must be positive")
        if self.n_matches < 1:
            raise ValueError("n_matches must be >= 1")

    def scaled(self, scale: float) -> "AssociationConfig":
        if scale == 1.0:
            return self
        return replace(self, search_voxel=self.search_voxel * scale, max_corr_dist=self.max_corr_dist * scale)


@dataclass(frozen=True)
class CandidateSet:
    source: int
    candidates: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.candidates)


def sample_candidates(positions: np.ndarray, i: int, tau: float, n_matches: int, seed: int) -> CandidateSet:
    """Uniformly draw up to ``n_matches`` scans within ``tau`` of scan ``i``.

    The draw depends only on ``(seed, i)``, not on the visiting order.
    """
    positions = np.asarray(positions, dtype=np.float64)
    d = np.linalg.norm(positions - positions[i], axis=1)
    eligible = np.flatnonzero(d <= tau)
    eligible = eligible[eligible != i]
    if len(eligible) > n_matches:
        rng = np.random.default_rng([seed, i])
        eligible = np.sort(rng.choice(eligible, size=n_matches, replace=False))
    return CandidateSet(int(i), tuple(int(k) for k in eligible))


@dataclass(eq=False)
class DeskewedScan:
    """A scan transformed to the global frame at per-point interpolated poses."""

    scan: Scan
    alphas: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    local_normals: np.ndarray
    valid: np.ndarray
    search_voxel: float
    _map: Optional[VoxelHashMap] = field(default=None, repr=False)
    _map_idx: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def index(self) -> int:
        return self.scan.index

    def search_map(self) -> tuple[VoxelHashMap, np.ndarray]:
        """Map over points with valid normals, plus map-index -> point-index."""
        if self._map is None:
            self._map_idx = np.flatnonzero(self.valid)
            self._map = VoxelHashMap(self.points[self._map_idx], self.search_voxel)
        return self._map, self._map_idx


def deskew_scan(
    traj: Trajectory,
    scan: Scan,
    search_voxel: float,
    renormal: Optional[tuple[int, Optional[float], Optional[float]]] = None,
) -> DeskewedScan:
    """Map ``scan`` to the world frame with per-point interpolated poses.

    ``renormal = (k, max_curvature, max_plane_rms)`` re-estimates normals on the deskewed
    points, oriented towards the interpolated sensor positions.
    """
    alphas = scan.alphas
    q, t = traj.interpolate(scan.index, alphas)
    R = quat_to_matrix(q)
    pts = np.einsum("nij,nj->ni", R, scan.points) + t
    if renormal is not None:
        normals = pca_normals(pts, renormal[0], renormal[1], viewpoints=t, max_plane_rms=renormal[2])
        local = np.einsum("nji,nj->ni", R, normals)
    elif scan.normals is None:
        normals = np.full_like(pts, np.nan)
        local = normals
    else:
        local = scan.normals
        normals = np.einsum("nij,nj->ni", R, local)
    valid = ~np.isnan(normals).any(axis=1)
    return DeskewedScan(scan, alphas, pts, normals, local, valid, search_voxel)


@dataclass(eq=False)
class Correspondences:
    """Struct-of-arrays batch of point-to-plane correspondences.

    Local (sensor-frame) coordinates are copied in so that rows can be
    re-evaluated after the owning scans leave the buffer.
    """

    src_scan: np.ndarray
    src_idx: np.ndarray
    tgt_scan: np.ndarray
    tgt_idx: np.ndarray
    src_points: np.ndarray
    src_alpha: np.ndarray
    tgt_points: np.ndarray
    tgt_alpha: np.ndarray
    tgt_normals: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.src_idx)

    @classmethod
    def empty(cls) -> "Correspondences":
        i = np.zeros(0, dtype=np.int64)
        f = np.zeros(0)
        v = np.zeros((0, 3))
        return cls(i, i, i, i, v, f, v, f, v, f)

    @classmethod
    def concatenate(cls, parts: Sequence["Correspondences"]) -> "Correspondences":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    def take(self, idx) -> "Correspondences":
        return Correspondences(*(getattr(self, f.name)[idx] for f in fields(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Correspondences):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def associate(
    source: DeskewedScan,
    candidates: Sequence[DeskewedScan],
    max_corr_dist: float,
    max_normal_angle_deg: Optional[float] = None,
) -> Correspondences:
    """Match every source point to its closest point in each candidate scan.

    Yields at most one correspondence per (source point, candidate scan).
    Candidate points without a valid normal are never matched.
    """
    parts = []
    src_mask = np.ones(len(source.points), dtype=bool)
    if max_normal_angle_deg is not None:
        src_mask &= source.valid
        min_cos = np.cos(np.deg2rad(max_normal_angle_deg))
    src_ids = np.flatnonzero(src_mask)
    queries = source.points[src_ids]
    for tgt in candidates:
        if tgt.index == source.index:
            raise ValueError("a scan cannot be its own candidate")
        vmap, map_idx = tgt.search_map()
        if len(map_idx) == 0 or len(src_ids) == 0:
            continue
        hit, dist = vmap.nearest(queries)
        ok = (hit >= 0) & (dist <= max_corr_dist)
        s = src_ids[ok]
        t = map_idx[hit[ok]]
        d = dist[ok]
        if max_normal_angle_deg is not None:
            agree = np.einsum("ni,ni->n", source.normals[s], tgt.normals[t]) >= min_cos
            s, t, d = s[agree], t[agree], d[agree]
        if len(s) == 0:
            continue
        parts.append(
            Correspondences(
                np.full(len(s), source.index, dtype=np.int64),
                s.astype(np.int64),
                np.full(len(s), tgt.index, dtype=np.int64),
                t.astype(np.int64),
                source.scan.points[s],
                source.alphas[s],
                tgt.scan.points[t],
                tgt.alphas[t],
                tgt.local_normals[t],
                d,
            )
        )
    return Correspondences.concatenate(parts)


@dataclass(eq=False)
class IterationState:
    candidates: dict[int, CandidateSet]
    correspondences: Correspondences
    # sum over scans of (source points x candidate count); bounds the row count
    row_bound: int = 0
    # high-water mark of the per-iteration deskewed-scan buffer
    buffer_peak: int = 0


def rebuild_iteration_state(
    traj: Trajectory,
    order: Sequence[int],
    source,
    config: AssociationConfig,
    iteration: int = 0,
    buffer_capacity: Optional[int] = None,
) -> IterationState:
    """Deskew, rebuild maps, sample candidates and associate for all scans.

    ``source`` provides ``get(index) -> Scan`` (e.g. a ``ScanStore``). Scans
    are visited in ``order``; deskewed copies and their maps live in an LRU
    buffer of ``buffer_capacity`` entries for this iteration only. The
    result does not depend on ``order`` or on the capacity.
    """
    positions = traj.scan_positions()
    seed = config.seed + (iteration if config.resample_every_iteration else 0)
    derived: LRUBuffer[int, DeskewedScan] = LRUBuffer(buffer_capacity)

    renormal = (config.normal_k, config.max_curvature, config.max_plane_rms) if config.deskewed_normals else None

    def deskewed(k: int) -> DeskewedScan:
        scan = source.get(k)
        return derived.get(k, lambda _: deskew_scan(traj, scan, config.search_voxel, renormal))

    per_scan: dict[int, list[Correspondences]] = {}
    candidates: dict[int, CandidateSet] = {}
    bound = 0
    for i in order:
        cand = sample_candidates(positions, i, config.tau, config.n_matches, seed)
        candidates[i] = cand
        with source.pinned(i):
            src = deskewed(i)
            bound += len(src.points) * len(cand)
            # one candidate at a time so the buffer alone bounds residency
            per_scan[i] = [
                associate(src, [deskewed(k)], config.max_corr_dist, config.max_normal_angle_deg)
                for k in cand.candidates
            ]
    corr = Correspondences.concatenate([c for i in sorted(per_scan) for c in per_scan[i]])
    return IterationState(candidates, corr, bound, derived.peak)
