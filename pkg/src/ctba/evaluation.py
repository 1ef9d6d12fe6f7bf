"""Trajectory accuracy metrics and map export."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (
    Trajectory,
    quat_conj,
    quat_from_matrix,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    rotation_angle,
)
from .pointcloud import Scan, VoxelHashMap

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """Trajectories cannot be paired for evaluation."""


@dataclass
class MetricReport:
    ate_trans: float = 0.0
    ate_rot: float = 0.0
    rpe_trans: float = 0.0
    rpe_rot: float = 0.0
    inter_rpe_trans: float = 0.0
    inter_rpe_rot: float = 0.0
    pairs: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        d = asdict(self)
        w.writerow(list(d))
        w.writerow([repr(v) if isinstance(v, float) else v for v in d.values()])
        return buf.getvalue()


def pair_by_timestamp(est: Trajectory, gt: Trajectory, max_dt: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(est_idx, gt_idx)`` matched by nearest timestamp.

    Only knots of the same session are paired. ``max_dt`` defaults to half
    the median knot spacing of ``gt``; unmatched poses are dropped.
    """
    if max_dt is None:
        spacing = [np.diff(gt.timestamps[gt.session_ids == s]) for s in np.unique(gt.session_ids)]
        spacing = np.concatenate(spacing) if spacing else np.zeros(0)
        max_dt = 0.5 * float(np.median(spacing)) if len(spacing) else np.inf
    ei, gi = [], []
    for s in np.unique(est.session_ids):
        e_idx = np.flatnonzero(est.session_ids == s)
        g_idx = np.flatnonzero(gt.session_ids == s)
        if len(g_idx) == 0:
            continue
        gts = gt.timestamps[g_idx]
        for k in e_idx:
            j = int(np.argmin(np.abs(gts - est.timestamps[k])))
            if abs(gts[j] - est.timestamps[k]) <= max_dt:
                ei.append(k)
                gi.append(g_idx[j])
    dropped = est.n_knots - len(ei)
    if dropped:
        log.warning("%d estimated poses have no ground-truth partner", dropped)
    return np.array(ei, dtype=np.int64), np.array(gi, dtype=np.int64)


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``R src + t ~ dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def _rmse(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def ate(est: Trajectory, gt: Trajectory, align: bool = True, max_dt: Optional[float] = None) -> tuple[float, float]:
    """Absolute trajectory error: translation RMSE (m), rotation RMSE (deg)."""
    ei, gi = pair_by_timestamp(est, gt, max_dt)
    if len(ei) < 3:
        raise MetricError(f"ATE needs at least 3 paired poses, got {len(ei)}")
    p = est.translations[ei]
    q = est.quats[ei]
    if align:
        src, dst = p, gt.translations[gi]
        sv = np.linalg.svd(dst - dst.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            # collinear positions leave the roll about the path free; add frame axes
            src = np.concatenate([src] + [src + quat_to_matrix(q)[:, :, k] for k in range(3)])
            dst = np.concatenate([dst] + [dst + quat_to_matrix(gt.quats[gi])[:, :, k] for k in range(3)])
        R, t = align_rigid(src, dst)
        p = p @ R.T + t
        q = quat_mul(quat_from_matrix(R), q)
    d = np.linalg.norm(p - gt.translations[gi], axis=1)
    ang = rotation_angle(quat_normalize(q), gt.quats[gi])
    return _rmse(d), float(np.rad2deg(_rmse(ang)))


def _relative(qa, ta, qb, tb):
    """``T_a^-1 T_b`` for stacked poses."""
    qa_inv = quat_conj(qa)
    return quat_mul(qa_inv, qb), np.einsum("nij,nj->ni", quat_to_matrix(qa_inv), tb - ta)


def _discrepancy(q_gt, t_gt, q_est, t_est) -> tuple[np.ndarray, np.ndarray]:
    """Translation norm and angle of ``Delta_gt^-1 Delta_est``."""
    qe, te = _relative(q_gt, t_gt, q_est, t_est)
    return np.linalg.norm(te, axis=1), rotation_angle(quat_normalize(qe), np.array([1.0, 0.0, 0.0, 0.0]))


def rpe(est: Trajectory, gt: Trajectory, max_dt: Optional[float] = None) -> tuple[float, float]:
    """Relative pose error between consecutive paired poses (m, deg)."""
    ei, gi = pair_by_timestamp(est, gt, max_dt)
    if len(ei) < 2:
        raise MetricError(f"RPE needs at least 2 paired poses, got {len(ei)}")
    consecutive = est.session_ids[ei[1:]] == est.session_ids[ei[:-1]]
    a, b = np.flatnonzero(consecutive), np.flatnonzero(consecutive) + 1
    if len(a) == 0:
        raise MetricError("RPE needs consecutive poses within a session")
    q_gt, t_gt = _relative(gt.quats[gi[a]], gt.translations[gi[a]], gt.quats[gi[b]], gt.translations[gi[b]])
    q_es, t_es = _relative(est.quats[ei[a]], est.translations[ei[a]], est.quats[ei[b]], est.translations[ei[b]])
    dt, dr = _discrepancy(q_gt, t_gt, q_es, t_es)
    return _rmse(dt), float(np.rad2deg(_rmse(dr)))


def inter_session_pairs(gt1: Trajectory, gt2: Trajectory) -> np.ndarray:
    """For each pose of session 2, the index of the closest session-1 pose (by gt position)."""
    if gt1.n_knots == 0 or gt2.n_knots == 0:
        raise MetricError("inter-RPE needs two non-empty sessions")
    d = np.linalg.norm(gt2.translations[:, None, :] - gt1.translations[None, :, :], axis=2)
    return np.argmin(d, axis=1)


def inter_rpe(
    est1: Trajectory,
    est2: Trajectory,
    gt1: Trajectory,
    gt2: Trajectory,
    max_dt: Optional[float] = None,
) -> tuple[float, float]:
    """RPE across two sessions over closest-pose pairs chosen on ground truth.

    The same pose pairs are used for the estimated and reference relative
    transforms. Returns translation (m) and rotation (deg) RMSE.
    """
    e1, g1 = pair_by_timestamp(est1, gt1, max_dt)
    e2, g2 = pair_by_timestamp(est2, gt2, max_dt)
    if len(e1) == 0 or len(e2) == 0:
        raise MetricError("no paired poses in one of the sessions")
    # indices into the paired session-1 arrays
    a1 = inter_session_pairs(_take(gt1, g1), _take(gt2, g2))
    q_gt, t_gt = _relative(gt1.quats[g1[a1]], gt1.translations[g1[a1]], gt2.quats[g2], gt2.translations[g2])
    q_es, t_es = _relative(est1.quats[e1[a1]], est1.translations[e1[a1]], est2.quats[e2], est2.translations[e2])
    dt, dr = _discrepancy(q_gt, t_gt, q_es, t_es)
    return _rmse(dt), float(np.rad2deg(_rmse(dr)))


def _take(traj: Trajectory, idx: np.ndarray) -> Trajectory:
    return Trajectory(traj.quats[idx], traj.translations[idx], traj.timestamps[idx], traj.session_ids[idx])


def evaluate(est: Trajectory, gt: Trajectory, inter: bool = False, align: bool = True) -> MetricReport:
    """Full report; ``inter`` adds inter-RPE between the first two sessions."""
    ate_t, ate_r = ate(est, gt, align=align)
    rpe_t, rpe_r = rpe(est, gt)
    ei, _ = pair_by_timestamp(est, gt)
    report = MetricReport(ate_t, ate_r, rpe_t, rpe_r, pairs=len(ei))
    if inter:
        sessions = np.unique(gt.session_ids)
        if len(sessions) < 2:
            raise MetricError("inter-RPE needs two sessions")
        s1, s2 = sessions[:2]
        report.inter_rpe_trans, report.inter_rpe_rot = inter_rpe(
            est.session(s1), est.session(s2), gt.session(s1), gt.session(s2)
        )
    return report


def export_map(traj: Trajectory, source, path, subsample_cell: Optional[float] = None) -> int:
    """Write all scans deskewed into one text cloud ``x y z nx ny nz``.

    Returns the number of points written. Missing normals are written as nan.
    """
    pts, nrm = [], []
    for i in range(traj.n_scans):
        scan: Scan = source.get(i)
        q, t = traj.interpolate(i, scan.alphas)
        R = quat_to_matrix(q)
        pts.append(np.einsum("nij,nj->ni", R, scan.points) + t)
        if scan.normals is None:
            nrm.append(np.full((len(scan), 3), np.nan))
        else:
            nrm.append(np.einsum("nij,nj->ni", R, scan.normals))
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    N = np.concatenate(nrm) if nrm else np.zeros((0, 3))
    if subsample_cell is not None and len(P):
        keep = VoxelHashMap(P, subsample_cell).indices()
        P, N = P[keep], N[keep]
    np.savetxt(Path(path), np.hstack([P, N]), fmt="%.9f")
    return len(P)
