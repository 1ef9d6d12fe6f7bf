"""Synthetic LiDAR scenes with exact ground truth.

A world is a set of axis-aligned boxes: the room is seen from inside, the
pillars from outside. A spinning multi-beam sensor moves along a
constant-velocity trajectory; every beam is timestamped by its azimuth and
cast from the pose interpolated at that time, so deskewing with the
ground-truth knots puts every noise-free point exactly on a box face.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Pose,
    Trajectory,
    quat_exp,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    so3_apply,
    so3_series,
)
from .pointcloud import Scan
from .storage import write_dataset, write_pose_file


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    # True: rays start inside and hit the inner faces (a room)
    interior: bool = False


def default_world() -> list[Box]:
    return [
        Box((-14.0, -10.0, -1.6), (16.0, 9.0, 4.4), interior=True),
        Box((2.0, 3.0, -1.6), (3.5, 4.2, 4.4)),
        Box((-6.0, -6.5, -1.6), (-4.6, -5.0, 4.4)),
        Box((6.5, -5.0, -1.6), (8.5, -3.8, 1.2)),
        Box((-9.0, 4.0, -1.6), (-7.0, 6.5, 2.0)),
        Box((11.0, 2.0, -1.6), (12.5, 6.0, 4.4)),
    ]


@dataclass(frozen=True)
class SensorParams:
    n_beams: int = 16
    n_azimuth: int = 128
    min_elevation_deg: float = -25.0
    max_elevation_deg: float = 25.0
    max_range: float = 100.0

    def directions(self) -> np.ndarray:
        """Sensor-frame unit directions ordered by azimuth, ``(n_azimuth, n_beams, 3)``."""
        el = np.deg2rad(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.n_beams))
        az = 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth
        ce = np.cos(el)[None, :]
        return np.stack(
            [np.cos(az)[:, None] * ce, np.sin(az)[:, None] * ce, np.broadcast_to(np.sin(el), (len(az), len(el)))],
            axis=-1,
        )


@dataclass(frozen=True)
class SessionParams:
    """Constant body-frame twist: ``velocity`` and ``angular_velocity`` are
    expressed in the sensor frame, so the path is a helical arc."""

    n_scans: int = 50
    scan_period: float = 0.1
    t0: float = 0.0
    start: tuple[float, float, float] = (-6.0, -2.0, 0.0)
    start_rotvec: tuple[float, float, float] = (0.0, 0.0, 0.3)
    velocity: tuple[float, float, float] = (1.5, 0.0, 0.02)
    angular_velocity: tuple[float, float, float] = (0.02, -0.03, 0.6)


@dataclass(frozen=True)
class SceneParams:
    world: Sequence[Box] = field(default_factory=default_world)
    sensor: SensorParams = SensorParams()
    sessions: Sequence[SessionParams] = (SessionParams(),)
    range_noise: float = 0.0
    outlier_fraction: float = 0.0
    outlier_extent: float = 10.0


@dataclass(eq=False)
class SyntheticScene:
    params: SceneParams
    gt: Trajectory
    scans: list[Scan]
    session_ids: list[int]


def ground_truth_trajectory(sessions: Sequence[SessionParams]) -> Trajectory:
    """Knots at every scan boundary of every session."""
    quats, trans, times, sids = [], [], [], []
    for s, sp in enumerate(sessions):
        if s and sp.t0 <= times[-1]:
            raise ValueError("sessions must be ordered in time")
        dt = sp.scan_period * np.arange(sp.n_scans + 1)
        q0 = quat_exp(np.asarray(sp.start_rotvec, dtype=np.float64))
        q = quat_normalize(quat_mul(q0, quat_exp(dt[:, None] * np.asarray(sp.angular_velocity))))
        quats.append(q)
        trans.append(np.asarray(sp.start) + _integrate_twist(q0, sp.velocity, sp.angular_velocity, dt))
        times.extend((sp.t0 + dt).tolist())
        sids.extend([s] * (sp.n_scans + 1))
    return Trajectory(np.concatenate(quats), np.concatenate(trans), times, sids)


def _integrate_twist(q0, v, w, dt) -> np.ndarray:
    """Closed-form position offset for constant body twist ``(v, w)``."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    psi = dt[:, None] * w
    theta = np.linalg.norm(psi, axis=1)
    _, b, c, _ = so3_series(theta)
    # integral_0^t Exp(w s) ds v = t * J_l(w t) v
    lv = so3_apply(psi, b, c, np.broadcast_to(v, psi.shape))
    return (dt[:, None] * lv) @ quat_to_matrix(q0).T


def raycast(world: Sequence[Box], origins: np.ndarray, dirs: np.ndarray, max_range: float = np.inf) -> np.ndarray:
    """Distance to the first box face along each ray (inf on a miss)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    safe = np.where(dirs == 0.0, 1e-300, dirs)
    best = np.full(len(origins), np.inf)
    for box in world:
        t1 = (np.asarray(box.lo) - origins) / safe
        t2 = (np.asarray(box.hi) - origins) / safe
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        if box.interior:
            t = tmax.min(axis=1)
            inside = np.all((origins > box.lo) & (origins < box.hi), axis=1)
            t = np.where(inside & (t > 0), t, np.inf)
        else:
            near = tmin.max(axis=1)
            far = tmax.min(axis=1)
            t = np.where((near <= far) & (near > 0), near, np.inf)
        best = np.minimum(best, t)
    return np.where(best <= max_range, best, np.inf)


def generate_scene(params: SceneParams = SceneParams(), seed: int = 0, out_dir=None) -> SyntheticScene:
    """Simulate every scan; optionally write the dataset and ``gt_poses.txt``.

    Raises ``ValueError`` if a scan receives no returns.
    """
    rng = np.random.default_rng(seed)
    gt = ground_truth_trajectory(params.sessions)
    dirs = params.sensor.directions()
    n_az, n_beams = dirs.shape[:2]
    d_local = dirs.reshape(-1, 3)
    frac = np.repeat(np.arange(n_az) / n_az, n_beams)

    scans, session_ids = [], []
    for i in range(gt.n_scans):
        t_b, t_e = gt.scan_window(i)
        times = t_b + frac * (t_e - t_b)
        alpha = (times - t_b) / (t_e - t_b)
        q, t = gt.interpolate(i, alpha)
        R = quat_to_matrix(q)
        d_world = np.einsum("nij,nj->ni", R, d_local)
        r = raycast(params.world, t, d_world, params.sensor.max_range)
        hit = np.isfinite(r)
        if not hit.any():
            raise ValueError(f"scan {i}: no ray hits the world geometry")
        r = r[hit]
        if params.range_noise > 0:
            r = r + rng.normal(0.0, params.range_noise, size=len(r))
        pts = r[:, None] * d_local[hit]
        if params.outlier_fraction > 0:
            bad = rng.random(len(pts)) < params.outlier_fraction
            ext = params.outlier_extent
            pts[bad] = rng.uniform(-ext, ext, size=(int(bad.sum()), 3))
        scans.append(Scan(i, pts, times[hit], t_b, t_e))
        session_ids.append(int(gt.scan_session[i]))

    scene = SyntheticScene(params, gt, scans, session_ids)
    if out_dir is not None:
        out = Path(out_dir)
        write_dataset(out, scans, session_ids)
        write_pose_file(out / "gt_poses.txt", gt)
    return scene


def perturb_trajectory(traj: Trajectory, sigma_t: float, sigma_rot_deg: float, seed: int = 0, fixed_first: bool = False) -> Trajectory:
    """Add independent Gaussian noise to every knot (per axis, m and deg)."""
    rng = np.random.default_rng(seed)
    dt = rng.normal(0.0, sigma_t, size=(traj.n_knots, 3))
    dr = rng.normal(0.0, np.deg2rad(sigma_rot_deg), size=(traj.n_knots, 3))
    if fixed_first:
        dt[0] = dr[0] = 0.0
    delta = np.hstack([dr, dt])
    return traj.apply_updates(delta)


def offset_session(traj: Trajectory, session_id: int, g: Pose) -> Trajectory:
    """Rigidly move one session by ``g`` (applied in the world frame)."""
    m = traj.session_ids == session_id
    moved = traj.transformed(g)
    quats = np.where(m[:, None], moved.quats, traj.quats)
    trans = np.where(m[:, None], moved.translations, traj.translations)
    return traj.replace(quats=quats, translations=trans)
