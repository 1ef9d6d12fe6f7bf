"""Rigid-body poses and the continuous-time trajectory.

Rotations are unit quaternions stored as ``(w, x, y, z)``. Pose updates use a
right perturbation, ``R <- R Exp(dtheta)`` and ``t <- t + dt``, which is the
convention the analytic Jacobians in :mod:`ctba.optimizer` are written for.

Most functions come in two flavours: a scalar one working on :class:`Pose`
objects and a vectorised helper (prefixed ``quat_``/``so3_``) working on
stacked arrays, used by the optimizer hot paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

_SMALL_ANGLE = 1e-6


# --------------------------------------------------------------------------
# vectorised quaternion / SO(3) helpers
# --------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _renormalize(q: np.ndarray) -> np.ndarray:
    """Normalize only rows whose norm is off by more than rounding, so
    already-unit quaternions keep their exact bits."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(np.abs(n - 1.0) > 1e-15, q / n, q)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) to quaternion with ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation vector -> unit quaternion."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * phi], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation vector of angle <= pi (shortest arc)."""
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    small = s < _SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    k = np.where(small, 2.0 / w * (1.0 - s**2 / (3.0 * w**2)), 2.0 * np.arctan2(s, w) / safe_s)
    return k[..., None] * v


def quat_slerp(q0: np.ndarray, q1: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Shortest-arc slerp written as ``q0 * Exp(alpha * Log(q0^-1 q1))``.

    ``alpha == 0`` and ``alpha == 1`` return the inputs bitwise.
    """
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    phi = quat_log(quat_mul(quat_conj(q0), q1))
    out = quat_mul(q0, quat_exp(alpha[..., None] * phi))
    out = quat_normalize(out)
    a = alpha[..., None]
    out = np.where(a == 0.0, q0, out)
    return np.where(a == 1.0, q1, out)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_series(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients shared by Exp and the SO(3) Jacobians.

    Returns ``(A, B, C, D)`` with
    ``Exp(p)    = I + A[p]x + B[p]x^2``,
    ``J_r(p)    = I - B[p]x + C[p]x^2``,
    ``J_r^-1(p) = I + 1/2[p]x + D[p]x^2``, where ``theta = |p|``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    t2 = theta * theta
    tiny = theta < 1e-4
    t = np.where(tiny, 1.0, theta)
    a = np.where(tiny, 1.0 - t2 / 6.0, np.sin(t) / t)
    # 2 sin^2(t/2) / t^2 has no cancellation
    h = 0.5 * t
    b = np.where(tiny, 0.5 - t2 / 24.0, 0.5 * (np.sin(h) / h) ** 2)
    # c and d cancel badly for small angles; use the series below 0.1 rad
    small = theta < 0.1
    t = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0 - t2**3 / 362880.0, (t - np.sin(t)) / (t * t * t))
    d_series = 1.0 / 12.0 + t2 / 720.0 + t2**2 / 30240.0 + t2**3 / 1209600.0
    # 1/t^2 - cot(t/2) / (2t); stable up to t = pi
    d = np.where(small, d_series, 1.0 / (t * t) - 1.0 / (2.0 * t * np.tan(0.5 * t)))
    return a, b, c, d


def so3_apply(phi: np.ndarray, c1, c2, v: np.ndarray) -> np.ndarray:
    """Apply ``I + c1 [phi]x + c2 [phi]x^2`` to ``v`` without forming matrices."""
    pv = np.cross(phi, v)
    ppv = np.cross(phi, pv)
    return v + np.asarray(c1)[..., None] * pv + np.asarray(c2)[..., None] * ppv


# --------------------------------------------------------------------------
# scalar pose API
# --------------------------------------------------------------------------


def _unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q}")
    if abs(n - 1.0) > 1e-15:
        q = q / n
    q.setflags(write=False)
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rotation (unit quaternion ``w, x, y, z``) plus translation in meters."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _unit_quat(self.quat))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_exp(np.asarray(rotvec, dtype=np.float64)), translation)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        qi = quat_conj(self.quat)
        return Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other`` (apply ``other`` first)."""
        return Pose(
            quat_normalize(quat_mul(self.quat, other.quat)),
            self.rotation_matrix @ other.translation + self.translation,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __repr__(self) -> str:
        return f"Pose(quat={self.quat.tolist()}, translation={self.translation.tolist()})"


def rotation_angle(q_a: np.ndarray, q_b: np.ndarray) -> np.ndarray:
    """Geodesic angle in radians between rotations (vectorised)."""
    rel = quat_mul(quat_conj(q_a), q_b)
    # atan2 stays accurate near zero, unlike arccos of the dot product
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


def compute_alpha(t: float, t_b: float, t_e: float) -> float:
    """Fraction of the scan window ``[t_b, t_e]`` elapsed at time ``t``."""
    if t_e - t_b < 1e-12:
        raise ValueError(f"malformed scan timing: t_b={t_b!r}, t_e={t_e!r}")
    if t < t_b or t > t_e:
        raise ValueError(f"point outside scan window: t={t!r} not in [{t_b!r}, {t_e!r}]")
    return (t - t_b) / (t_e - t_b)


def compute_alphas(times: np.ndarray, t_b: float, t_e: float) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if t_e - t_b < 1e-12:
        raise ValueError(f"malformed scan timing: t_b={t_b!r}, t_e={t_e!r}")
    if times.size and (times.min() < t_b or times.max() > t_e):
        raise ValueError(f"point outside scan window [{t_b!r}, {t_e!r}]")
    return (times - t_b) / (t_e - t_b)


def interpolate_pose(start: Pose, end: Pose, alpha: float) -> Pose:
    """Slerp on rotation, lerp on translation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    if alpha == 0.0:
        return start
    if alpha == 1.0:
        return end
    q = quat_slerp(start.quat, end.quat, np.float64(alpha))
    t = (1.0 - alpha) * start.translation + alpha * end.translation
    return Pose(q, t)


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.rotation_matrix @ np.asarray(p, dtype=np.float64) + pose.translation


def apply_update(pose: Pose, delta) -> Pose:
    """Right-perturb the rotation by ``delta[:3]`` and shift by ``delta[3:]``."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    q = quat_normalize(quat_mul(pose.quat, quat_exp(delta[:3])))
    return Pose(q, pose.translation + delta[3:])


# --------------------------------------------------------------------------
# trajectory
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PoseKnot:
    pose: Pose
    timestamp: float
    session_id: int = 0


class Trajectory:
    """Pose knots at scan boundaries, shared between consecutive scans.

    Knots are stored as stacked arrays. Within a session, scan ``s`` spans
    knots ``(k, k + 1)``; a new session starts a new chain of knots, so the
    last knot of one session is never the first of the next.

    Scans are numbered globally in knot order: session 0 first, then
    session 1, and so on.
    """

    def __init__(self, quats, translations, timestamps, session_ids=None):
        quats = np.array(quats, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(quats)) or np.any(np.linalg.norm(quats, axis=1) == 0):
            raise ValueError("knot quaternions must be finite and non-zero")
        quats = _renormalize(quats)
        translations = np.array(translations, dtype=np.float64).reshape(-1, 3)
        timestamps = np.array(timestamps, dtype=np.float64).reshape(-1)
        n = len(timestamps)
        if session_ids is None:
            session_ids = np.zeros(n, dtype=np.int64)
        session_ids = np.array(session_ids, dtype=np.int64).reshape(-1)
        if not (len(quats) == len(translations) == n == len(session_ids)):
            raise ValueError("knot arrays must have equal length")

        scan_knots = []
        for k in range(n - 1):
            if session_ids[k + 1] == session_ids[k]:
                if not timestamps[k + 1] - timestamps[k] >= 1e-12:
                    raise ValueError(
                        f"knot timestamps must increase within a session (knot {k + 1})"
                    )
                scan_knots.append((k, k + 1))
        if n and len(np.unique(session_ids)) != 1 + np.count_nonzero(np.diff(session_ids)):
            raise ValueError("sessions must occupy contiguous runs of knots")

        self.quats = quats
        self.translations = translations
        self.timestamps = timestamps
        self.session_ids = session_ids
        self.scan_knots = np.array(scan_knots, dtype=np.int64).reshape(-1, 2)
        self.scan_session = session_ids[self.scan_knots[:, 0]] if len(scan_knots) else np.zeros(0, np.int64)
        for a in (self.quats, self.translations, self.timestamps, self.session_ids, self.scan_knots):
            a.setflags(write=False)

    # -- construction ---------------------------------------------------

    @classmethod
    def from_knots(cls, knots: Sequence[PoseKnot]) -> "Trajectory":
        return cls(
            [k.pose.quat for k in knots],
            [k.pose.translation for k in knots],
            [k.timestamp for k in knots],
            [k.session_id for k in knots],
        )

    def replace(self, quats=None, translations=None) -> "Trajectory":
        return Trajectory(
            self.quats if quats is None else quats,
            self.translations if translations is None else translations,
            self.timestamps,
            self.session_ids,
        )

    # -- accessors ------------------------------------------------------

    @property
    def n_knots(self) -> int:
        return len(self.timestamps)

    @property
    def n_scans(self) -> int:
        return len(self.scan_knots)

    def __len__(self) -> int:
        return self.n_knots

    def knot(self, k: int) -> PoseKnot:
        return PoseKnot(Pose(self.quats[k], self.translations[k]), float(self.timestamps[k]), int(self.session_ids[k]))

    def __iter__(self) -> Iterator[PoseKnot]:
        for k in range(self.n_knots):
            yield self.knot(k)

    def pose(self, k: int) -> Pose:
        return Pose(self.quats[k], self.translations[k])

    def _check_scan(self, scan_idx: int) -> None:
        if not 0 <= scan_idx < self.n_scans:
            raise IndexError(f"unknown scan index {scan_idx} (trajectory has {self.n_scans} scans)")

    def scan_window(self, scan_idx: int) -> tuple[float, float]:
        self._check_scan(scan_idx)
        kb, ke = self.scan_knots[scan_idx]
        return float(self.timestamps[kb]), float(self.timestamps[ke])

    def scan_positions(self) -> np.ndarray:
        """Start-knot translation of every scan, shape ``(n_scans, 3)``."""
        return self.translations[self.scan_knots[:, 0]]

    def interpolate(self, scan_idx: int, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-point quaternions and translations inside one scan."""
        self._check_scan(scan_idx)
        kb, ke = self.scan_knots[scan_idx]
        alpha = np.asarray(alpha, dtype=np.float64)
        q = quat_slerp(self.quats[kb], self.quats[ke], alpha)
        a = alpha[..., None]
        t = (1.0 - a) * self.translations[kb] + a * self.translations[ke]
        return q, t

    def deskew(self, scan_idx: int, points: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """Map sensor-frame points to the global frame at their own poses."""
        q, t = self.interpolate(scan_idx, alpha)
        return np.einsum("nij,nj->ni", quat_to_matrix(q), points) + t

    def apply_updates(self, delta: np.ndarray) -> "Trajectory":
        """Apply one 6-vector update ``[dtheta, dt]`` per knot."""
        delta = np.asarray(delta, dtype=np.float64).reshape(self.n_knots, 6)
        q = quat_normalize(quat_mul(self.quats, quat_exp(delta[:, :3])))
        return self.replace(quats=q, translations=self.translations + delta[:, 3:])

    def transformed(self, g: Pose) -> "Trajectory":
        """Left-compose every knot with a global rigid transform."""
        q = quat_normalize(quat_mul(g.quat, self.quats))
        t = self.translations @ g.rotation_matrix.T + g.translation
        return self.replace(quats=q, translations=t)

    def session(self, session_id: int) -> "Trajectory":
        m = self.session_ids == session_id
        return Trajectory(self.quats[m], self.translations[m], self.timestamps[m], self.session_ids[m])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in [
                (self.quats, other.quats),
                (self.translations, other.translations),
                (self.timestamps, other.timestamps),
                (self.session_ids, other.session_ids),
            ]
        )

    def __repr__(self) -> str:
        return f"Trajectory(n_knots={self.n_knots}, n_scans={self.n_scans}, sessions={np.unique(self.session_ids).tolist()})"


def pose_at(traj: Trajectory, scan_idx: int, t: float) -> Pose:
    """Continuous-time pose of a scan at absolute time ``t``."""
    t_b, t_e = traj.scan_window(scan_idx)
    alpha = compute_alpha(t, t_b, t_e)
    kb, ke = traj.scan_knots[scan_idx]
    return interpolate_pose(traj.pose(kb), traj.pose(ke), alpha)
