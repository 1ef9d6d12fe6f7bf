"""Point-to-plane bundle adjustment over the continuous-time trajectory.

Each correspondence gives one residual

    e = n_c^T (p_j - p_c),   n_c = R(t_c) n_c_local

where both points are mapped to the global frame with their own
interpolated poses. A residual touches four knots: start and end of the
source scan, start and end of the target scan. The parameter vector holds
six entries per knot, ``[dtheta, dt]``, applied as ``R <- R Exp(dtheta)``
and ``t <- t + dt``.

The target normal is held constant while linearising.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .correspondence import AssociationConfig, Correspondences, rebuild_iteration_state
from .geometry import (
    Trajectory,
    quat_conj,
    quat_log,
    quat_mul,
    quat_slerp,
    quat_to_matrix,
    skew,
    so3_series,
)
from .storage import iteration_order

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    """The problem cannot be solved (disconnected or numerically broken)."""


class SolverError(OptimizationError):
    """Factorisation of the damped normal equations failed."""


# --------------------------------------------------------------------------
# residuals and Jacobians
# --------------------------------------------------------------------------


@dataclass(eq=False)
class _Frames:
    """Interpolated poses of the distinct points referenced by a batch.

    ``inv`` maps each referenced point back to its row in the unique arrays.
    """

    scans: np.ndarray
    alpha: np.ndarray
    points: np.ndarray
    kb: np.ndarray
    ke: np.ndarray
    R: np.ndarray
    t: np.ndarray
    inv: np.ndarray

    def world(self) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.R, self.points) + self.t


def _frames(traj: Trajectory, scans, idx, alpha, points) -> _Frames:
    key = np.asarray(scans, dtype=np.int64) * (1 << 32) + np.asarray(idx, dtype=np.int64)
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    s = scans[first]
    a = alpha[first]
    kb = traj.scan_knots[s, 0]
    ke = traj.scan_knots[s, 1]
    q = quat_slerp(traj.quats[kb], traj.quats[ke], a)
    t = (1.0 - a)[:, None] * traj.translations[kb] + a[:, None] * traj.translations[ke]
    return _Frames(s, a, points[first], kb, ke, quat_to_matrix(q), t, inv.reshape(-1))


def _world(traj: Trajectory, corr: Correspondences):
    """Source points, target points and target normals in the world frame."""
    n = len(corr)
    f = _frames(
        traj,
        np.concatenate([corr.src_scan, corr.tgt_scan]),
        np.concatenate([corr.src_idx, -1 - corr.tgt_idx]),
        np.concatenate([corr.src_alpha, corr.tgt_alpha]),
        np.concatenate([corr.src_points, corr.tgt_points]),
    )
    # source and target keys never collide: target indices are stored negated
    P = f.world()
    ps = P[f.inv[:n]]
    pt = P[f.inv[n:]]
    n_hat = np.einsum("nij,nj->ni", f.R[f.inv[n:]], corr.tgt_normals)
    return f, ps, pt, n_hat


def residuals(corr: Correspondences, traj: Trajectory, frozen_normals: Optional[np.ndarray] = None) -> np.ndarray:
    """Signed point-to-plane distances at the current trajectory.

    ``frozen_normals`` (world frame, one per row) replaces the normals
    carried by the target poses, as the linearisation does.
    """
    if len(corr) == 0:
        return np.zeros(0)
    _, ps, pt, n_hat = _world(traj, corr)
    if frozen_normals is not None:
        n_hat = np.asarray(frozen_normals, dtype=np.float64)
    return np.einsum("ni,ni->n", n_hat, ps - pt)


def world_normals(corr: Correspondences, traj: Trajectory) -> np.ndarray:
    """Target normals rotated into the world frame."""
    if len(corr) == 0:
        return np.zeros((0, 3))
    return _world(traj, corr)[3]


def _so3_matrix(v: np.ndarray, c1, c2) -> np.ndarray:
    """``I + c1 [v]x + c2 [v]x^2`` for stacked vectors."""
    K = skew(v)
    c1 = np.broadcast_to(c1, len(v))[:, None, None]
    c2 = np.broadcast_to(c2, len(v))[:, None, None]
    return np.eye(3) + c1 * K + c2 * (K @ K)


def _rotation_gains(traj: Trajectory, f: _Frames, exact: bool):
    """Per-point ``G_b, G_e`` with ``dn^T p / d(dtheta) = G n`` for the normal ``n``.

    Exact slerp derivative: with ``phi = Log(R_b^T R_e)`` and ``psi = alpha phi``,
    ``dR/d(dtheta_b) ~ Exp(psi)^T - alpha J_r^-1(phi) J_l(psi)`` and
    ``dR/d(dtheta_e) ~ alpha J_l^-1(phi) J_l(psi)`` (right perturbations).
    """
    P = skew(f.points)
    a = f.alpha
    if not exact:
        # first-order form: as if the point were carried by one knot alone
        Rb = quat_to_matrix(traj.quats[f.kb])
        Re = quat_to_matrix(traj.quats[f.ke])
        gb = (1.0 - a)[:, None, None] * (P @ np.swapaxes(Rb, 1, 2))
        ge = a[:, None, None] * (P @ np.swapaxes(Re, 1, 2))
        return gb, ge
    phi_scan = quat_log(quat_mul(quat_conj(traj.quats[traj.scan_knots[:, 0]]), traj.quats[traj.scan_knots[:, 1]]))
    phi = phi_scan[f.scans]
    psi = a[:, None] * phi
    _, _, _, d = so3_series(np.linalg.norm(phi, axis=1))
    ea, eb, ec, _ = so3_series(np.linalg.norm(psi, axis=1))
    jl_psi = _so3_matrix(psi, eb, ec)
    mb = _so3_matrix(psi, ea, eb) - a[:, None, None] * (_so3_matrix(phi, 0.5, d) @ jl_psi)
    me = a[:, None, None] * (_so3_matrix(phi, -0.5, d) @ jl_psi)
    mb[a == 1.0] = 0.0
    PRt = P @ np.swapaxes(f.R, 1, 2)
    return mb @ PRt, me @ PRt


@dataclass(eq=False)
class ResidualRows:
    """Linearised rows: ``e (n,)``, ``J (n, 4, 6)`` and ``knots (n, 4)``.

    Slot order is source start, source end, target start, target end; each
    slot holds ``[J_R (3), J_t (3)]``.
    """

    e: np.ndarray
    J: np.ndarray
    knots: np.ndarray

    def __len__(self) -> int:
        return len(self.e)


def linearize(corr: Correspondences, traj: Trajectory, exact: bool = True) -> ResidualRows:
    """Residuals and their eight Jacobian blocks.

    With ``exact=True`` the rotation blocks are the derivatives of slerp
    itself; ``exact=False`` uses the first-order ``(1 - alpha)``/``alpha``
    weighting of the knot Jacobians, which coincides with the exact one when
    start and end rotations are equal.
    """
    n = len(corr)
    if n == 0:
        return ResidualRows(np.zeros(0), np.zeros((0, 4, 6)), np.zeros((0, 4), dtype=np.int64))
    a_s = corr.src_alpha
    a_t = corr.tgt_alpha
    f, ps, pt, n_hat = _world(traj, corr)
    e = np.einsum("ni,ni->n", n_hat, ps - pt)
    gb, ge = _rotation_gains(traj, f, exact)
    src, tgt = f.inv[:n], f.inv[n:]

    J = np.empty((n, 4, 6))
    J[:, 0, :3] = np.einsum("nij,nj->ni", gb[src], n_hat)
    J[:, 1, :3] = np.einsum("nij,nj->ni", ge[src], n_hat)
    J[:, 2, :3] = -np.einsum("nij,nj->ni", gb[tgt], n_hat)
    J[:, 3, :3] = -np.einsum("nij,nj->ni", ge[tgt], n_hat)
    J[:, 0, 3:] = (1.0 - a_s)[:, None] * n_hat
    J[:, 1, 3:] = a_s[:, None] * n_hat
    J[:, 2, 3:] = -(1.0 - a_t)[:, None] * n_hat
    J[:, 3, 3:] = -a_t[:, None] * n_hat
    knots = np.stack([f.kb[src], f.ke[src], f.kb[tgt], f.ke[tgt]], axis=1)
    return ResidualRows(e, J, knots)


def jacobians(corr: Correspondences, traj: Trajectory, exact: bool = True) -> np.ndarray:
    """``(n, 8, 3)`` blocks: R_b, R_e, t_b, t_e of the source, then of the target."""
    J = linearize(corr, traj, exact).J
    return np.concatenate([J[:, :2, :3], J[:, :2, 3:], J[:, 2:, :3], J[:, 2:, 3:]], axis=1)


# --------------------------------------------------------------------------
# robust kernel
# --------------------------------------------------------------------------


def gm_weight(e, sigma: float):
    """IRLS weight of the Geman-McClure loss, ``(s^2 / (s^2 + e^2))^2``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    return (s2 / (s2 + np.square(e))) ** 2


def gm_loss(e, sigma: float):
    """``(s^2 / 2) e^2 / (s^2 + e^2)``; its IRLS weight is :func:`gm_weight`."""
    s2 = sigma * sigma
    e2 = np.square(e)
    return 0.5 * s2 * e2 / (s2 + e2)


# --------------------------------------------------------------------------
# sparse normal equations
# --------------------------------------------------------------------------


@dataclass(eq=False)
class SparseNormalSystem:
    """Block-sparse ``H`` (6x6 per knot pair) and gradient ``b`` (6 per knot).

    Blocks are stored as sorted ``(row, col)`` knot pairs with both triangles
    present. Fixed knots carry an identity diagonal block, no off-diagonal
    blocks and zero gradient.
    """

    n_knots: int
    rows: np.ndarray
    cols: np.ndarray
    blocks: np.ndarray
    b: np.ndarray
    fixed: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.rows)

    def block(self, i: int, j: int) -> np.ndarray:
        hit = np.flatnonzero((self.rows == i) & (self.cols == j))
        return self.blocks[hit[0]] if len(hit) else np.zeros((6, 6))

    def to_sparse(self) -> sp.csr_matrix:
        n = self.n_knots
        if self.n_blocks == 0:
            return sp.csr_matrix((6 * n, 6 * n))
        bsr = sp.bsr_matrix((self.blocks, self.cols, self._indptr()), shape=(6 * n, 6 * n))
        return bsr.tocsr()

    def _indptr(self) -> np.ndarray:
        return np.searchsorted(self.rows, np.arange(self.n_knots + 1)).astype(np.int64)

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()


def _group_rows(knots: np.ndarray, n_knots: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct knot tuples (sorted lexicographically) and row -> tuple index."""
    if float(n_knots) ** 4 < 2.0**62:
        k = knots.astype(np.int64)
        code = ((k[:, 0] * n_knots + k[:, 1]) * n_knots + k[:, 2]) * n_knots + k[:, 3]
        codes, first, inverse = np.unique(code, return_index=True, return_inverse=True)
        return knots[first], inverse.reshape(-1)
    keys, inverse = np.unique(knots, axis=0, return_inverse=True)
    return keys, inverse.reshape(-1)


def assemble(
    rows: ResidualRows,
    n_knots: int,
    weights: Optional[np.ndarray] = None,
    fixed: Optional[np.ndarray] = None,
) -> SparseNormalSystem:
    """Accumulate ``H = sum w J^T J`` and ``b = -sum w J^T e`` block-wise.

    Rows are grouped by the knots they touch; each group adds one dense
    24x24 product scattered into 16 knot-pair blocks. Groups are visited in
    sorted order so the result does not depend on row order across groups.
    """
    fixed = np.zeros(n_knots, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    w = np.ones(len(rows)) if weights is None else np.asarray(weights, dtype=np.float64)
    acc: dict[tuple[int, int], np.ndarray] = {}
    b = np.zeros((n_knots, 6))
    if len(rows):
        keys, inverse = _group_rows(rows.knots, n_knots)
        order = np.argsort(inverse, kind="stable")
        splits = np.cumsum(np.bincount(inverse, minlength=len(keys)))[:-1]
        J = rows.J.reshape(-1, 24)
        for key, idx in zip(keys, np.split(order, splits)):
            Jg = J[idx]
            WJ = Jg * w[idx, None]
            Hg = WJ.T @ Jg
            bg = -(WJ.T @ rows.e[idx])
            for a in range(4):
                ka = int(key[a])
                b[ka] += bg[6 * a : 6 * a + 6]
                for c in range(4):
                    kc = int(key[c])
                    blk = Hg[6 * a : 6 * a + 6, 6 * c : 6 * c + 6]
                    if (ka, kc) in acc:
                        acc[(ka, kc)] += blk
                    else:
                        acc[(ka, kc)] = blk.copy()
    # mirror the upper triangle so H is exactly symmetric
    for (i, j), blk in acc.items():
        if i < j:
            acc[(j, i)] = blk.T.copy()
        elif i == j:
            acc[(i, i)] = np.triu(blk) + np.triu(blk, 1).T
    for k in np.flatnonzero(fixed):
        b[k] = 0.0
    pairs = sorted(p for p in acc if not (fixed[p[0]] or fixed[p[1]]))
    pairs += [(int(k), int(k)) for k in np.flatnonzero(fixed)]
    pairs.sort()
    blocks = np.array([np.eye(6) if fixed[i] else acc[(i, j)] for i, j in pairs]).reshape(-1, 6, 6)
    r = np.array([p[0] for p in pairs], dtype=np.int64)
    c = np.array([p[1] for p in pairs], dtype=np.int64)
    return SparseNormalSystem(n_knots, r, c, blocks, b, fixed.copy())


def solve(system: SparseNormalSystem, lam: float = 0.0) -> np.ndarray:
    """Solve ``(H + lam diag(H)) delta = b``; returns ``(n_knots, 6)`` updates.

    Fixed knots and knots that no residual touches get a zero update.
    """
    if lam < 0:
        raise ValueError("damping must be non-negative")
    n = system.n_knots
    delta = np.zeros((n, 6))
    if n == 0 or not np.any(system.b):
        return delta
    H = system.to_sparse()
    diag = H.diagonal()
    active = np.ones(6 * n, dtype=bool)
    dead = np.zeros(n, dtype=bool)
    for k in range(n):
        if system.fixed[k] or not np.any(diag[6 * k : 6 * k + 6]):
            dead[k] = True
    active = ~np.repeat(dead, 6)
    if not active.any():
        return delta
    A = H[active][:, active] + lam * sp.diags(diag[active])
    rhs = system.b.reshape(-1)[active]
    try:
        lu = spla.splu(sp.csc_matrix(A))
        x = lu.solve(rhs)
    except RuntimeError as exc:
        raise SolverError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution")
    if np.dot(x, rhs) <= 0:
        raise SolverError("normal equations are not positive definite")
    out = delta.reshape(-1)
    out[active] = x
    return out.reshape(n, 6)


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    # stop when the largest per-knot update norm (rad and m combined) drops below this
    convergence_threshold: float = 1e-5
    gm_sigma: float = 0.3
    robust: bool = True
    lambda_init: float = 1e-6
    lambda_max: float = 1e10
    gauge: str = "first_knot"
    exact_jacobians: bool = True
    # coarse-to-fine: search voxel, max distance and sigma are multiplied by
    # max(1, search_scale * search_scale_decay ** iteration)
    search_scale: float = 1.0
    search_scale_decay: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gm_sigma > 0:
            raise ValueError("gm_sigma must be positive")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be >= 0")
        if self.gauge not in ("first_knot", "none"):
            raise ValueError(f"unknown gauge policy {self.gauge!r}")
        if self.search_scale < 1.0 or not 0 < self.search_scale_decay < 1:
            raise ValueError("search_scale must be >= 1 and 0 < search_scale_decay < 1")

    def scale_at(self, iteration: int) -> float:
        return max(1.0, self.search_scale * self.search_scale_decay**iteration)


@dataclass
class IterationReport:
    iteration: int
    rms_before: float
    rms_after: float
    n_corr: int
    max_update: float
    lam: float
    wall_s: float
    cost_before: float = 0.0
    cost_after: float = 0.0
    row_bound: int = 0
    scale: float = 1.0
    accepted: bool = True
    buffer_peak: int = 0


@dataclass
class OptimizationResult:
    trajectory: Trajectory
    reports: list[IterationReport] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.reports)


REPORT_COLUMNS = ["iter", "rms_before", "rms_after", "n_corr", "max_update", "lambda", "wall_s"]


def write_report_csv(path, reports: list[IterationReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.iteration, repr(r.rms_before), repr(r.rms_after), r.n_corr, repr(r.max_update), repr(r.lam), f"{r.wall_s:.3f}"])


def _robust_cost(e: np.ndarray, sigma: float, robust: bool) -> float:
    return float(np.sum(gm_loss(e, sigma))) if robust else float(0.5 * np.sum(e * e))


def _rms(e: np.ndarray) -> float:
    return float(np.sqrt(np.mean(e * e))) if len(e) else 0.0


def gauge_mask(traj: Trajectory, policy: str) -> np.ndarray:
    fixed = np.zeros(traj.n_knots, dtype=bool)
    if policy == "first_knot" and traj.n_knots:
        fixed[0] = True
    return fixed


def optimize(
    source,
    traj_init: Trajectory,
    config: OptimizerConfig = OptimizerConfig(),
    association: AssociationConfig = AssociationConfig(),
    buffer_capacity: Optional[int] = None,
    callback: Optional[Callable[[IterationReport], None]] = None,
) -> OptimizationResult:
    """Jointly refine all knots by iterated robust Gauss-Newton with damping.

    Each iteration rebuilds correspondences, linearises, and solves the
    damped normal equations. A step is accepted only if the robust cost of
    the current correspondences does not increase; otherwise the damping
    grows tenfold and the step is retried. Successful steps halve it.
    """
    n_scans = traj_init.n_scans
    if n_scans < 2:
        raise OptimizationError("need at least two scans")
    if len(source) != n_scans:
        raise OptimizationError(f"trajectory has {n_scans} scans but the source provides {len(source)}")
    traj = traj_init
    fixed = gauge_mask(traj, config.gauge)
    lam = config.lambda_init
    result = OptimizationResult(traj)

    for it in range(config.max_iterations):
        t0 = time.perf_counter()
        scale = config.scale_at(it)
        assoc = association.scaled(scale)
        sigma = config.gm_sigma * scale
        state = rebuild_iteration_state(traj, iteration_order(it, n_scans), source, assoc, it, buffer_capacity)
        corr = state.correspondences
        if len(corr) == 0:
            raise OptimizationError(f"iteration {it}: no correspondences (disconnected problem)")
        rows = linearize(corr, traj, config.exact_jacobians)
        w = gm_weight(rows.e, sigma) if config.robust else None
        system = assemble(rows, traj.n_knots, w, fixed)
        cost_before = _robust_cost(rows.e, sigma, config.robust)

        accepted = False
        while True:
            try:
                delta = solve(system, lam)
            except SolverError as exc:
                lam *= 10.0
                log.debug("iteration %d: %s; lambda -> %g", it, exc, lam)
                if lam > config.lambda_max:
                    raise SolverError(f"iteration {it}: solver failed up to lambda={config.lambda_max:g}") from exc
                continue
            candidate = traj.apply_updates(delta)
            e_new = residuals(corr, candidate)
            cost_after = _robust_cost(e_new, sigma, config.robust)
            if cost_after <= cost_before:
                accepted = True
                lam = max(lam / 2.0, 1e-12) if lam > 0 else 0.0
                break
            lam = max(lam, 1e-12) * 10.0
            if lam > config.lambda_max:
                e_new, cost_after, delta = rows.e, cost_before, np.zeros_like(delta)
                lam = config.lambda_max
                break

        if accepted:
            traj = candidate
        max_update = float(np.max(np.linalg.norm(delta, axis=1)))
        report = IterationReport(
            it,
            _rms(rows.e),
            _rms(e_new),
            len(corr),
            max_update,
            lam,
            time.perf_counter() - t0,
            cost_before,
            cost_after,
            state.row_bound,
            scale,
            accepted,
            state.buffer_peak,
        )
        result.reports.append(report)
        log.info(
            "iter %3d  scale %.2f  corr %7d  rms %.6f -> %.6f  max_update %.3e  lambda %.1e  %.2fs",
            it, scale, len(corr), report.rms_before, report.rms_after, max_update, lam, report.wall_s,
        )
        if callback is not None:
            callback(report)
        if scale == 1.0 and (max_update < config.convergence_threshold or not accepted):
            result.converged = True
            break

    result.trajectory = traj
    return result
