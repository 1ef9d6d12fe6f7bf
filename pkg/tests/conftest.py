import numpy as np
import pytest

from ctba.geometry import Trajectory, quat_exp
from ctba.pointcloud import Scan


def random_trajectory(rng, n_knots=6, sessions=None, rot_scale=1.0, trans_scale=2.0):
    """Knots with arbitrary rotations; one session unless ``sessions`` is given."""
    q = quat_exp(rng.normal(scale=rot_scale, size=(n_knots, 3)))
    t = rng.normal(scale=trans_scale, size=(n_knots, 3))
    ts = 0.1 * np.arange(n_knots)
    sid = np.zeros(n_knots, dtype=int) if sessions is None else np.asarray(sessions)
    ts = ts + 10.0 * sid
    return Trajectory(q, t, ts, sid)


def random_scan(rng, index=0, n=200, t_b=0.0, t_e=0.1, normals=True):
    pts = rng.uniform(-10, 10, size=(n, 3))
    times = np.sort(rng.uniform(t_b, t_e, size=n))
    nrm = None
    if normals:
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return Scan(index, pts, times, t_b, t_e, nrm)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
