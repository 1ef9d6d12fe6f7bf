"""Perturb a synthetic trajectory, refine it, and compare against ground truth.

Run from the repository root:

    python3 demos/synthetic_walkthrough.py [n_scans]

Takes about a minute for the default 50 scans.
"""

import logging
import sys
import time

from ctba.correspondence import AssociationConfig
from ctba.evaluation import evaluate
from ctba.optimizer import OptimizerConfig, optimize
from ctba.pointcloud import preprocess_scan
from ctba.storage import MemoryScans
from ctba.synthetic import SceneParams, SessionParams, generate_scene, perturb_trajectory


def main(n_scans: int = 50) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    scene = generate_scene(SceneParams(sessions=(SessionParams(n_scans=n_scans),)), seed=0)
    print(f"{len(scene.scans)} scans, {sum(len(s) for s in scene.scans)} raw points")

    # normals first, then a 15 cm grid; curved or noisy patches lose their normal
    scans = MemoryScans([preprocess_scan(s, 0.15, 30, max_curvature=0.002) for s in scene.scans])
    init = perturb_trajectory(scene.gt, 0.5, 2.0, seed=1)
    print("initial :", evaluate(init, scene.gt))

    assoc = AssociationConfig(
        max_normal_angle_deg=30.0,
        deskewed_normals=True,
        max_curvature=0.002,
        max_plane_rms=1e-3,
        resample_every_iteration=False,
    )
    # start with an 8x wider search window and shrink it by 0.6 per iteration
    cfg = OptimizerConfig(max_iterations=30, search_scale=8.0, search_scale_decay=0.6)
    t0 = time.perf_counter()
    res = optimize(scans, init, cfg, assoc)
    print(f"{res.iterations} iterations in {time.perf_counter() - t0:.1f} s, converged={res.converged}")
    print("refined :", evaluate(res.trajectory, scene.gt))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 50)
