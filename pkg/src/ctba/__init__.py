"""Continuous-time LiDAR bundle adjustment."""

from .config import ConfigError, RunConfig
from .correspondence import AssociationConfig, Correspondences, associate, rebuild_iteration_state, sample_candidates
from .evaluation import MetricReport, ate, evaluate, export_map, inter_rpe, rpe
from .geometry import Pose, PoseKnot, Trajectory, apply_update, compute_alpha, interpolate_pose, pose_at, transform_point
from .optimizer import OptimizerConfig, assemble, gm_weight, jacobians, linearize, optimize, residuals, solve, world_normals
from .pointcloud import Scan, VoxelHashMap, build_map, estimate_normals, grid_subsample, nearest_in_27, pca_normals, voxel_key
from .storage import MemoryScans, ScanStore, iteration_order, read_pose_file, read_scan, write_pose_file, write_scan

__version__ = "0.1.0"
