"""Regionalized Gaussian-process lidar SLAM."""

from gpslam.config import PipelineConfig, SlamConfig, load_config
from gpslam.geometry import Direction, Pose
from gpslam.gp import KernelConfig, gp_predict, reconstruct_cell
from gpslam.grid import GridConfig, principled_downsample, regionalize
from gpslam.mapstore import GPMap, reconstruct_frame, update_map
from gpslam.pipeline import run_core, run_pipeline
from gpslam.registration import MatchConfig, align, match, register_scan

__version__ = "0.1.0"

__all__ = [
    "Direction", "GPMap", "GridConfig", "KernelConfig", "MatchConfig", "PipelineConfig", "Pose",
    "SlamConfig", "align", "gp_predict", "load_config", "match", "principled_downsample",
    "reconstruct_cell", "reconstruct_frame", "regionalize", "register_scan", "run_core",
    "run_pipeline", "update_map",
]
