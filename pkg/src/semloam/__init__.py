"""Semantic LiDAR odometry and mapping with class-restricted matching and
motion-based outlier rejection."""

from .config import PipelineConfig, RunConfig, load_config
from .core import RigidTransform, SurfaceKind, SurfaceModel, SurfaceType
from .errors import SemLoamError
from .estimation import estimate_transformation, orme, register, semantic_lidar_odometry
from .evaluation import skip_scans, trajectory_error
from .features import Keypoints, extract_keypoints
from .io_kitti import KittiSequence, LabeledScan
from .mapping import SemanticLoam, SemanticVoxelMap
from .matching import SemanticNnForest, assign_matches, fit_line, fit_plane

__version__ = "0.1.0"

__all__ = [
    "Keypoints", "KittiSequence", "LabeledScan", "PipelineConfig", "RigidTransform", "RunConfig",
    "SemLoamError", "SemanticLoam", "SemanticNnForest", "SemanticVoxelMap", "SurfaceKind", "SurfaceModel",
    "SurfaceType", "assign_matches", "estimate_transformation", "extract_keypoints", "fit_line", "fit_plane",
    "load_config", "orme", "register", "semantic_lidar_odometry", "skip_scans", "trajectory_error",
]
