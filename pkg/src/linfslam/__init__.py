"""Keyframe SLAM built on rotation averaging and L-infinity known-rotation solves."""
from .exceptions import *  # noqa: F401,F403
from .geometry import CameraIntrinsics, KeyframePose, Rotation, project, residual_ratio
from .tracks import FeatureTrack, MapPoint, Observation, ObservationTable
from .graph import CovisibilityGraph, Edge
from .relmotion import RelMotionConfig, RelativeMotion, estimate_relative
from .rotavg import RotAvgConfig, irls_rotation_average, incremental_update
from .krot import GaugeConfig, build_krot, remove_support_set, solve_krot, triangulate_point_linf
from .tdc import build_tdc, solve_directions_only, solve_tdc
from .ba import BaConfig, bundle_adjust, run_ba_slam
from .pipeline import LoopEvent, PipelineConfig, compare_runtime, run_linf_slam
from .metrics import evaluate
from .synthetic import SceneParams, generate
from .estimators import KnownRotationSolver, RotationAveraging, SimilarityAligner, Triangulator

__version__ = "0.1.0"
