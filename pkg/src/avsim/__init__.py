"""avsim: deterministic traffic and sensor simulation for AV perception testing."""

__version__ = "0.1.0"

from .env import (Action, EnvConfig, Environment, Observation, StepResult,
                  default_ego_policy, load_env_config)
from .errors import AvsimError
from .evaluation import (ConfusionCounts, Detection, EvalReport, MatchResult,
                         classify, iou, match_detections, precision, recall,
                         run_experiment, sweep_thresholds, synthetic_detect)
from .road import (FrenetPose, RoadNetwork, WorldPose, builtin_networks,
                   frenet_to_world, load_network, world_to_frenet)
from .sensors import (BBox2D, CameraConfig, LidarConfig, SceneryCondition,
                      SensorFrame, cast_lidar, point_intensity, project_bbox,
                      render_frame)
from .traffic import (DemandConfig, IdmParams, TrafficState, VehicleState,
                      detect_collisions, idm_acceleration, lane_change_decision,
                      sample_demand, step_traffic)

__all__ = [
    "__version__",
    "Action", "AvsimError", "BBox2D", "CameraConfig", "ConfusionCounts",
    "DemandConfig", "Detection", "EnvConfig", "EvalReport", "Environment",
    "FrenetPose", "IdmParams", "LidarConfig", "MatchResult", "Observation",
    "RoadNetwork", "SceneryCondition", "SensorFrame", "StepResult",
    "TrafficState", "VehicleState", "WorldPose",
    "builtin_networks", "cast_lidar", "classify", "default_ego_policy",
    "detect_collisions", "frenet_to_world", "idm_acceleration", "iou",
    "lane_change_decision", "load_env_config", "load_network",
    "match_detections", "point_intensity", "precision", "project_bbox",
    "recall", "render_frame", "run_experiment", "sample_demand",
    "step_traffic", "sweep_thresholds", "synthetic_detect",
    "world_to_frenet",
]
