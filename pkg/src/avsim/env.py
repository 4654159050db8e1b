"""Episode-based environment: reset builds a scenario, step applies ego
accelerations and returns road-aligned observations plus sensor frames.

The ego is exempt from car following (externally controlled); background
vehicles treat it as a normal leader. Episodes are deterministic given
(config, action sequence): the demand stream also picks the random ego, and
reset fast-forwards background traffic until the ego has entered the road.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProtocolError
from .rng import DEMAND_STREAM, Pcg32
from .road import (RoadNetwork, frenet_to_world, resolve_network,
                   world_to_frenet_batch)
from .sensors import CameraConfig, LidarConfig, SceneryCondition, render_frame
from .traffic import (DemandConfig, _bg_acceleration, _lane_buckets,
                      load_demand, make_traffic_state, sample_demand,
                      step_traffic)

ENV_FORMAT = "avsim-env/1"

TERMINATED_COLLISION = "collision"
TERMINATED_OFF_ROAD = "off_road"
TERMINATED_ROUTE_COMPLETE = "route_complete"
TERMINATED_MAX_STEPS = "max_steps"

# Longest reset fast-forward past the ego's depart time before giving up (s).
_MAX_WARMUP_OVERRUN = 120.0


@dataclass(frozen=True)
class Action:
    a_long: float = 0.0  # m/s^2
    a_lat: float = 0.0   # m/s^2

    def __post_init__(self):
        if not (math.isfinite(self.a_long) and math.isfinite(self.a_lat)):
            raise ConfigError("action accelerations must be finite")

    def clamped(self, max_long: float, max_lat: float) -> "Action":
        return Action(min(max(self.a_long, -max_long), max_long),
                      min(max(self.a_lat, -max_lat), max_lat))


@dataclass(frozen=True)
class NeighborFeature:
    rel_s: float
    rel_d: float
    v: float
    lane: int
    present: bool = True

    @classmethod
    def absent(cls) -> "NeighborFeature":
        return cls(0.0, 0.0, 0.0, 0, False)


@dataclass(frozen=True)
class EgoFeature:
    s: float
    d: float
    v: float
    lane: int


@dataclass(frozen=True)
class Observation:
    ego: EgoFeature
    neighbors: tuple      # exactly K NeighborFeature entries, nearest first
    sensor_frame: object = None


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    terminated: bool
    reason: str = None
    info: dict = field(default_factory=dict)


@dataclass
class EnvConfig:
    network: str = "highway"
    demand: DemandConfig = field(default_factory=DemandConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    condition: SceneryCondition = field(default_factory=SceneryCondition.morning)
    dt: float = 0.1
    max_steps: int = 1000
    ego: object = "random"         # "random" or a vehicle id
    seed: int = 0
    sensor_every: int = 1          # render a frame every N steps (0 = never)
    enable_sensors: bool = True
    k_neighbors: int = 8
    neighbor_range: float = 100.0
    a_long_max: float = 5.0
    a_lat_max: float = 3.0
    end_on_route_complete: bool = False
    allow_lane_changes: bool = True

    def validate(self):
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.k_neighbors < 0:
            raise ConfigError("k_neighbors must be >= 0")
        if self.sensor_every < 0:
            raise ConfigError("sensor_every must be >= 0")
        self.demand.validate()
        self.camera.validate()
        self.lidar.validate()
        self.condition.validate()

    def to_dict(self) -> dict:
        return {
            "format": ENV_FORMAT,
            "network": self.network,
            "demand": self.demand.to_dict(),
            "camera": {
                "width": self.camera.width, "height": self.camera.height,
                "horizontal_fov": self.camera.horizontal_fov,
                "mount_forward": self.camera.mount_forward,
                "mount_lateral": self.camera.mount_lateral,
                "mount_height": self.camera.mount_height,
                "min_box_area": self.camera.min_box_area,
            },
            "lidar": {
                "channels": self.lidar.channels,
                "vertical_fov": list(self.lidar.vertical_fov),
                "horizontal_step": self.lidar.horizontal_step,
                "rotation_rate": self.lidar.rotation_rate,
                "max_range": self.lidar.max_range,
                "i0": self.lidar.i0,
                "attenuation": self.lidar.attenuation,
                "mount_height": self.lidar.mount_height,
            },
            "condition": {
                "lighting": self.condition.lighting,
                "miss_base": self.condition.miss_base,
                "miss_gain": self.condition.miss_gain,
                "jitter_px": self.condition.jitter_px,
                "fp_rate": self.condition.fp_rate,
                "dist_ref": self.condition.dist_ref,
                "jitter_ref_height": self.condition.jitter_ref_height,
            },
            "dt": self.dt,
            "max_steps": self.max_steps,
            "ego": self.ego,
            "seed": self.seed,
            "sensor_every": self.sensor_every,
            "enable_sensors": self.enable_sensors,
            "k_neighbors": self.k_neighbors,
            "neighbor_range": self.neighbor_range,
            "a_long_max": self.a_long_max,
            "a_lat_max": self.a_lat_max,
            "end_on_route_complete": self.end_on_route_complete,
            "allow_lane_changes": self.allow_lane_changes,
        }

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "EnvConfig":
        if doc.get("format") != ENV_FORMAT:
            raise ConfigError(f"unsupported env format {doc.get('format')!r}, "
                              f"expected {ENV_FORMAT!r}")
        demand_doc = doc.get("demand", {})
        if isinstance(demand_doc, str):
            p = Path(demand_doc)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            demand = load_demand(p)
        else:
            demand = DemandConfig.from_dict(demand_doc)
        cam_doc = doc.get("camera", {})
        camera = CameraConfig(
            int(cam_doc.get("width", 800)), int(cam_doc.get("height", 600)),
            float(cam_doc.get("horizontal_fov", 90.0)),
            cam_doc.get("mount_forward"),
            float(cam_doc.get("mount_lateral", 0.0)),
            float(cam_doc.get("mount_height", 1.5)),
            float(cam_doc.get("min_box_area", 25.0)))
        lid_doc = doc.get("lidar", {})
        lidar = LidarConfig(
            int(lid_doc.get("channels", 32)),
            tuple(lid_doc.get("vertical_fov", (-25.0, 5.0))),
            float(lid_doc.get("horizontal_step", 0.36)),
            float(lid_doc.get("rotation_rate", 10.0)),
            float(lid_doc.get("max_range", 100.0)),
            float(lid_doc.get("i0", 1.0)),
            float(lid_doc.get("attenuation", 0.004)),
            float(lid_doc.get("mount_height", 1.8)))
        cond_doc = doc.get("condition", None)
        if cond_doc is None:
            condition = SceneryCondition.morning()
        elif isinstance(cond_doc, str):
            condition = SceneryCondition.preset(cond_doc)
        else:
            condition = SceneryCondition(
                cond_doc.get("lighting", "morning"),
                float(cond_doc.get("miss_base", 0.05)),
                float(cond_doc.get("miss_gain", 0.25)),
                float(cond_doc.get("jitter_px", 2.0)),
                float(cond_doc.get("fp_rate", 0.1)),
                float(cond_doc.get("dist_ref", 600.0)),
                float(cond_doc.get("jitter_ref_height", 60.0)))
        cfg = cls(
            network=doc.get("network", "highway"),
            demand=demand, camera=camera, lidar=lidar, condition=condition,
            dt=float(doc.get("dt", 0.1)),
            max_steps=int(doc.get("max_steps", 1000)),
            ego=doc.get("ego", "random"),
            seed=int(doc.get("seed", 0)),
            sensor_every=int(doc.get("sensor_every", 1)),
            enable_sensors=bool(doc.get("enable_sensors", True)),
            k_neighbors=int(doc.get("k_neighbors", 8)),
            neighbor_range=float(doc.get("neighbor_range", 100.0)),
            a_long_max=float(doc.get("a_long_max", 5.0)),
            a_lat_max=float(doc.get("a_lat_max", 3.0)),
            end_on_route_complete=bool(doc.get("end_on_route_complete", False)),
            allow_lane_changes=bool(doc.get("allow_lane_changes", True)))
        cfg.validate()
        return cfg


def load_env_config(path) -> EnvConfig:
    p = Path(path)
    try:
        with open(p, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read env config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"env config {path} is not valid JSON: {exc}") from exc
    return EnvConfig.from_dict(doc, base_dir=p.parent)


class Environment:
    """One episode at a time; reset/step/observe must be called sequentially."""

    def __init__(self, cfg: EnvConfig, net: RoadNetwork = None):
        cfg.validate()
        self.cfg = cfg
        self.net = net if net is not None else resolve_network(cfg.network)
        self.state = None
        self.ego_id = None
        self.step_index = 0
        self.frame_count = 0
        self.terminated = False
        self.reason = None
        self._obs = None
        self._records = []
        self._ego_distance = 0.0
        self._last_ds = 0.0

    # -- lifecycle ---------------------------------------------------------

    def reset(self) -> Observation:
        cfg = self.cfg
        rng = Pcg32(cfg.seed, DEMAND_STREAM)
        demand = replace(cfg.demand, seed=cfg.seed)
        vehicles = sample_demand(demand, self.net, rng)
        if cfg.ego == "random":
            if not vehicles:
                raise ConfigError("random ego selection needs a non-empty demand")
            ego = vehicles[rng.randrange(len(vehicles))]
        else:
            matches = [v for v in vehicles if v.id == cfg.ego]
            if not matches:
                raise ConfigError(f"ego vehicle id {cfg.ego!r} not in demand")
            ego = matches[0]
        ego.is_ego = True
        self.ego_id = ego.id

        state = make_traffic_state(vehicles, self.net, 0.0)
        deadline = ego.depart_time + _MAX_WARMUP_OVERRUN
        while not state.has_vehicle(self.ego_id):
            if state.time > deadline:
                raise ConfigError(
                    f"ego vehicle {self.ego_id} could not enter the road "
                    f"within {_MAX_WARMUP_OVERRUN} s of its depart time")
            state = step_traffic(state, self.net, cfg.dt, None,
                                 cfg.allow_lane_changes)
        self.state = state
        self.step_index = 0
        self.frame_count = 0
        self.terminated = False
        self.reason = None
        self._records = []
        self._ego_distance = 0.0
        self._last_ds = 0.0
        self._obs = self._build_observation(render=cfg.enable_sensors
                                            and cfg.sensor_every > 0)
        return self._obs

    def step(self, action: Action) -> StepResult:
        if self.state is None:
            raise ProtocolError("step called before reset")
        if self.terminated:
            raise ProtocolError("step called on a terminated episode")
        cfg = self.cfg
        act = action.clamped(cfg.a_long_max, cfg.a_lat_max)

        ego_before = self.state.vehicle(self.ego_id)
        s_before = ego_before.pose.s
        self.state = step_traffic(self.state, self.net, cfg.dt,
                                  (act.a_long, act.a_lat),
                                  cfg.allow_lane_changes)
        self.step_index += 1

        ego = None
        if self.state.has_vehicle(self.ego_id):
            ego = self.state.vehicle(self.ego_id)
            path = self.net.path(ego.pose.route_id)
            ds = ego.pose.s - s_before
            if path.closed:
                ds %= path.length
            self._ego_distance += ds
            self._last_ds = ds

        reason = self._check_termination(ego)
        self.terminated = reason is not None
        self.reason = reason

        render = (cfg.enable_sensors and cfg.sensor_every > 0 and ego is not None
                  and self.step_index % cfg.sensor_every == 0)
        self._obs = self._build_observation(render=render) if ego is not None \
            else self._obs
        result = StepResult(self._obs, self.terminated, reason, {
            "time": self.state.time,
            "collision_pairs": list(self.state.collisions),
            "ego_ds": self._last_ds,
        })
        self._records.append(episode_record(self.step_index, act, ego,
                                            self.terminated, reason,
                                            self.state.collisions))
        return result

    def observe(self) -> Observation:
        if self.state is None:
            raise ProtocolError("observe called before reset")
        return self._obs

    def episode_records(self) -> list:
        """JSON-serializable per-step records (the episode log contract)."""
        return list(self._records)

    # -- internals -----------------------------------------------------------

    def _check_termination(self, ego):
        cfg = self.cfg
        if ego is None:
            return TERMINATED_ROUTE_COMPLETE  # removed at an open route end
        ego_pairs = [p for p in self.state.collisions if self.ego_id in p]
        if ego_pairs:
            return TERMINATED_COLLISION
        if abs(ego.pose.d) > self.net.half_width(ego.pose.route_id, ego.pose.s):
            return TERMINATED_OFF_ROAD
        path = self.net.path(ego.pose.route_id)
        if cfg.end_on_route_complete and path.closed \
                and self._ego_distance >= path.length:
            return TERMINATED_ROUTE_COMPLETE
        if self.step_index >= cfg.max_steps:
            return TERMINATED_MAX_STEPS
        return None

    def _build_observation(self, render: bool) -> Observation:
        ego = self.state.vehicle(self.ego_id)
        ego_feat = EgoFeature(ego.pose.s, ego.pose.d, ego.v, ego.pose.lane_index)
        neighbors = self._neighbor_features(ego)
        frame = None
        if render:
            frame = render_frame(self.state, self.net, self.cfg.camera,
                                 self.cfg.lidar, self.ego_id,
                                 self.cfg.condition, self.frame_count)
            self.frame_count += 1
        return Observation(ego_feat, tuple(neighbors), frame)

    def _neighbor_features(self, ego):
        cfg = self.cfg
        path = self.net.path(ego.pose.route_id)
        found = []
        for veh in self.state.vehicles:
            if veh.id == ego.id:
                continue
            if veh.pose.route_id == ego.pose.route_id:
                s_other, d_other = veh.pose.s, veh.pose.d
                lane = veh.pose.lane_index
            else:
                pose = self._world_xy(veh)
                s_arr, d_arr, ok = world_to_frenet_batch(
                    self.net, ego.pose.route_id, np.array([pose]),
                    max_offset=self.net.half_width(ego.pose.route_id,
                                                   ego.pose.s) + 5.0)
                if not ok[0]:
                    continue
                s_other, d_other = float(s_arr[0]), float(d_arr[0])
                lane = self.net.lane_index(ego.pose.route_id, s_other, d_other)
            rel_s = s_other - ego.pose.s
            if path.closed:
                rel_s = (rel_s + path.length / 2.0) % path.length - path.length / 2.0
            if abs(rel_s) > cfg.neighbor_range:
                continue
            found.append((abs(rel_s), veh.id,
                          NeighborFeature(rel_s, d_other - ego.pose.d, veh.v,
                                          lane)))
        found.sort(key=lambda item: (item[0], item[1]))
        feats = [item[2] for item in found[:cfg.k_neighbors]]
        while len(feats) < cfg.k_neighbors:
            feats.append(NeighborFeature.absent())
        return feats

    def _world_xy(self, veh):
        pose = frenet_to_world(self.net, veh.pose)
        return (pose.x, pose.y)


def episode_record(step: int, action: Action, ego, terminated: bool,
                   reason, collisions) -> dict:
    """One episode-log record; key order is part of the wire format."""
    return {
        "step": step,
        "action": [action.a_long, action.a_lat],
        "ego": ({"s": ego.pose.s, "d": ego.pose.d, "v": ego.v}
                if ego is not None else None),
        "terminated": terminated,
        "reason": reason,
        "collision_pairs": [list(p) for p in collisions],
    }


def default_ego_policy(env: Environment) -> Action:
    """IDM-driven ego: follow the lane leader with the ego's own parameters."""
    ego = env.state.vehicle(env.ego_id)
    buckets = _lane_buckets(env.state.vehicles)
    a_long = _bg_acceleration(ego, env.state, env.net, buckets)
    return Action(a_long, 0.0)
