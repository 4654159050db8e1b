"""Geometric sensor simulation for the ego vehicle.

A rotating ray-cast LiDAR samples the scene as oriented 3D vehicle boxes plus
the ground plane; received intensity follows I = I0 * exp(-a * d). The camera
is an ideal pinhole that produces depth and instance-id rasters plus
occlusion-aware 2D ground-truth boxes (a vehicle enters the ground truth iff
at least one of its pixels survives the per-pixel depth test). There is no
photorealistic rendering; lighting only parameterizes the detector model.

Image convention: origin top-left, u right, v down, pixel (r, c) sampled at
its center (c + 0.5, r + 0.5). Camera frame: x right, y down, z forward.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .road import RoadNetwork, WorldPose, frenet_to_world

# Rays/corners closer than this to the camera plane are treated as behind it.
Z_NEAR = 0.05
_T_EPS = 1e-9


def point_intensity(i0: float, a: float, d: float) -> float:
    """Received LiDAR intensity at distance d: I = I0 * exp(-a * d)."""
    if i0 <= 0:
        raise ConfigError("emitted intensity I0 must be > 0")
    if a < 0 or d < 0:
        raise ConfigError("attenuation and distance must be >= 0")
    return i0 * math.exp(-a * d)


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 32
    vertical_fov: tuple = (-25.0, 5.0)  # degrees, (min, max)
    horizontal_step: float = 0.36       # degrees per azimuth column
    rotation_rate: float = 10.0         # Hz
    max_range: float = 100.0
    i0: float = 1.0
    attenuation: float = 0.004          # 1/m
    mount_height: float = 1.8

    def validate(self):
        if self.channels < 1:
            raise ConfigError("lidar channels must be >= 1")
        if not self.vertical_fov[0] < self.vertical_fov[1]:
            raise ConfigError("lidar vertical_fov needs min < max")
        if not 0 < self.horizontal_step <= 360:
            raise ConfigError("lidar horizontal_step must be in (0, 360]")
        if self.max_range <= 0:
            raise ConfigError("lidar max_range must be > 0")
        if self.attenuation < 0:
            raise ConfigError("lidar attenuation must be >= 0")
        if self.i0 <= 0:
            raise ConfigError("lidar I0 must be > 0")


@dataclass(frozen=True)
class CameraConfig:
    width: int = 800
    height: int = 600
    horizontal_fov: float = 90.0   # degrees
    mount_forward: float = None    # None: front bumper (ego length / 2)
    mount_lateral: float = 0.0
    mount_height: float = 1.5
    min_box_area: float = 25.0     # px^2, ground-truth floor

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("camera size must be >= 1 px")
        if not 0 < self.horizontal_fov < 180:
            raise ConfigError("camera fov must be in (0, 180) degrees")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.horizontal_fov) / 2.0)


@dataclass(frozen=True)
class SceneryCondition:
    """Lighting tag plus the detector degradation it induces.

    Miss probability grows linearly with (estimated) distance:
    p_miss(d) = clamp(miss_base + miss_gain * d / 100, 0, 1). jitter_px is the
    per-coordinate Gaussian sigma applied to detected corners of a box
    jitter_ref_height pixels tall, scaled proportionally for other sizes
    (localization error tracks object scale, as it does for learned
    detectors). fp_rate is the Poisson mean of spurious boxes per frame.
    dist_ref converts a box pixel height into the distance estimate
    dist_ref / height_px (calibrated for a 1.5 m tall target through the
    default camera).
    """
    lighting: str = "morning"
    miss_base: float = 0.05
    miss_gain: float = 0.25
    jitter_px: float = 2.0
    fp_rate: float = 0.1
    dist_ref: float = 600.0
    jitter_ref_height: float = 60.0

    def validate(self):
        if not 0 <= self.miss_base <= 1:
            raise ConfigError("miss_base must be in [0, 1]")
        if self.jitter_px < 0 or self.fp_rate < 0:
            raise ConfigError("jitter and fp_rate must be >= 0")
        if self.jitter_ref_height <= 0:
            raise ConfigError("jitter_ref_height must be > 0")

    @classmethod
    def morning(cls) -> "SceneryCondition":
        return cls("morning", 0.05, 0.25, 2.0, 0.1)

    @classmethod
    def night(cls) -> "SceneryCondition":
        return cls("night", 0.25, 0.55, 5.0, 0.15)

    @classmethod
    def noiseless(cls, lighting: str = "morning") -> "SceneryCondition":
        """Detector passthrough: detections equal the ground truth."""
        return cls(lighting, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def preset(cls, name: str) -> "SceneryCondition":
        try:
            return {"morning": cls.morning, "night": cls.night,
                    "noiseless": cls.noiseless}[name]()
        except KeyError:
            raise ConfigError(f"unknown scenery condition {name!r}") from None

    def miss_probability(self, distance: float) -> float:
        return min(max(self.miss_base + self.miss_gain * distance / 100.0, 0.0), 1.0)


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ConfigError("bbox min corner must not exceed max corner")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains_point(self, u: float, v: float) -> bool:
        return self.x_min <= u <= self.x_max and self.y_min <= v <= self.y_max


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    intensity: float
    channel: int
    hit_vehicle_id: int = None  # None for ground hits


class LidarScan:
    """Array-backed point cloud behaving as a sequence of LidarPoint.

    Points are ordered channel-major, then azimuth, sensor frame (x forward,
    y left, z up).
    """

    def __init__(self, xyz, intensity, channel, hit_id):
        self.xyz = xyz
        self.intensity = intensity
        self.channel = channel
        self.hit_id = hit_id  # -1 marks a ground hit

    def __len__(self):
        return len(self.xyz)

    def __getitem__(self, i) -> LidarPoint:
        hid = int(self.hit_id[i])
        return LidarPoint(float(self.xyz[i, 0]), float(self.xyz[i, 1]),
                          float(self.xyz[i, 2]), float(self.intensity[i]),
                          int(self.channel[i]), None if hid < 0 else hid)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def distances(self):
        return np.linalg.norm(self.xyz, axis=1)


@dataclass
class SensorFrame:
    frame_id: int
    time: float
    points: LidarScan
    depth: np.ndarray      # (H, W) float32, meters, inf = sky
    instance: np.ndarray   # (H, W) int32, 0 = background, else vehicle id
    gt_boxes: list         # [(vehicle_id, BBox2D)], ascending id
    scenario: str = "morning"


# -- oriented boxes and ray casting ------------------------------------------

@dataclass(frozen=True)
class Obb3:
    """Oriented box, yaw about world z only (vehicles stay on the ground)."""
    center: np.ndarray  # (3,)
    yaw: float
    half: np.ndarray    # (3,) half extents (length, width, height)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ax = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        signs = np.array([[sx, sy, sz]
                          for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=float)
        return self.center + (signs * self.half) @ ax

    def surface_residual(self, pts) -> np.ndarray:
        """max_i(|p_local_i| - half_i): 0 on the surface, <0 inside."""
        pts = np.atleast_2d(pts)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rel = pts - self.center
        local = np.stack([c * rel[:, 0] + s * rel[:, 1],
                          -s * rel[:, 0] + c * rel[:, 1],
                          rel[:, 2]], axis=1)
        return (np.abs(local) - self.half).max(axis=1)


def vehicle_obb(net: RoadNetwork, veh) -> Obb3:
    pose = frenet_to_world(net, veh.pose)
    return Obb3(np.array([pose.x, pose.y, veh.height / 2.0]), pose.heading,
                np.array([veh.length / 2.0, veh.width / 2.0, veh.height / 2.0]))


def ray_box_t(origin: np.ndarray, dirs: np.ndarray, box: Obb3) -> np.ndarray:
    """Slab-method ray/box intersection distances for unit-length dirs (N, 3).

    Returns the smallest positive hit parameter per ray (entry point, or exit
    point when the origin is inside the box), inf on a miss.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = origin - box.center
    o = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
    d = np.empty_like(dirs)
    d[:, 0] = c * dirs[:, 0] + s * dirs[:, 1]
    d[:, 1] = -s * dirs[:, 0] + c * dirs[:, 1]
    d[:, 2] = dirs[:, 2]

    tmin = np.full(len(dirs), -np.inf)
    tmax = np.full(len(dirs), np.inf)
    for k in range(3):
        dk = d[:, k]
        parallel = np.abs(dk) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-box.half[k] - o[k]) / dk
            t2 = (box.half[k] - o[k]) / dk
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        inside = np.abs(o[k]) <= box.half[k]
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)

    t = np.where(tmin > _T_EPS, tmin, tmax)
    miss = (tmax < tmin) | (t <= _T_EPS)
    return np.where(miss, np.inf, t)


def _lidar_dirs(cfg: LidarConfig, heading: float):
    """World-frame unit directions, shape (channels * columns, 3),
    channel-major then azimuth; plus the matching channel index array."""
    elev = np.radians(np.linspace(cfg.vertical_fov[0], cfg.vertical_fov[1],
                                  cfg.channels))
    n_az = int(math.ceil(360.0 / cfg.horizontal_step))
    az = np.radians(np.arange(n_az) * cfg.horizontal_step) + heading
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(az), np.sin(az)
    dirs = np.empty((cfg.channels, n_az, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None] * np.ones_like(ca)[None, :]
    channel_idx = np.repeat(np.arange(cfg.channels), n_az)
    return dirs.reshape(-1, 3), channel_idx


def cast_lidar(state, net: RoadNetwork, cfg: LidarConfig, sensor_pose: WorldPose,
               sensor_height: float, exclude_id: int = None) -> LidarScan:
    """One full revolution of the rotating LiDAR from the given pose.

    One ray per (channel, azimuth column); each ray is intersected against
    every vehicle box and the ground plane, and the nearest hit within
    max_range becomes a point with intensity I0 * exp(-a * d). Output order
    is channel-major then azimuth.
    """
    cfg.validate()
    origin = np.array([sensor_pose.x, sensor_pose.y, sensor_height])
    dirs, channel_idx = _lidar_dirs(cfg, sensor_pose.heading)
    hit_id = np.full(len(dirs), -1, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
    t_best = np.where(t_ground > _T_EPS, t_ground, np.inf)

    for veh in state.vehicles:
        if exclude_id is not None and veh.id == exclude_id:
            continue
        box = vehicle_obb(net, veh)
        reach = np.linalg.norm(box.center - origin) - np.linalg.norm(box.half)
        if reach > cfg.max_range:
            continue
        t = ray_box_t(origin, dirs, box)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        hit_id = np.where(closer, veh.id, hit_id)

    mask = t_best <= cfg.max_range
    t = t_best[mask]
    pts_world = origin + t[:, None] * dirs[mask]
    rel = pts_world - origin
    ch, sh = math.cos(sensor_pose.heading), math.sin(sensor_pose.heading)
    xyz = np.stack([ch * rel[:, 0] + sh * rel[:, 1],
                    -sh * rel[:, 0] + ch * rel[:, 1],
                    rel[:, 2]], axis=1)
    intensity = cfg.i0 * np.exp(-cfg.attenuation * t)
    return LidarScan(xyz, intensity, channel_idx[mask], hit_id[mask])


# -- pinhole camera ------------------------------------------------------------

def _camera_rotation(heading: float) -> np.ndarray:
    """World -> camera rotation; rows are the camera axes in world coords."""
    c, s = math.cos(heading), math.sin(heading)
    return np.array([
        [s, -c, 0.0],   # x: image right
        [0.0, 0.0, -1.0],  # y: image down
        [c, s, 0.0],    # z: optical axis
    ])


def camera_world_pose(cam: CameraConfig, net: RoadNetwork, ego):
    """Camera origin (3,) and heading for a camera mounted on the ego."""
    pose = frenet_to_world(net, ego.pose)
    forward = cam.mount_forward if cam.mount_forward is not None else ego.length / 2.0
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    origin = np.array([
        pose.x + forward * c - cam.mount_lateral * s,
        pose.y + forward * s + cam.mount_lateral * c,
        cam.mount_height,
    ])
    return origin, pose.heading


_BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
              if bin(a ^ b).count("1") == 1]


def _project_hull(cam: CameraConfig, cam_origin, cam_heading: float, box: Obb3):
    """Projected pixel coordinates (u, v arrays) of the box's visible hull.

    The hull points are the corners in front of the near plane plus the
    near-plane crossings of box edges; returns None when the whole box is
    behind the camera.
    """
    rot = _camera_rotation(cam_heading)
    corners_cam = (box.corners() - np.asarray(cam_origin)) @ rot.T
    pts = [p for p in corners_cam if p[2] >= Z_NEAR]
    if not pts:
        return None
    for a, b in _BOX_EDGES:
        za, zb = corners_cam[a, 2], corners_cam[b, 2]
        if (za < Z_NEAR) != (zb < Z_NEAR):
            w = (Z_NEAR - za) / (zb - za)
            pts.append(corners_cam[a] + w * (corners_cam[b] - corners_cam[a]))
    pts = np.asarray(pts)
    f = cam.focal
    u = cam.width / 2.0 + f * pts[:, 0] / pts[:, 2]
    v = cam.height / 2.0 + f * pts[:, 1] / pts[:, 2]
    return u, v


def project_bbox(cam: CameraConfig, cam_origin, cam_heading: float, box: Obb3):
    """Axis-aligned image hull of an oriented box through the pinhole model.

    Projects with focal (width/2)/tan(fov/2) and clips to the image. Returns
    None when nothing lies in front of the camera or the clipped area falls
    below min_box_area.
    """
    cam.validate()
    hull = _project_hull(cam, cam_origin, cam_heading, box)
    if hull is None:
        return None
    u, v = hull
    x_min = max(float(u.min()), 0.0)
    x_max = min(float(u.max()), float(cam.width))
    y_min = max(float(v.min()), 0.0)
    y_max = min(float(v.max()), float(cam.height))
    if x_min >= x_max or y_min >= y_max:
        return None
    bbox = BBox2D(x_min, y_min, x_max, y_max)
    if bbox.area < cam.min_box_area:
        return None
    return bbox


_DIR_CACHE = {}


def _pixel_dirs(cam: CameraConfig) -> np.ndarray:
    """Unit ray directions through every pixel center, camera frame, (H, W, 3)."""
    key = (cam.width, cam.height, cam.horizontal_fov)
    if key not in _DIR_CACHE:
        f = cam.focal
        us = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
        vs = (np.arange(cam.height) + 0.5 - cam.height / 2.0) / f
        d = np.empty((cam.height, cam.width, 3))
        d[:, :, 0] = us[None, :]
        d[:, :, 1] = vs[:, None]
        d[:, :, 2] = 1.0
        d /= np.linalg.norm(d, axis=2, keepdims=True)
        _DIR_CACHE[key] = d
    return _DIR_CACHE[key]


def render_frame(state, net: RoadNetwork, cam: CameraConfig, lidar: LidarConfig,
                 ego_id: int, condition: SceneryCondition, frame_id: int = 0) -> SensorFrame:
    """Full sensor frame: LiDAR sweep, depth + instance rasters, ground truth.

    The rasters come from per-pixel ray casting through the pinhole model
    (nearest vehicle hit wins; ground fills the rest); gt_boxes holds a
    projected box for every vehicle with at least one surviving raster pixel.
    """
    ego = state.vehicle(ego_id)
    cam_origin, cam_heading = camera_world_pose(cam, net, ego)
    ego_world = frenet_to_world(net, ego.pose)

    scan = cast_lidar(state, net, lidar,
                      WorldPose(ego_world.x, ego_world.y, ego_world.heading),
                      lidar.mount_height, exclude_id=ego_id)

    rot = _camera_rotation(cam_heading)
    dirs_cam = _pixel_dirs(cam)
    dir_down = dirs_cam[:, :, 1]
    with np.errstate(divide="ignore"):
        depth = np.where(dir_down > 0, cam.mount_height / dir_down, np.inf)
    depth = depth.astype(np.float64)
    instance = np.zeros((cam.height, cam.width), dtype=np.int32)

    dirs_world = None  # lazily rotated pixel-ray grid, world frame
    for veh in state.vehicles:
        if veh.id == ego_id:
            continue
        box = vehicle_obb(net, veh)
        roi = _projected_roi(cam, cam_origin, cam_heading, box)
        if roi is None:
            continue
        r0, r1, c0, c1 = roi
        if dirs_world is None:
            dirs_world = (dirs_cam.reshape(-1, 3) @ rot).reshape(
                cam.height, cam.width, 3)
        sub = dirs_world[r0:r1, c0:c1].reshape(-1, 3)
        t = ray_box_t(cam_origin, sub, box).reshape(r1 - r0, c1 - c0)
        closer = t < depth[r0:r1, c0:c1]
        depth[r0:r1, c0:c1] = np.where(closer, t, depth[r0:r1, c0:c1])
        instance[r0:r1, c0:c1] = np.where(closer, veh.id, instance[r0:r1, c0:c1])

    visible = np.unique(instance)
    gt_boxes = []
    for vid in visible:
        if vid <= 0:
            continue
        veh = state.vehicle(int(vid))
        bbox = project_bbox(cam, cam_origin, cam_heading, vehicle_obb(net, veh))
        if bbox is not None:
            gt_boxes.append((int(vid), bbox))
    gt_boxes.sort(key=lambda item: item[0])

    return SensorFrame(frame_id, state.time, scan, depth.astype(np.float32),
                       instance, gt_boxes, condition.lighting)


def _projected_roi(cam: CameraConfig, cam_origin, cam_heading, box: Obb3):
    """Pixel rectangle (r0, r1, c0, c1) covering the box projection, or None."""
    hull = _project_hull(cam, cam_origin, cam_heading, box)
    if hull is None:
        return None
    u, v = hull
    c0 = max(int(math.floor(u.min())), 0)
    c1 = min(int(math.ceil(u.max())) + 1, cam.width)
    r0 = max(int(math.floor(v.min())), 0)
    r1 = min(int(math.ceil(v.max())) + 1, cam.height)
    if r0 >= r1 or c0 >= c1:
        return None
    return r0, r1, c0, c1


def frame_consistency_errors(frame: SensorFrame) -> list:
    """Violations of the ground-truth/raster contract, empty when consistent.

    Every gt box must enclose all pixel centers carrying its instance id, and
    must own at least one such pixel (the visibility rule).
    """
    errors = []
    for vid, bbox in frame.gt_boxes:
        rows, cols = np.nonzero(frame.instance == vid)
        if len(rows) == 0:
            errors.append(f"gt box for vehicle {vid} has no raster pixels")
            continue
        u, v = cols + 0.5, rows + 0.5
        bad = ((u < bbox.x_min) | (u > bbox.x_max)
               | (v < bbox.y_min) | (v > bbox.y_max))
        if bad.any():
            errors.append(f"vehicle {vid}: {int(bad.sum())} raster pixels "
                          f"outside its gt box")
    return errors
