"""Microscopic traffic: IDM car following, sampled demand, fixed-step updates.

Background vehicles follow the Intelligent Driver Model toward their lane
leader; the ego (when present) applies externally supplied accelerations
exactly. Updates are synchronous and id-ordered, integration is semi-implicit
Euler with the speed clamped at zero, so a (network, demand, seed, action
sequence) tuple reproduces trajectories bit for bit.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateGapError, DemandError
from .rng import DEMAND_STREAM, Pcg32
from .road import FrenetPose, RoadNetwork, frenet_to_world

DEMAND_FORMAT = "avsim-demand/1"

# Braking applied when the model is handed a degenerate (collided) gap.
EMERGENCY_DECEL_FACTOR = 2.0
# Minimum acceleration advantage before a lane change is worth taking.
LANE_CHANGE_GAIN = 0.1
# Junction yield geometry (m).
JUNCTION_RADIUS = 8.0
JUNCTION_APPROACH = 30.0


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0     # desired speed, m/s
    T: float = 1.5       # desired time headway, s
    s0: float = 2.0      # jam distance, m
    a_max: float = 1.5   # maximum acceleration, m/s^2
    b: float = 2.0       # comfortable deceleration, m/s^2, positive
    delta: float = 4.0   # acceleration exponent

    def validate(self):
        for name in ("v0", "T", "s0", "a_max", "b", "delta"):
            if not getattr(self, name) > 0:
                raise DemandError(f"IDM parameter {name} must be > 0")
        if self.delta < 1:
            raise DemandError("IDM delta must be >= 1")


def idm_acceleration(v: float, s_gap, dv: float, p: IdmParams) -> float:
    """IDM acceleration for speed v, net gap s_gap, approach rate dv = v - v_leader.

    a = a_max * [1 - (v/v0)^delta - (s*/s_gap)^2]
    s* = s0 + max(0, v*T + v*dv / (2*sqrt(a_max*b)))

    Pass s_gap=None for a free road (no leader); that drops the interaction
    term. A non-positive gap with a leader raises DegenerateGapError, which
    callers treat as a collision in progress.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    if s_gap is None:
        return p.a_max * free
    if s_gap <= 0.0:
        raise DegenerateGapError(f"gap {s_gap:.3f} m is not positive")
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    return p.a_max * (free - (s_star / s_gap) ** 2)


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Net gap at which IDM holds speed v exactly (requires v < v0)."""
    if not 0.0 <= v < p.v0:
        raise ValueError("equilibrium exists only for 0 <= v < v0")
    return (p.s0 + v * p.T) / math.sqrt(1.0 - (v / p.v0) ** p.delta)


@dataclass
class VehicleState:
    id: int
    pose: FrenetPose
    v: float
    accel: float = 0.0
    length: float = 4.6
    width: float = 1.8
    height: float = 1.5
    params: IdmParams = field(default_factory=IdmParams)
    is_ego: bool = False
    depart_time: float = 0.0
    lat_v: float = 0.0  # lateral rate, used by the ego's double integrator


# -- demand -------------------------------------------------------------------

@dataclass(frozen=True)
class Distribution:
    """Truncated normal parameters for one sampled quantity."""
    mean: float
    std: float
    min: float
    max: float

    def validate(self, name: str):
        if not (self.min <= self.mean <= self.max):
            raise DemandError(
                f"distribution {name!r}: need min <= mean <= max, got "
                f"[{self.min}, {self.mean}, {self.max}]")
        if self.std < 0:
            raise DemandError(f"distribution {name!r}: std must be >= 0")

    def sample(self, rng: Pcg32) -> float:
        return rng.truncated_normal(self.mean, self.std, self.min, self.max)


DEFAULT_DISTRIBUTIONS = {
    "v0": Distribution(30.0, 3.0, 20.0, 40.0),
    "T": Distribution(1.5, 0.3, 1.0, 2.5),
    "s0": Distribution(2.0, 0.5, 1.0, 4.0),
    "a_max": Distribution(1.5, 0.3, 1.0, 2.5),
    "b": Distribution(2.0, 0.3, 1.5, 3.0),
    "delta": Distribution(4.0, 0.0, 4.0, 4.0),
    "length": Distribution(4.6, 0.3, 3.8, 5.5),
    "width": Distribution(1.8, 0.1, 1.6, 2.1),
    "height": Distribution(1.5, 0.08, 1.3, 1.8),
}

_SAMPLE_ORDER = ("v0", "T", "s0", "a_max", "b", "delta",
                 "length", "width", "height")


@dataclass
class RouteDemand:
    route: str
    count: int
    depart_spacing: float = 1.0
    distributions: dict = field(default_factory=dict)

    def validate(self):
        if self.count < 0:
            raise DemandError(f"route {self.route!r}: count must be >= 0")
        if self.depart_spacing < 0:
            raise DemandError(f"route {self.route!r}: depart_spacing must be >= 0")
        for name, dist in self.distributions.items():
            if name not in DEFAULT_DISTRIBUTIONS:
                raise DemandError(f"route {self.route!r}: unknown parameter {name!r}")
            dist.validate(name)


@dataclass
class DemandConfig:
    seed: int = 0
    routes: list = field(default_factory=list)

    def validate(self):
        for rd in self.routes:
            rd.validate()

    def to_dict(self) -> dict:
        return {
            "format": DEMAND_FORMAT,
            "seed": self.seed,
            "routes": [
                {
                    "route": rd.route,
                    "count": rd.count,
                    "depart_spacing": rd.depart_spacing,
                    "distributions": {
                        name: {"mean": d.mean, "std": d.std,
                               "min": d.min, "max": d.max}
                        for name, d in rd.distributions.items()
                    },
                }
                for rd in self.routes
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DemandConfig":
        if doc.get("format") != DEMAND_FORMAT:
            raise DemandError(
                f"unsupported demand format {doc.get('format')!r}, "
                f"expected {DEMAND_FORMAT!r}")
        routes = []
        for rd in doc.get("routes", []):
            dists = {
                name: Distribution(float(d["mean"]), float(d["std"]),
                                   float(d["min"]), float(d["max"]))
                for name, d in rd.get("distributions", {}).items()
            }
            routes.append(RouteDemand(rd["route"], int(rd["count"]),
                                      float(rd.get("depart_spacing", 1.0)),
                                      dists))
        cfg = cls(int(doc.get("seed", 0)), routes)
        cfg.validate()
        return cfg


def load_demand(path) -> DemandConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DemandError(f"cannot read demand file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DemandError(f"demand file {path} is not valid JSON: {exc}") from exc
    return DemandConfig.from_dict(doc)


def sample_demand(cfg: DemandConfig, net: RoadNetwork, rng: Pcg32 = None):
    """Sample one VehicleState per demanded vehicle, ids ascending from 1.

    Draw order is fixed (route order, then vehicle index, then the parameter
    order v0, T, s0, a_max, b, delta, length, width, height), so identical
    (cfg, seed) inputs produce identical vehicle lists. Vehicles start at the
    route entry in a round-robin preferred lane; actual insertion happens in
    step order once their depart time arrives and the entry gap allows.
    """
    cfg.validate()
    if rng is None:
        rng = Pcg32(cfg.seed, DEMAND_STREAM)
    vehicles = []
    vid = 1
    for rd in cfg.routes:
        path = net.path(rd.route)  # raises RouteRangeError on unknown route
        entry_edge = net.edges[path.edge_ids[0]]
        dists = {**DEFAULT_DISTRIBUTIONS, **rd.distributions}
        for i in range(rd.count):
            drawn = {name: dists[name].sample(rng) for name in _SAMPLE_ORDER}
            params = IdmParams(drawn["v0"], drawn["T"], drawn["s0"],
                               drawn["a_max"], drawn["b"], drawn["delta"])
            lane = i % entry_edge.lanes
            s0 = drawn["length"] / 2.0
            pose = FrenetPose(rd.route, s0, net.lane_center(rd.route, s0, lane),
                              lane)
            vehicles.append(VehicleState(
                id=vid, pose=pose,
                v=min(drawn["v0"], entry_edge.speed_limit),
                length=drawn["length"], width=drawn["width"],
                height=drawn["height"], params=params,
                depart_time=i * rd.depart_spacing))
            vid += 1
    return vehicles


# -- traffic state and stepping -------------------------------------------------

@dataclass
class TrafficState:
    time: float
    vehicles: list                  # active vehicles, ascending id
    pending: list                   # scheduled, not yet inserted
    collisions: list = field(default_factory=list)  # pairs from the last step
    lane_order: dict = field(default_factory=dict)  # (route, lane) -> ids by s

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(f"vehicle {vid} is not active")

    def has_vehicle(self, vid: int) -> bool:
        return any(v.id == vid for v in self.vehicles)


def _build_lane_order(vehicles):
    order = {}
    for v in vehicles:
        order.setdefault((v.pose.route_id, v.pose.lane_index), []).append(v)
    return {
        key: [v.id for v in sorted(vs, key=lambda w: (w.pose.s, w.id))]
        for key, vs in order.items()
    }


def make_traffic_state(vehicles, net: RoadNetwork, time: float = 0.0) -> TrafficState:
    """Initial state: vehicles due at or before `time` are inserted (entry gap
    permitting, in depart order), the rest wait in the pending queue."""
    state = TrafficState(time, [], sorted(vehicles, key=lambda v: (v.depart_time, v.id)))
    _insert_due(state, net)
    state.lane_order = _build_lane_order(state.vehicles)
    state.collisions = detect_collisions(state, net)
    return state


def _entry_ok(veh: VehicleState, lane: int, state: TrafficState,
              net: RoadNetwork) -> bool:
    path = net.path(veh.pose.route_id)
    for other in state.vehicles:
        if other.pose.route_id != veh.pose.route_id or other.pose.lane_index != lane:
            continue
        ds = other.pose.s - veh.pose.s
        if path.closed:
            ds = (ds + path.length / 2.0) % path.length - path.length / 2.0
        if ds >= 0:
            gap = ds - 0.5 * (other.length + veh.length)
            if gap < veh.params.s0 + veh.v * veh.params.T:
                return False
        else:
            gap = -ds - 0.5 * (other.length + veh.length)
            if gap < other.params.s0 + other.v * other.params.T:
                return False
    return True


def _insert_due(state: TrafficState, net: RoadNetwork):
    still_pending = []
    for veh in state.pending:
        if veh.depart_time > state.time + 1e-9:
            still_pending.append(veh)
            continue
        edge = net.edge_at(veh.pose.route_id, veh.pose.s)
        placed = False
        preferred = veh.pose.lane_index
        for lane in [preferred] + [k for k in range(edge.lanes) if k != preferred]:
            if _entry_ok(veh, lane, state, net):
                d = net.lane_center(veh.pose.route_id, veh.pose.s, lane)
                veh.pose = FrenetPose(veh.pose.route_id, veh.pose.s, d, lane)
                state.vehicles.append(veh)
                placed = True
                break
        if not placed:
            still_pending.append(veh)  # retry next step
    state.pending = still_pending
    state.vehicles.sort(key=lambda v: v.id)


def _lane_buckets(vehicles):
    """Vehicles grouped by (route, lane), each bucket sorted by (s, id)."""
    buckets = {}
    for v in vehicles:
        buckets.setdefault((v.pose.route_id, v.pose.lane_index), []).append(v)
    for vs in buckets.values():
        vs.sort(key=lambda w: (w.pose.s, w.id))
    return buckets


def _leader_of(veh: VehicleState, buckets, net: RoadNetwork, lane=None):
    """Nearest vehicle ahead of veh in (its route, lane), wrapping on loops.

    Returns (leader, net_gap) or (None, None) on a free road.
    """
    if lane is None:
        lane = veh.pose.lane_index
    bucket = buckets.get((veh.pose.route_id, lane), ())
    path = net.path(veh.pose.route_id)
    best = None
    best_ds = None
    for other in bucket:
        if other.id == veh.id:
            continue
        ds = other.pose.s - veh.pose.s
        if path.closed:
            ds %= path.length
            if ds == 0.0:
                ds = path.length
        elif ds <= 0:
            continue
        if ds > 0 and (best_ds is None or ds < best_ds
                       or (ds == best_ds and other.id < best.id)):
            best, best_ds = other, ds
    if best is None:
        return None, None
    return best, best_ds - 0.5 * (best.length + veh.length)


def _follower_of(veh: VehicleState, buckets, net: RoadNetwork, lane: int):
    """Nearest vehicle behind veh's position in (its route, lane).

    Returns (follower, center distance) or (None, None).
    """
    bucket = buckets.get((veh.pose.route_id, lane), ())
    path = net.path(veh.pose.route_id)
    best = None
    best_ds = None
    for other in bucket:
        if other.id == veh.id:
            continue
        ds = veh.pose.s - other.pose.s
        if path.closed:
            ds %= path.length
            if ds == 0.0:
                ds = path.length
        elif ds <= 0:
            continue
        if ds > 0 and (best_ds is None or ds < best_ds
                       or (ds == best_ds and other.id < best.id)):
            best, best_ds = other, ds
    return best, best_ds


def _junction_yield_gap(veh: VehicleState, state: TrafficState, net: RoadNetwork):
    """Virtual stop-line gap if this vehicle must yield at an upcoming junction.

    Priority by arrival order: vehicles already inside the junction circle go
    first; among approaching vehicles the shortest time-to-junction wins, ties
    broken by lower id. Followers on the same route are handled by ordinary
    car following instead.
    """
    positions = net.junction_positions(veh.pose.route_id)
    if not positions:
        return None
    path = net.path(veh.pose.route_id)
    best_gap = None
    for s_node, node_id in positions:
        rel = s_node - veh.pose.s
        if path.closed:
            rel = (rel + path.length / 2.0) % path.length - path.length / 2.0
        if abs(rel) <= JUNCTION_RADIUS + veh.length / 2.0:
            return None  # already inside: never yield from within
        if not 0.0 < rel <= JUNCTION_APPROACH:
            continue
        my_eta = rel / max(veh.v, 0.5)
        must_yield = False
        for other in state.vehicles:
            if other.id == veh.id or other.pose.route_id == veh.pose.route_id:
                continue
            o_positions = net.junction_positions(other.pose.route_id)
            o_path = net.path(other.pose.route_id)
            for o_s, o_node in o_positions:
                if o_node != node_id:
                    continue
                o_rel = o_s - other.pose.s
                if o_path.closed:
                    o_rel = (o_rel + o_path.length / 2.0) % o_path.length \
                        - o_path.length / 2.0
                if abs(o_rel) <= JUNCTION_RADIUS + other.length / 2.0:
                    must_yield = True  # occupied
                elif 0.0 < o_rel <= JUNCTION_APPROACH:
                    o_eta = o_rel / max(other.v, 0.5)
                    if o_eta < my_eta or (o_eta == my_eta and other.id < veh.id):
                        must_yield = True
                if must_yield:
                    break
            if must_yield:
                break
        if must_yield:
            gap = rel - JUNCTION_RADIUS - veh.length / 2.0
            if gap > 0 and (best_gap is None or gap < best_gap):
                best_gap = gap
    return best_gap


def _bg_acceleration(veh: VehicleState, state: TrafficState, net: RoadNetwork,
                     buckets) -> float:
    edge = net.edge_at(veh.pose.route_id, veh.pose.s)
    p = veh.params
    if edge.speed_limit < p.v0:
        p = replace(p, v0=edge.speed_limit)
    leader, gap = _leader_of(veh, buckets, net)
    try:
        if leader is None:
            a = idm_acceleration(veh.v, None, 0.0, p)
        else:
            a = idm_acceleration(veh.v, gap, veh.v - leader.v, p)
    except DegenerateGapError:
        a = -EMERGENCY_DECEL_FACTOR * p.b  # overlap: brake hard, collision logged
    stop_gap = _junction_yield_gap(veh, state, net)
    if stop_gap is not None:
        try:
            a = min(a, idm_acceleration(veh.v, stop_gap, veh.v, p))
        except DegenerateGapError:
            a = -EMERGENCY_DECEL_FACTOR * p.b
    return a


def lane_change_decision(state: TrafficState, net: RoadNetwork, vehicle_id: int,
                         buckets=None):
    """Symmetric gap-acceptance lane change.

    A target lane is returned only when both the lead gap (for the changing
    vehicle) and the lag gap (for the new follower) are at least the
    respective follower's s0 + v*T, and the move improves the vehicle's IDM
    acceleration by at least LANE_CHANGE_GAIN. Returns the target lane index
    or None.
    """
    veh = state.vehicle(vehicle_id)
    edge = net.edge_at(veh.pose.route_id, veh.pose.s)
    lane = veh.pose.lane_index
    candidates = [k for k in (lane - 1, lane + 1) if 0 <= k < edge.lanes]
    if not candidates:
        return None
    if buckets is None:
        buckets = _lane_buckets(state.vehicles)

    cur_leader, cur_gap = _leader_of(veh, buckets, net)
    try:
        if cur_leader is None:
            a_cur = idm_acceleration(veh.v, None, 0.0, veh.params)
        else:
            a_cur = idm_acceleration(veh.v, cur_gap, veh.v - cur_leader.v,
                                     veh.params)
    except DegenerateGapError:
        a_cur = -math.inf

    best_lane, best_a = None, None
    for target in candidates:
        lead, lead_gap = _leader_of(veh, buckets, net, lane=target)
        if lead is not None and lead_gap < veh.params.s0 + veh.v * veh.params.T:
            continue
        lag, lag_ds = _follower_of(veh, buckets, net, target)
        if lag is not None:
            lag_gap = lag_ds - 0.5 * (lag.length + veh.length)
            if lag_gap < lag.params.s0 + lag.v * lag.params.T:
                continue
        try:
            if lead is None:
                a_t = idm_acceleration(veh.v, None, 0.0, veh.params)
            else:
                a_t = idm_acceleration(veh.v, lead_gap, veh.v - lead.v,
                                       veh.params)
        except DegenerateGapError:
            continue
        if a_t > a_cur + LANE_CHANGE_GAIN and (best_a is None or a_t > best_a):
            best_lane, best_a = target, a_t
    return best_lane


def step_traffic(state: TrafficState, net: RoadNetwork, dt: float,
                 ego_action=None, allow_lane_changes: bool = True) -> TrafficState:
    """Advance the scene by one step of dt seconds.

    Order: insert due departures, background lane changes (id order),
    synchronous acceleration computation, semi-implicit integration
    (v then s), route-end wrap or removal, collision detection. The ego
    applies ego_action = (a_long, a_lat) exactly; everyone else runs IDM.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    work = TrafficState(
        state.time,
        [replace(v, pose=replace(v.pose)) for v in state.vehicles],
        [replace(v, pose=replace(v.pose)) for v in state.pending],
    )
    _insert_due(work, net)

    buckets = _lane_buckets(work.vehicles)
    if allow_lane_changes:
        for veh in work.vehicles:
            if veh.is_ego:
                continue
            target = lane_change_decision(work, net, veh.id, buckets)
            if target is not None:
                d = net.lane_center(veh.pose.route_id, veh.pose.s, target)
                veh.pose = FrenetPose(veh.pose.route_id, veh.pose.s, d, target)
                buckets = _lane_buckets(work.vehicles)

    # Synchronous: all accelerations from the pre-integration state.
    accels = {}
    for veh in work.vehicles:
        if veh.is_ego:
            a_long = float(ego_action[0]) if ego_action is not None else 0.0
            accels[veh.id] = a_long
        else:
            accels[veh.id] = _bg_acceleration(veh, work, net, buckets)

    a_lat = float(ego_action[1]) if ego_action is not None else 0.0
    survivors = []
    for veh in work.vehicles:
        a = accels[veh.id]
        veh.accel = a
        veh.v = max(0.0, veh.v + a * dt)
        path = net.path(veh.pose.route_id)
        s = veh.pose.s + veh.v * dt
        if veh.is_ego:
            veh.lat_v += a_lat * dt
            d = veh.pose.d + veh.lat_v * dt
        else:
            d = veh.pose.d
        if s >= path.length:
            if path.closed:
                s %= path.length
            else:
                continue  # reached route end: removed
        veh.pose = FrenetPose(veh.pose.route_id, s, d,
                              net.lane_index(veh.pose.route_id, s, d))
        survivors.append(veh)

    new_state = TrafficState(state.time + dt, survivors, work.pending)
    new_state.lane_order = _build_lane_order(survivors)
    new_state.collisions = detect_collisions(new_state, net)
    return new_state


# -- collision detection --------------------------------------------------------

def vehicle_world_pose(net: RoadNetwork, veh: VehicleState):
    return frenet_to_world(net, veh.pose)


def _obb_overlap(pose_a, dims_a, pose_b, dims_b) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts as
    overlap only when the projections strictly intersect)."""
    ca, sa = math.cos(pose_a.heading), math.sin(pose_a.heading)
    cb, sb = math.cos(pose_b.heading), math.sin(pose_b.heading)
    axes = ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb))
    half_a = (dims_a[0] / 2.0, dims_a[1] / 2.0)
    half_b = (dims_b[0] / 2.0, dims_b[1] / 2.0)
    dx, dy = pose_b.x - pose_a.x, pose_b.y - pose_a.y
    for lx, ly in axes:
        ra = half_a[0] * abs(lx * ca + ly * sa) + half_a[1] * abs(-lx * sa + ly * ca)
        rb = half_b[0] * abs(lx * cb + ly * sb) + half_b[1] * abs(-lx * sb + ly * cb)
        if abs(lx * dx + ly * dy) > ra + rb:
            return False
    return True


def detect_collisions(state: TrafficState, net: RoadNetwork):
    """All overlapping body-rectangle pairs, as sorted (low id, high id) tuples."""
    n = len(state.vehicles)
    if n < 2:
        return []
    poses = [vehicle_world_pose(net, v) for v in state.vehicles]
    centers = np.array([[p.x, p.y] for p in poses])
    radii = np.array([0.5 * math.hypot(v.length, v.width)
                      for v in state.vehicles])
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.hypot(diff[:, :, 0], diff[:, :, 1])
    close = dist <= (radii[:, None] + radii[None, :])
    candidates = np.argwhere(np.triu(close, k=1))
    pairs = []
    for i, j in candidates:
        a, b = state.vehicles[i], state.vehicles[j]
        if _obb_overlap(poses[i], (a.length, a.width),
                        poses[j], (b.length, b.width)):
            pairs.append((min(a.id, b.id), max(a.id, b.id)))
    pairs.sort()
    return pairs
