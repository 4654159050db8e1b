"""Road geometry: networks, routes, and the road-aligned (Frenet) frame.

A network is nodes + directed polyline edges + named routes (ordered edge
chains). Centerlines are piecewise linear; all curvature comes from polyline
density. A RoadNetwork is immutable after load and precomputes per-route
geometry, so it is safe for concurrent reads.

Conventions:
    s   arc length along the route centerline, meters
    d   signed lateral offset, meters, left of travel positive
    heading   radians, CCW from +x, normalized to (-pi, pi]
"""

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import NetworkError, OffRoadError, RouteRangeError

NET_FORMAT = "avsim-net/1"

# Default search radius for world -> Frenet projection.
DEFAULT_MAX_OFFSET = 30.0


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class WorldPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True)
class FrenetPose:
    route_id: str
    s: float
    d: float
    lane_index: int = 0


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    polyline: np.ndarray  # (P, 2) float
    lanes: int
    lane_width: float
    speed_limit: float
    length: float = field(init=False)

    def __post_init__(self):
        seg = np.diff(self.polyline, axis=0)
        object.__setattr__(self, "length", float(np.hypot(seg[:, 0], seg[:, 1]).sum()))

    @property
    def half_width(self) -> float:
        return 0.5 * self.lanes * self.lane_width


class RoutePath:
    """Concatenated, deduplicated centerline of one route with precomputed
    segment tangents/normals and angle-bisector normals at interior vertices."""

    def __init__(self, route_id: str, points: np.ndarray, closed: bool,
                 edge_ids: list, edge_breaks: np.ndarray):
        self.route_id = route_id
        self.points = points
        self.closed = closed
        self.edge_ids = edge_ids
        # edge_breaks[i] = arc length at which edge i starts; last entry = total.
        self.edge_breaks = edge_breaks

        seg = np.diff(points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.tangents = seg / self.seg_len[:, None]
        # Left normal of each segment.
        self.normals = np.stack([-self.tangents[:, 1], self.tangents[:, 0]], axis=1)
        self.cum_s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum_s[-1])

        # Bisector normals at interior vertices keep frenet_to_world
        # single-valued exactly at polyline kinks.
        n = len(points)
        vn = np.empty((n, 2))
        vn[0] = self.normals[0]
        vn[-1] = self.normals[-1]
        for i in range(1, n - 1):
            v = self.normals[i - 1] + self.normals[i]
            norm = math.hypot(v[0], v[1])
            vn[i] = v / norm if norm > 1e-12 else self.normals[i - 1]
        if closed:
            v = self.normals[-1] + self.normals[0]
            norm = math.hypot(v[0], v[1])
            if norm > 1e-12:
                vn[0] = vn[-1] = v / norm
        self.vertex_normals = vn

    def locate(self, s: float):
        """Return (segment index, offset into segment) for arc length s."""
        i = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        i = min(max(i, 0), len(self.seg_len) - 1)
        return i, s - self.cum_s[i]

    def edge_index_at(self, s: float) -> int:
        i = int(np.searchsorted(self.edge_breaks, s, side="right")) - 1
        return min(max(i, 0), len(self.edge_ids) - 1)

    def project(self, pts: np.ndarray):
        """Project world points (N, 2) onto the centerline.

        Returns (s, d, dist) arrays. Ambiguity between equidistant segments
        resolves to the smaller s.
        """
        pts = np.asarray(pts, dtype=float)
        a = self.points[:-1]  # (S, 2)
        rel = pts[:, None, :] - a[None, :, :]  # (N, S, 2)
        t = np.einsum("nsk,sk->ns", rel, self.tangents)
        t = np.clip(t, 0.0, self.seg_len[None, :])
        foot = a[None, :, :] + t[:, :, None] * self.tangents[None, :, :]
        delta = pts[:, None, :] - foot
        dist2 = np.einsum("nsk,nsk->ns", delta, delta)
        # argmin takes the first (smallest-s) segment on exact ties.
        best = np.argmin(dist2, axis=1)
        idx = np.arange(len(pts))
        tb = t[idx, best]
        s = self.cum_s[best] + tb
        db = delta[idx, best]
        d = np.einsum("nk,nk->n", db, self.normals[best])
        dist = np.sqrt(dist2[idx, best])
        return s, d, dist


@dataclass(frozen=True)
class Route:
    id: str
    edge_ids: tuple


class RoadNetwork:
    """Validated road network; immutable after construction."""

    def __init__(self, nodes: dict, edges: dict, routes: dict):
        self.nodes = nodes
        self.edges = edges
        self.routes = routes
        self._paths = {rid: self._build_path(rid) for rid in routes}
        self._junctions = self._find_junctions()

    # -- construction ------------------------------------------------------

    def _build_path(self, route_id: str) -> RoutePath:
        route = self.routes[route_id]
        pts = None
        breaks = [0.0]
        for eid in route.edge_ids:
            poly = self.edges[eid].polyline
            if pts is None:
                pts = poly.copy()
            else:
                pts = np.vstack([pts, poly[1:]])
            breaks.append(breaks[-1] + self.edges[eid].length)
        first = self.edges[route.edge_ids[0]]
        last = self.edges[route.edge_ids[-1]]
        closed = first.from_node == last.to_node
        return RoutePath(route_id, pts, closed, list(route.edge_ids),
                         np.asarray(breaks))

    def _find_junctions(self) -> dict:
        """Nodes with >= 3 incident edges, mapped to per-route arc positions."""
        degree = {nid: 0 for nid in self.nodes}
        for e in self.edges.values():
            degree[e.from_node] += 1
            degree[e.to_node] += 1
        junction_nodes = {nid for nid, deg in degree.items() if deg >= 3}
        out = {}
        for rid, route in self.routes.items():
            path = self._paths[rid]
            hits = []
            for i, eid in enumerate(route.edge_ids):
                # Interior edge boundaries only: a route that merely starts or
                # ends at a junction never crosses it. Closed routes also
                # cross their wrap point.
                node = self.edges[eid].from_node
                if i == 0 and not path.closed:
                    continue
                if node in junction_nodes:
                    hits.append((float(path.edge_breaks[i]), node))
            out[rid] = hits
        return out

    # -- queries -----------------------------------------------------------

    def path(self, route_id: str) -> RoutePath:
        try:
            return self._paths[route_id]
        except KeyError:
            raise RouteRangeError(f"unknown route {route_id!r}") from None

    def route_length(self, route_id: str) -> float:
        return self.path(route_id).length

    def is_closed(self, route_id: str) -> bool:
        return self.path(route_id).closed

    def edge_at(self, route_id: str, s: float) -> Edge:
        path = self.path(route_id)
        return self.edges[path.edge_ids[path.edge_index_at(s)]]

    def half_width(self, route_id: str, s: float) -> float:
        return self.edge_at(route_id, s).half_width

    def lane_index(self, route_id: str, s: float, d: float) -> int:
        e = self.edge_at(route_id, s)
        idx = math.floor((d + e.half_width) / e.lane_width)
        return min(max(idx, 0), e.lanes - 1)

    def lane_center(self, route_id: str, s: float, lane: int) -> float:
        e = self.edge_at(route_id, s)
        if not 0 <= lane < e.lanes:
            raise RouteRangeError(f"lane {lane} out of range on edge {e.id!r}")
        return -e.half_width + (lane + 0.5) * e.lane_width

    def junction_positions(self, route_id: str):
        return self._junctions.get(route_id, [])

    def make_pose(self, route_id: str, s: float, d: float) -> FrenetPose:
        return FrenetPose(route_id, s, d, self.lane_index(route_id, s, d))


# -- module-level operations ------------------------------------------------

def frenet_to_world(net: RoadNetwork, pose: FrenetPose) -> WorldPose:
    """Map a road-aligned pose to a world pose.

    The world point sits at perpendicular offset d (left positive) from the
    centerline point at arc length s; heading is the centerline tangent. At a
    polyline kink the offset direction is the angle-bisector normal.
    """
    path = net.path(pose.route_id)
    if not 0.0 <= pose.s <= path.length + 1e-9:
        raise RouteRangeError(
            f"s={pose.s} outside [0, {path.length}] on route {pose.route_id!r}")
    i, t = path.locate(min(pose.s, path.length))
    if t < 1e-12 and i > 0:
        base = path.points[i]
        normal = path.vertex_normals[i]
        tangent = np.array([normal[1], -normal[0]])
    elif t >= path.seg_len[i] - 1e-12 and i < len(path.seg_len) - 1:
        base = path.points[i + 1]
        normal = path.vertex_normals[i + 1]
        tangent = np.array([normal[1], -normal[0]])
    else:
        base = path.points[i] + t * path.tangents[i]
        normal = path.normals[i]
        tangent = path.tangents[i]
    p = base + pose.d * normal
    return WorldPose(float(p[0]), float(p[1]),
                     math.atan2(float(tangent[1]), float(tangent[0])))


def world_to_frenet(net: RoadNetwork, route_id: str, pose: WorldPose,
                    max_offset: float = DEFAULT_MAX_OFFSET) -> FrenetPose:
    """Project a world pose onto a route centerline.

    Raises OffRoadError when the point is farther than max_offset from the
    centerline. Round-trips frenet_to_world within 1e-6 m for points away
    from polyline kinks.
    """
    path = net.path(route_id)
    s, d, dist = path.project(np.array([[pose.x, pose.y]]))
    if dist[0] > max_offset:
        raise OffRoadError(
            f"point ({pose.x:.2f}, {pose.y:.2f}) is {dist[0]:.2f} m from "
            f"route {route_id!r} centerline (max {max_offset} m)")
    return net.make_pose(route_id, float(s[0]), float(d[0]))


def world_to_frenet_batch(net: RoadNetwork, route_id: str, xy: np.ndarray,
                          max_offset: float = DEFAULT_MAX_OFFSET):
    """Vectorized projection of (N, 2) points; returns (s, d, on_road_mask)."""
    path = net.path(route_id)
    s, d, dist = path.project(xy)
    return s, d, dist <= max_offset


# -- file loading -------------------------------------------------------------

def _require(cond: bool, msg: str):
    if not cond:
        raise NetworkError(msg)


def parse_network(doc: dict) -> RoadNetwork:
    """Validate an avsim-net/1 document and build the network."""
    _require(isinstance(doc, dict), "network document must be a JSON object")
    _require(doc.get("format") == NET_FORMAT,
             f"unsupported network format {doc.get('format')!r}, "
             f"expected {NET_FORMAT!r}")

    nodes = {}
    for nd in doc.get("nodes", []):
        nid = nd.get("id")
        _require(isinstance(nid, str) and nid, "node without a string id")
        _require(nid not in nodes, f"duplicate node id {nid!r}")
        x, y = float(nd["x"]), float(nd["y"])
        _require(math.isfinite(x) and math.isfinite(y),
                 f"node {nid!r} has non-finite coordinates")
        nodes[nid] = (x, y)
    _require(len(nodes) > 0, "network has no nodes")

    edges = {}
    for ed in doc.get("edges", []):
        eid = ed.get("id")
        _require(isinstance(eid, str) and eid, "edge without a string id")
        _require(eid not in edges, f"duplicate edge id {eid!r}")
        for key in ("from", "to"):
            ref = ed.get(key)
            _require(ref in nodes, f"edge {eid!r} references missing node {ref!r}")
        poly = np.asarray(ed.get("polyline", []), dtype=float)
        _require(poly.ndim == 2 and poly.shape[1] == 2 and len(poly) >= 2,
                 f"edge {eid!r} polyline needs >= 2 [x, y] points")
        seg = np.hypot(*np.diff(poly, axis=0).T)
        _require(bool(np.all(seg > 1e-9)),
                 f"edge {eid!r} polyline arc length is not strictly increasing")
        _require(float(seg.sum()) > 1e-9, f"edge {eid!r} has zero length")
        for key, idx in (("from", 0), ("to", -1)):
            node_xy = np.asarray(nodes[ed[key]])
            _require(bool(np.allclose(poly[idx], node_xy, atol=1e-6)),
                     f"edge {eid!r} polyline endpoint does not coincide with "
                     f"node {ed[key]!r}")
        lanes = int(ed.get("lanes", 1))
        lane_width = float(ed.get("lane_width", 3.5))
        speed_limit = float(ed.get("speed_limit", 30.0))
        _require(lanes >= 1, f"edge {eid!r} needs lanes >= 1")
        _require(lane_width > 0, f"edge {eid!r} needs lane_width > 0")
        _require(speed_limit > 0, f"edge {eid!r} needs speed_limit > 0")
        edges[eid] = Edge(eid, ed["from"], ed["to"], poly, lanes, lane_width,
                          speed_limit)
    _require(len(edges) > 0, "network has no edges")

    routes = {}
    for rd in doc.get("routes", []):
        rid = rd.get("id")
        _require(isinstance(rid, str) and rid, "route without a string id")
        _require(rid not in routes, f"duplicate route id {rid!r}")
        eids = rd.get("edges", [])
        _require(len(eids) >= 1, f"route {rid!r} has no edges")
        for eid in eids:
            _require(eid in edges, f"route {rid!r} references missing edge {eid!r}")
        for a, b in zip(eids, eids[1:]):
            _require(edges[a].to_node == edges[b].from_node,
                     f"route {rid!r}: consecutive edges {a!r} -> {b!r} do not "
                     f"share a node")
        routes[rid] = Route(rid, tuple(eids))
    _require(len(routes) > 0, "network has no routes")

    return RoadNetwork(nodes, edges, routes)


def load_network(path) -> RoadNetwork:
    """Load and validate an avsim-net/1 JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise NetworkError(f"cannot read network file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise NetworkError(f"network file {path} is not valid JSON: {exc}") from exc
    return parse_network(doc)


_BUILTIN_NAMES = ("highway", "urban")


def builtin_networks():
    """The shipped example networks: a multi-lane highway loop and an urban
    grid with signal-free intersections."""
    out = []
    for name in _BUILTIN_NAMES:
        ref = resources.files("avsim.data.networks").joinpath(f"{name}.json")
        with resources.as_file(ref) as p:
            out.append((name, load_network(p)))
    return out


def resolve_network(name_or_path) -> RoadNetwork:
    """Accept a builtin network name or a path to an avsim-net/1 file."""
    name = str(name_or_path)
    if name in _BUILTIN_NAMES:
        ref = resources.files("avsim.data.networks").joinpath(f"{name}.json")
        with resources.as_file(ref) as p:
            return load_network(p)
    return load_network(name_or_path)
