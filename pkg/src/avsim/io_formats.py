"""File formats and atomic writers for every exported artifact.

All writers are byte-deterministic: fixed key order, Python repr floats,
little-endian binary, temp-file + rename. Formats:

    point cloud  binary, magic "AVPC", u32 version, u32 count,
                 then count * (float32 x, y, z, intensity), little-endian
    ground truth JSON Lines, one object per frame:
                 {frame_id, time, boxes: [{vehicle_id, x_min, y_min, x_max, y_max}]}
    detections   JSON Lines, one object per frame:
                 {frame_id, detections: [{x_min, y_min, x_max, y_max, score}]}
    episode      JSON Lines, one object per step (see env.episode_record)
    trajectory   CSV with header step,id,route,s,d,v,a
    rasters      16-bit binary PGM (depth scaled to max range; instance ids)
    report       CSV scenario,tau,tp,fp,fn,precision,recall + Markdown table
    manifest     JSON with config hash, seed, tool version, artifact paths
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError

AVPC_MAGIC = b"AVPC"
AVPC_VERSION = 1
MANIFEST_FORMAT = "avsim-manifest/1"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    """Stable compact JSON used for hashing configurations."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def dump_json_line(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def write_jsonl(path, records):
    atomic_write_text(path, "".join(dump_json_line(r) + "\n" for r in records))


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- point clouds ---------------------------------------------------------------

def pointcloud_bytes(scan) -> bytes:
    """Serialize a LidarScan to the AVPC binary layout."""
    n = len(scan)
    header = AVPC_MAGIC + struct.pack("<II", AVPC_VERSION, n)
    data = np.empty((n, 4), dtype="<f4")
    data[:, :3] = scan.xyz
    data[:, 3] = scan.intensity
    return header + data.tobytes()


def write_pointcloud(path, scan):
    atomic_write_bytes(path, pointcloud_bytes(scan))


def read_pointcloud(path) -> np.ndarray:
    """Read an AVPC file into an (N, 4) float32 array (x, y, z, intensity)."""
    raw = Path(path).read_bytes()
    if raw[:4] != AVPC_MAGIC:
        raise ConfigError(f"{path} is not an AVPC point cloud")
    version, count = struct.unpack("<II", raw[4:12])
    if version != AVPC_VERSION:
        raise ConfigError(f"unsupported AVPC version {version}")
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != count * 4:
        raise ConfigError(f"{path} is truncated: expected {count} records")
    return data.reshape(count, 4)


# -- rasters ----------------------------------------------------------------------

def _pgm16_bytes(values: np.ndarray) -> bytes:
    h, w = values.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    return header + values.astype(">u2").tobytes()


def depth_pgm_bytes(depth: np.ndarray, max_range: float) -> bytes:
    """Depth scaled to the LiDAR max range; 65535 = at or beyond range/sky."""
    scaled = np.where(np.isfinite(depth),
                      np.clip(depth / max_range, 0.0, 1.0) * 65535.0, 65535.0)
    return _pgm16_bytes(np.round(scaled).astype(np.uint16))


def instance_pgm_bytes(instance: np.ndarray) -> bytes:
    return _pgm16_bytes(np.clip(instance, 0, 65535).astype(np.uint16))


def write_depth_pgm(path, depth, max_range):
    atomic_write_bytes(path, depth_pgm_bytes(depth, max_range))


def write_instance_pgm(path, instance):
    atomic_write_bytes(path, instance_pgm_bytes(instance))


# -- ground truth / detections -----------------------------------------------------

def gt_record(frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "time": frame.time,
        "boxes": [
            {"vehicle_id": vid, "x_min": box.x_min, "y_min": box.y_min,
             "x_max": box.x_max, "y_max": box.y_max}
            for vid, box in frame.gt_boxes
        ],
    }


def det_record(frame_id: int, detections) -> dict:
    return {
        "frame_id": frame_id,
        "detections": [
            {"x_min": d.box.x_min, "y_min": d.box.y_min,
             "x_max": d.box.x_max, "y_max": d.box.y_max, "score": d.score}
            for d in detections
        ],
    }


def parse_gt_records(records):
    """gt JSONL records -> list of lightweight frames (frame_id, time, gt_boxes)."""
    from .sensors import BBox2D

    class GtFrame:
        __slots__ = ("frame_id", "time", "gt_boxes")

        def __init__(self, frame_id, time, gt_boxes):
            self.frame_id = frame_id
            self.time = time
            self.gt_boxes = gt_boxes

    frames = []
    for rec in records:
        boxes = [(b.get("vehicle_id", i),
                  BBox2D(float(b["x_min"]), float(b["y_min"]),
                         float(b["x_max"]), float(b["y_max"])))
                 for i, b in enumerate(rec.get("boxes", []))]
        frames.append(GtFrame(int(rec["frame_id"]), float(rec.get("time", 0.0)),
                              boxes))
    return frames


def parse_det_records(records):
    """detections JSONL records -> dict frame_id -> [Detection]."""
    from .evaluation import Detection
    from .sensors import BBox2D
    out = {}
    for rec in records:
        dets = [Detection(BBox2D(float(d["x_min"]), float(d["y_min"]),
                                 float(d["x_max"]), float(d["y_max"])),
                          float(d.get("score", 1.0)))
                for d in rec.get("detections", [])]
        out[int(rec["frame_id"])] = dets
    return out


# -- trajectory log -----------------------------------------------------------------

def trajectory_header() -> str:
    return "step,id,route,s,d,v,a\n"


def trajectory_line(step: int, veh) -> str:
    return (f"{step},{veh.id},{veh.pose.route_id},{veh.pose.s!r},"
            f"{veh.pose.d!r},{veh.v!r},{veh.accel!r}\n")


# -- reports -------------------------------------------------------------------------

def _cell(value) -> str:
    return "n/a" if value is None else repr(value)


def report_csv(rows) -> str:
    out = ["scenario,tau,tp,fp,fn,precision,recall\n"]
    for r in rows:
        out.append(f"{r.scenario},{r.tau!r},{r.tp},{r.fp},{r.fn},"
                   f"{_cell(r.precision)},{_cell(r.recall)}\n")
    return "".join(out)


def parse_report_csv(text: str):
    """Inverse of report_csv, returning ReportRow objects."""
    from .evaluation import ReportRow
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "scenario,tau,tp,fp,fn,precision,recall":
        raise ConfigError("not an avsim report CSV (bad header)")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise ConfigError(f"malformed report row: {ln!r}")
        rows.append(ReportRow(
            parts[0], float(parts[1]), int(parts[2]), int(parts[3]),
            int(parts[4]),
            None if parts[5] == "n/a" else float(parts[5]),
            None if parts[6] == "n/a" else float(parts[6])))
    return rows


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def report_markdown(rows, title: str = "Experimental results") -> str:
    """Markdown table shaped like the per-scenario precision/recall grid."""
    scenarios = []
    taus = []
    for r in rows:
        if r.scenario not in scenarios:
            scenarios.append(r.scenario)
        if r.tau not in taus:
            taus.append(r.tau)
    taus.sort()
    by_key = {(r.scenario, r.tau): r for r in rows}
    head = ("| IoU threshold | " +
            " | ".join(f"P@{t:g}" for t in taus) + " | " +
            " | ".join(f"R@{t:g}" for t in taus) + " |")
    rule = "|" + "---|" * (1 + 2 * len(taus))
    lines = [f"# {title}", "", head, rule]
    for sc in scenarios:
        cells = [_fmt(by_key[(sc, t)].precision) for t in taus]
        cells += [_fmt(by_key[(sc, t)].recall) for t in taus]
        lines.append("| " + sc.capitalize() + " | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)


# -- run manifest ----------------------------------------------------------------------

def write_manifest(path, tool_version: str, seed: int, cfg_dict: dict,
                   artifacts: dict):
    doc = {
        "format": MANIFEST_FORMAT,
        "tool_version": tool_version,
        "seed": seed,
        "config_hash": config_hash(cfg_dict),
        "artifacts": {name: str(rel) for name, rel in sorted(artifacts.items())},
    }
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc
