"""avsim command line: demand generation, simulation/export, evaluation,
experiments, and report plots.

Exit codes: 0 success, 1 domain/validation failure, 2 usage error. Every
command is deterministic given its flags; all randomness flows from --seed.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .env import Action, default_ego_policy, load_env_config
from .errors import AvsimError, ConfigError
from .evaluation import (make_synthetic_detector, merge_reports, replace_seed,
                         run_episode, run_experiment, sweep_thresholds,
                         synthetic_detector_factory)
from .io_formats import (atomic_write_text, det_record, gt_record,
                         parse_det_records, parse_gt_records, parse_report_csv,
                         read_jsonl, report_csv, report_markdown,
                         trajectory_header, trajectory_line, write_depth_pgm,
                         write_instance_pgm, write_jsonl, write_manifest,
                         write_pointcloud)
from .road import resolve_network
from .sensors import SceneryCondition
from .traffic import DemandConfig, RouteDemand

EXPORT_CHOICES = ("trajectories", "pointclouds", "gt", "rasters", "episode")


def _parse_thresholds(text: str):
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise _Usage(f"cannot parse thresholds {text!r}")
    if not taus:
        raise _Usage("at least one threshold is required")
    if any(not 0.0 < t <= 1.0 for t in taus) or taus != sorted(taus):
        raise _Usage("thresholds must be ascending and in (0, 1]")
    return taus


class _Usage(Exception):
    """Flag-level validation failure: maps to exit code 2."""


# -- commands ----------------------------------------------------------------

def cmd_gen_demand(args) -> int:
    net = resolve_network(args.network)
    routes = args.route if args.route else sorted(net.routes)
    for rid in routes:
        if rid not in net.routes:
            raise ConfigError(f"route {rid!r} not present in network "
                              f"{args.network!r}")
    cfg = DemandConfig(seed=args.seed, routes=[
        RouteDemand(rid, args.count, args.depart_spacing) for rid in routes])
    cfg.validate()
    atomic_write_text(args.out, json.dumps(cfg.to_dict(), indent=1) + "\n")
    return 0


class _EpisodeExporter:
    """Streams one episode's artifacts under a run directory."""

    def __init__(self, out_dir: Path, exports, lidar_max_range: float):
        self.out_dir = Path(out_dir)
        self.exports = set(exports)
        self.max_range = lidar_max_range
        self.trajectory = [trajectory_header()]
        self.gt_records = []
        self.artifacts = {}

    def frame_sink(self, frame):
        if "gt" in self.exports:
            self.gt_records.append(gt_record(frame))
        if "pointclouds" in self.exports:
            rel = Path("pointclouds") / f"pc_{frame.frame_id:06d}.avpc"
            write_pointcloud(self.out_dir / rel, frame.points)
            self.artifacts[f"pointcloud_{frame.frame_id:06d}"] = rel
        if "rasters" in self.exports:
            rel_d = Path("rasters") / f"depth_{frame.frame_id:06d}.pgm"
            rel_i = Path("rasters") / f"instance_{frame.frame_id:06d}.pgm"
            write_depth_pgm(self.out_dir / rel_d, frame.depth, self.max_range)
            write_instance_pgm(self.out_dir / rel_i, frame.instance)
            self.artifacts[f"depth_{frame.frame_id:06d}"] = rel_d
            self.artifacts[f"instance_{frame.frame_id:06d}"] = rel_i

    def step_sink(self, env, step):
        if "trajectories" in self.exports:
            for veh in env.state.vehicles:
                self.trajectory.append(trajectory_line(step, veh))

    def finish(self, env):
        if "trajectories" in self.exports:
            rel = Path("trajectory.csv")
            atomic_write_text(self.out_dir / rel, "".join(self.trajectory))
            self.artifacts["trajectory"] = rel
        if "gt" in self.exports:
            rel = Path("gt.jsonl")
            write_jsonl(self.out_dir / rel, self.gt_records)
            self.artifacts["gt"] = rel
        if "episode" in self.exports:
            rel = Path("episode.jsonl")
            write_jsonl(self.out_dir / rel, env.episode_records())
            self.artifacts["episode"] = rel


def _load_actions(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read actions file {path}: {exc}") from exc
    try:
        return [Action(float(a), float(b)) for a, b in doc]
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"actions file {path} must be a JSON list of [a_long, a_lat] "
            f"pairs") from exc


def cmd_simulate(args) -> int:
    cfg = load_env_config(args.env)
    if args.seed is not None:
        cfg = replace_seed(cfg, args.seed)
    if args.steps is not None:
        cfg = replace(cfg, max_steps=args.steps)
    exports = args.export or []
    out_dir = Path(args.out_dir)
    exporter = _EpisodeExporter(out_dir, exports, cfg.lidar.max_range)

    actions = _load_actions(args.actions) if args.actions else None
    if actions is not None:
        policy_steps = min(cfg.max_steps, len(actions))
        cfg = replace(cfg, max_steps=policy_steps)

        def policy(env):
            return actions[env.step_index]
    else:
        policy = default_ego_policy

    episode, env = run_episode(cfg, detector=None, policy=policy,
                               frame_sink=exporter.frame_sink,
                               step_sink=exporter.step_sink)
    exporter.finish(env)
    write_manifest(out_dir / "manifest.json", __version__, cfg.seed,
                   cfg.to_dict(), exporter.artifacts)
    print(f"simulated {episode.steps} steps "
          f"({env.reason or 'not terminated'}); artifacts in {out_dir}")
    return 0


def _check_frame_ids(gt_frames, det_by_frame):
    gt_ids = {f.frame_id for f in gt_frames}
    det_ids = set(det_by_frame)
    missing_det = sorted(gt_ids - det_ids)
    missing_gt = sorted(det_ids - gt_ids)
    if missing_det or missing_gt:
        parts = []
        if missing_det:
            parts.append(f"frames missing from detections: {missing_det}")
        if missing_gt:
            parts.append(f"frames missing from ground truth: {missing_gt}")
        raise ConfigError("frame-id mismatch: " + "; ".join(parts))


def cmd_evaluate(args) -> int:
    taus = _parse_thresholds(args.thresholds)
    if args.score_min is not None and not 0.0 <= args.score_min <= 1.0:
        raise _Usage("--score-min must lie in [0, 1]")
    gt_frames = parse_gt_records(read_jsonl(args.gt))
    if args.det:
        det_by_frame = parse_det_records(read_jsonl(args.det))
        scenario = args.scenario
    elif args.detector == "synthetic":
        cond = SceneryCondition.preset(args.condition)
        detector = make_synthetic_detector(cond, args.seed)
        det_by_frame = {f.frame_id: detector(f) for f in gt_frames}
        scenario = cond.lighting
    else:
        raise _Usage("either --det or --detector synthetic is required")
    _check_frame_ids(gt_frames, det_by_frame)
    if args.score_min is not None:
        det_by_frame = {fid: [d for d in dets if d.score >= args.score_min]
                        for fid, dets in det_by_frame.items()}

    pairs = [(det_by_frame[f.frame_id], [b for _, b in f.gt_boxes])
             for f in gt_frames]
    rows = sweep_thresholds(pairs, taus, scenario)
    out_dir = Path(args.out)
    atomic_write_text(out_dir / "report.csv", report_csv(rows))
    atomic_write_text(out_dir / "report.md", report_markdown(rows))
    print(f"evaluated {len(gt_frames)} frames; report in {out_dir}")
    return 0


def cmd_experiment(args) -> int:
    taus = _parse_thresholds(args.thresholds)
    conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]
    if not conditions:
        raise _Usage("at least one condition is required")
    base_cfg = load_env_config(args.env)
    if args.seed is not None:
        base_cfg = replace_seed(base_cfg, args.seed)
    out_dir = Path(args.out_dir)
    artifacts = {}
    reports = []
    for name in conditions:
        cond = SceneryCondition.preset(name)
        cfg = replace(base_cfg, condition=cond)

        def exporter(run, run_cfg, _name=name):
            run_dir = out_dir / "runs" / f"{_name}_run{run}"
            ep = _EpisodeExporter(run_dir, ("trajectories", "pointclouds", "gt"),
                                  run_cfg.lidar.max_range)
            det_records = []

            def frame_sink(frame):
                ep.frame_sink(frame)

            def finalize(env, episode):
                ep.finish(env)
                for frame_id, dets, _ in episode.frames:
                    det_records.append(det_record(frame_id, dets))
                write_jsonl(run_dir / "detections.jsonl", det_records)
                for key, rel in ep.artifacts.items():
                    artifacts[f"{_name}_run{run}_{key}"] = \
                        Path("runs") / f"{_name}_run{run}" / rel
                artifacts[f"{_name}_run{run}_detections"] = \
                    Path("runs") / f"{_name}_run{run}" / "detections.jsonl"

            return frame_sink, ep.step_sink, finalize

        reports.append(run_experiment(cfg, args.runs,
                                      synthetic_detector_factory(
                                          cond, (cfg.camera.width,
                                                 cfg.camera.height)),
                                      taus, exporter=exporter))

    merged = merge_reports(reports)
    atomic_write_text(out_dir / "report.csv", report_csv(merged.rows))
    atomic_write_text(out_dir / "report.md", report_markdown(merged.rows))
    per_run_rows = [r for _, _, rows in merged.per_run for r in rows]
    run_labels = [f"{sc}_run{run}" for sc, run, rows in merged.per_run
                  for _ in rows]
    runs_csv = ["scenario_run,tau,tp,fp,fn,precision,recall\n"]
    for label, r in zip(run_labels, per_run_rows):
        p = "n/a" if r.precision is None else repr(r.precision)
        q = "n/a" if r.recall is None else repr(r.recall)
        runs_csv.append(f"{label},{r.tau!r},{r.tp},{r.fp},{r.fn},{p},{q}\n")
    atomic_write_text(out_dir / "runs.csv", "".join(runs_csv))

    from .plotting import render_report_figure
    render_report_figure(merged.rows, out_dir / "report.svg")

    artifacts.update({
        "report_csv": Path("report.csv"),
        "report_md": Path("report.md"),
        "report_svg": Path("report.svg"),
        "runs_csv": Path("runs.csv"),
    })
    write_manifest(out_dir / "manifest.json", __version__, base_cfg.seed,
                   base_cfg.to_dict(), artifacts)
    print(f"experiment complete ({len(conditions)} conditions x {args.runs} "
          f"runs); report in {out_dir}")
    return 0


def cmd_plot(args) -> int:
    try:
        text = Path(args.report).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    rows = parse_report_csv(text)
    if not rows:
        raise ConfigError("report has no data rows")
    from .plotting import render_report_figure
    render_report_figure(rows, args.out)
    print(f"wrote {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avsim",
        description="Deterministic traffic + sensor simulation and detection "
                    "evaluation harness.")
    parser.add_argument("--version", action="version",
                        version=f"avsim {__version__} "
                                f"(formats: net/1 demand/1 env/1 manifest/1 "
                                f"avpc/1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demand", help="sample a demand file")
    p.add_argument("--network", required=True,
                   help="builtin network name or path to an avsim-net/1 file")
    p.add_argument("--route", action="append", default=None,
                   help="route id (repeatable; default: every route)")
    p.add_argument("--count", type=int, required=True,
                   help="vehicles per route")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depart-spacing", type=float, default=1.0,
                   help="seconds between departures on a route")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demand)

    p = sub.add_parser("simulate", help="run an episode and export artifacts")
    p.add_argument("--env", required=True, help="avsim-env/1 config path")
    p.add_argument("--steps", type=int, default=None,
                   help="episode step budget (overrides config max_steps)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--export", action="append", choices=EXPORT_CHOICES,
                   default=None, help="artifact kind (repeatable)")
    p.add_argument("--actions", default=None,
                   help="JSON file with [a_long, a_lat] pairs for the ego "
                        "(default: IDM ego policy)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth JSONL path")
    p.add_argument("--det", default=None, help="detections JSONL path")
    p.add_argument("--detector", choices=("synthetic",), default=None,
                   help="generate detections instead of reading --det")
    p.add_argument("--condition", choices=("morning", "night", "noiseless"),
                   default="morning")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", default="eval",
                   help="scenario label for --det evaluations")
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8")
    p.add_argument("--score-min", type=float, default=None,
                   help="drop detections scoring below this cutoff "
                        "(default: keep all)")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment",
                       help="run the multi-run, multi-condition experiment")
    p.add_argument("--env", required=True)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--conditions", default="morning,night")
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", help="render a report CSV as an SVG chart")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"avsim: {exc}", file=sys.stderr)
        return 2
    except AvsimError as exc:
        print(f"avsim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
