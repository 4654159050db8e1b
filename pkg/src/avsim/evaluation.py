"""Detection evaluation: IoU, matching, TP/FP/FN, precision/recall sweeps,
the synthetic weather-degraded detector, and the experiment runner.

Matching is greedy by descending IoU, one-to-one, and computed once
independently of the threshold; thresholds only reclassify the fixed pair
list. That makes TP (and precision/recall under constant TP+FP, TP+FN)
non-increasing in the threshold by construction.
"""

from dataclasses import dataclass, field, replace

from .env import Environment, EnvConfig, default_ego_policy
from .errors import ConfigError
from .rng import DETECTOR_STREAM_BASE, Pcg32
from .sensors import BBox2D, SceneryCondition


@dataclass(frozen=True)
class Detection:
    box: BBox2D
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ConfigError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple            # (det index, gt index, iou), iou descending
    unmatched_dets: tuple
    unmatched_gts: tuple


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class ReportRow:
    scenario: str
    tau: float
    tp: int
    fp: int
    fn: int
    precision: float = None  # None when TP+FP == 0
    recall: float = None     # None when TP+FN == 0


@dataclass
class EvalReport:
    """Pooled rows per (scenario, tau) plus per-run breakdowns and metadata."""
    rows: list = field(default_factory=list)
    per_run: list = field(default_factory=list)  # (scenario, run, [ReportRow])
    meta: dict = field(default_factory=dict)

    def row(self, scenario: str, tau: float) -> ReportRow:
        for r in self.rows:
            if r.scenario == scenario and abs(r.tau - tau) < 1e-12:
                return r
        raise KeyError(f"no report row for ({scenario!r}, {tau})")


def iou(a: BBox2D, b: BBox2D) -> float:
    """Intersection area over union area; 0 for disjoint or zero-area pairs."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def match_detections(dets, gts) -> MatchResult:
    """Greedy one-to-one matching over all pairs in descending IoU order.

    Ties break on lower detection index, then lower ground-truth index; only
    pairs with IoU > 0 are eligible.
    """
    candidates = []
    for di, det in enumerate(dets):
        for gi, gt in enumerate(gts):
            v = iou(det.box, gt)
            if v > 0.0:
                candidates.append((-v, di, gi))
    candidates.sort()
    used_d, used_g = set(), set()
    pairs = []
    for neg_v, di, gi in candidates:
        if di in used_d or gi in used_g:
            continue
        used_d.add(di)
        used_g.add(gi)
        pairs.append((di, gi, -neg_v))
    return MatchResult(
        tuple(pairs),
        tuple(i for i in range(len(dets)) if i not in used_d),
        tuple(i for i in range(len(gts)) if i not in used_g),
    )


def classify(match: MatchResult, tau: float) -> ConfusionCounts:
    """TP/FP/FN at an IoU threshold: a matched pair counts as TP iff its IoU
    is >= tau; everything else detected is FP, every other gt is FN."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"IoU threshold {tau} outside (0, 1]")
    tp = sum(1 for _, _, v in match.pairs if v >= tau)
    n_dets = len(match.pairs) + len(match.unmatched_dets)
    n_gts = len(match.pairs) + len(match.unmatched_gts)
    return ConfusionCounts(tp, n_dets - tp, n_gts - tp)


def precision(c: ConfusionCounts):
    """TP / (TP + FP); None when there are no detections."""
    denom = c.tp + c.fp
    return c.tp / denom if denom > 0 else None


def recall(c: ConfusionCounts):
    """TP / (TP + FN); None when there is no ground truth."""
    denom = c.tp + c.fn
    return c.tp / denom if denom > 0 else None


def sweep_thresholds(frames, taus, scenario: str = "") -> list:
    """Micro-averaged report rows: counts summed over frames, then Eq'd.

    frames: iterable of (detections, gt boxes); taus: ascending in (0, 1].
    """
    taus = list(taus)
    if any(not 0.0 < t <= 1.0 for t in taus):
        raise ConfigError("thresholds must lie in (0, 1]")
    if taus != sorted(taus):
        raise ConfigError("thresholds must be ascending")
    matches = [match_detections(dets, gts) for dets, gts in frames]
    rows = []
    for tau in taus:
        tp = fp = fn = 0
        for m in matches:
            c = classify(m, tau)
            tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        c = ConfusionCounts(tp, fp, fn)
        rows.append(ReportRow(scenario, tau, tp, fp, fn, precision(c), recall(c)))
    return rows


# -- synthetic detector ---------------------------------------------------------

def detector_rng(seed: int, frame_id: int) -> Pcg32:
    """Detector noise stream for one frame; independent of frame order."""
    return Pcg32(seed, DETECTOR_STREAM_BASE + frame_id)


def synthetic_detect(frame, cond: SceneryCondition, rng: Pcg32,
                     image_size=(800, 600)) -> list:
    """Weather-degraded stand-in for a learned detector.

    Per gt box: dropped with probability p_miss(estimated distance, lighting),
    otherwise emitted with independent Gaussian jitter on each corner
    coordinate and a score ~ U(0.5, 1); plus Poisson(fp_rate) spurious boxes.
    Distance is estimated from box pixel height (dist_ref / height), so the
    detector behaves identically on live frames and exported gt files.
    """
    w, h = image_size
    dets = []
    for vid, box in frame.gt_boxes:
        height_px = max(box.y_max - box.y_min, 1e-6)
        dist = cond.dist_ref / height_px
        if rng.uniform() < cond.miss_probability(dist):
            continue
        if cond.jitter_px > 0:
            sigma = cond.jitter_px * height_px / cond.jitter_ref_height
            x0 = box.x_min + rng.normal(0.0, sigma)
            y0 = box.y_min + rng.normal(0.0, sigma)
            x1 = box.x_max + rng.normal(0.0, sigma)
            y1 = box.y_max + rng.normal(0.0, sigma)
        else:
            x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
        x0, x1 = sorted((min(max(x0, 0.0), w), min(max(x1, 0.0), w)))
        y0, y1 = sorted((min(max(y0, 0.0), h), min(max(y1, 0.0), h)))
        score = rng.uniform(0.5, 1.0)
        dets.append(Detection(BBox2D(x0, y0, x1, y1), score))
    for _ in range(rng.poisson(cond.fp_rate)):
        bw = 20.0 + rng.uniform() * 80.0
        bh = 15.0 + rng.uniform() * 60.0
        x0 = rng.uniform() * max(w - bw, 1.0)
        y0 = rng.uniform() * max(h - bh, 1.0)
        score = rng.uniform(0.5, 1.0)
        dets.append(Detection(BBox2D(x0, y0, min(x0 + bw, w), min(y0 + bh, h)),
                              score))
    return dets


def make_synthetic_detector(cond: SceneryCondition, seed: int,
                            image_size=(800, 600)):
    """Bind condition and seed into a detector callable(frame) -> detections."""
    def detect(frame):
        return synthetic_detect(frame, cond, detector_rng(seed, frame.frame_id),
                                image_size)
    return detect


def synthetic_detector_factory(cond: SceneryCondition, image_size=(800, 600)):
    """Per-run factory for run_experiment: seed -> detector callable."""
    def factory(seed):
        return make_synthetic_detector(cond, seed, image_size)
    return factory


# -- experiment runner ----------------------------------------------------------

@dataclass
class EpisodeFrames:
    """Per-frame evaluation data collected from one episode."""
    frames: list            # (frame_id, detections, gt boxes) triples
    steps: int = 0
    termination: str = None

    def pairs(self):
        return [(dets, gts) for _, dets, gts in self.frames]


def run_episode(cfg: EnvConfig, detector=None, policy=default_ego_policy,
                frame_sink=None, step_sink=None):
    """Run one seeded episode, applying the detector to every rendered frame.

    frame_sink(frame) fires for each rendered SensorFrame and step_sink(env,
    step_index) after each step; both exist so callers can stream artifacts
    to disk without buffering rasters in memory. Returns (EpisodeFrames,
    Environment).
    """
    env = Environment(cfg)
    obs = env.reset()
    collected = []
    last_frame_id = -1

    def grab(observation):
        nonlocal last_frame_id
        frame = observation.sensor_frame
        if frame is None or frame.frame_id == last_frame_id:
            return  # none rendered, or a stale observation after ego removal
        last_frame_id = frame.frame_id
        if detector is not None:
            gts = [box for _, box in frame.gt_boxes]
            collected.append((frame.frame_id, detector(frame), gts))
        if frame_sink is not None:
            frame_sink(frame)

    grab(obs)
    steps = 0
    while not env.terminated and steps < cfg.max_steps:
        result = env.step(policy(env))
        steps += 1
        if step_sink is not None:
            step_sink(env, steps)
        grab(result.observation)
    return EpisodeFrames(collected, steps, env.reason), env


def run_experiment(cfg: EnvConfig, runs: int, detector_factory, taus,
                   exporter=None) -> EvalReport:
    """Multi-run benchmark protocol: `runs` episodes with fresh seeds
    (base seed + run index), random ego each time, frames pooled across runs,
    micro-averaged threshold sweep.

    exporter(run, run_cfg), when given, returns a (frame_sink, step_sink,
    finalize) triple used to stream per-run artifacts; finalize(env, episode)
    fires after the run.
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    scenario = cfg.condition.lighting
    pooled = []
    per_run = []
    total_vehicles = 0
    seeds = []
    for run in range(runs):
        run_cfg = replace_seed(cfg, cfg.seed + run)
        seeds.append(run_cfg.seed)
        detector = detector_factory(run_cfg.seed)
        frame_sink = step_sink = finalize = None
        if exporter is not None:
            frame_sink, step_sink, finalize = exporter(run, run_cfg)
        episode, env = run_episode(run_cfg, detector, frame_sink=frame_sink,
                                   step_sink=step_sink)
        if finalize is not None:
            finalize(env, episode)
        total_vehicles += sum(rd.count for rd in run_cfg.demand.routes)
        pooled.extend(episode.frames)
        per_run.append((scenario, run,
                        sweep_thresholds(episode.pairs(), taus, scenario)))
    all_pairs = [(dets, gts) for _, dets, gts in pooled]
    report = EvalReport(sweep_thresholds(all_pairs, taus, scenario), per_run, {
        "scenario": scenario,
        "runs": runs,
        "seeds": seeds,
        "vehicles": total_vehicles,
        "frames": len(pooled),
        "gt_boxes": int(sum(len(g) for _, _, g in pooled)),
        "taus": list(taus),
    })
    return report


def replace_seed(cfg: EnvConfig, seed: int) -> EnvConfig:
    return replace(cfg, seed=seed, demand=replace(cfg.demand, seed=seed))


def merge_reports(reports) -> EvalReport:
    """Concatenate per-scenario reports into one multi-scenario report."""
    merged = EvalReport()
    for rep in reports:
        merged.rows.extend(rep.rows)
        merged.per_run.extend(rep.per_run)
        merged.meta[rep.meta.get("scenario", f"part{len(merged.meta)}")] = rep.meta
    return merged
