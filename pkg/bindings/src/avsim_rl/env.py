"""Gym-style environment wrapper around the avsim core.

Observations are flat float64 vectors with a fixed, documented layout:

    [0:4]          ego s, d, v, lane
    [4:4+4K]       K neighbor blocks of (rel_s, rel_d, v, lane), nearest first
    [4+4K:4+5K]    K presence flags (1.0 = slot holds a real neighbor)

Absent neighbor slots carry zeros with a zero presence flag. Actions are
(a_long, a_lat) in m/s^2, clamped by the core to the configured bounds.
Reward is the ego's longitudinal progress per step, replaced by -100 on a
collision; reaching the step budget truncates instead of terminating.

Episodes driven through this wrapper are bit-equivalent to core CLI episodes
for identical config/seed/actions: the wrapper delegates to the same
Environment and serializes logs with the core's own writer.
"""

from dataclasses import dataclass

import numpy as np

from avsim.env import Action, Environment, load_env_config
from avsim.errors import ProtocolError
from avsim.evaluation import replace_seed
from avsim.io_formats import write_jsonl

COLLISION_REWARD = -100.0


@dataclass(frozen=True)
class Box:
    """Minimal continuous-space descriptor (low/high per component)."""
    low: np.ndarray
    high: np.ndarray

    @property
    def shape(self):
        return self.low.shape

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.low.shape and \
            bool(np.all(x >= self.low) and np.all(x <= self.high))


class TrafficEnv:
    """One core environment per instance; reset/step are sequential."""

    def __init__(self, config_path):
        self.cfg = load_env_config(config_path)
        k = self.cfg.k_neighbors
        self._obs_len = 4 + 5 * k
        big = np.inf
        self.observation_space = Box(np.full(self._obs_len, -big),
                                     np.full(self._obs_len, big))
        self.action_space = Box(
            np.array([-self.cfg.a_long_max, -self.cfg.a_lat_max]),
            np.array([self.cfg.a_long_max, self.cfg.a_lat_max]))
        self._env = None

    # -- RL API ---------------------------------------------------------------

    def reset(self, seed=None) -> np.ndarray:
        cfg = self.cfg if seed is None else replace_seed(self.cfg, seed)
        self._env = Environment(cfg)
        obs = self._env.reset()
        return self._vector(obs)

    def step(self, action):
        if self._env is None:
            raise ProtocolError("step called before reset")
        a = np.asarray(action, dtype=float).reshape(2)
        result = self._env.step(Action(float(a[0]), float(a[1])))
        terminated = result.terminated and result.reason != "max_steps"
        truncated = result.terminated and result.reason == "max_steps"
        reward = float(result.info.get("ego_ds", 0.0))
        if result.reason == "collision":
            reward = COLLISION_REWARD
        info = {
            "reason": result.reason,
            "time": result.info.get("time"),
            "collision_pairs": result.info.get("collision_pairs", []),
        }
        return (self._vector(result.observation), reward, terminated,
                truncated, info)

    def close(self):
        self._env = None

    # -- extras -----------------------------------------------------------------

    def sensor_frame(self):
        """Latest rendered frame as ((N, 4) points, (M, 4) gt boxes), or None
        when sensors are disabled or no frame has been rendered."""
        if self._env is None:
            return None
        obs = self._env.observe()
        frame = obs.sensor_frame
        if frame is None:
            return None
        scan = frame.points
        points = np.column_stack([scan.xyz, scan.intensity])
        boxes = np.array([[b.x_min, b.y_min, b.x_max, b.y_max]
                          for _, b in frame.gt_boxes], dtype=float)
        boxes = boxes.reshape(-1, 4)
        return points, boxes

    def episode_records(self):
        if self._env is None:
            raise ProtocolError("no episode has been started")
        return self._env.episode_records()

    def write_episode_log(self, path):
        """Serialize the episode with the core writer (bit-equivalence hook)."""
        write_jsonl(path, self.episode_records())

    # -- internals ---------------------------------------------------------------

    def _vector(self, obs) -> np.ndarray:
        k = self.cfg.k_neighbors
        vec = np.zeros(self._obs_len)
        vec[0:4] = (obs.ego.s, obs.ego.d, obs.ego.v, float(obs.ego.lane))
        for i, n in enumerate(obs.neighbors[:k]):
            if not n.present:
                continue
            base = 4 + 4 * i
            vec[base:base + 4] = (n.rel_s, n.rel_d, n.v, float(n.lane))
            vec[4 + 4 * k + i] = 1.0
        return vec
