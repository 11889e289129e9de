"""Toy driving world: maps, agents, motion tokens, scenarios and rollouts.

Agent states are stored as float arrays with the column layout
``(x, y, heading, speed)``; the dataclasses below are the per-item views used
at API boundaries and in the JSON-lines files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DT = 0.5
X, Y, HEADING, SPEED = range(4)

DEFAULT_SPEED_DELTAS = (-2.0, -1.0, 0.0, 1.0, 2.0)
DEFAULT_HEADING_DELTAS = (-0.3, -0.15, 0.0, 0.15, 0.3)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class MapPolyline:
    id: int
    points: np.ndarray
    lane_width: float = 4.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"polyline {self.id}: need at least 2 points of shape (P, 2)")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ValueError(f"polyline {self.id}: consecutive points must be distinct")
        if not 0 < self.lane_width <= 20:
            raise ValueError(f"polyline {self.id}: lane_width must lie in (0, 20]")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 2.0
    valid: bool = True

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("length and width must be positive")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])


@dataclass(frozen=True)
class MotionToken:
    token_id: int
    delta_speed: float
    delta_heading: float
    duration: float = DT


@dataclass(frozen=True)
class Vocabulary:
    """Cross product of speed and heading delta grids; speed is the major axis."""

    speed_deltas: tuple[float, ...] = DEFAULT_SPEED_DELTAS
    heading_deltas: tuple[float, ...] = DEFAULT_HEADING_DELTAS

    @property
    def size(self) -> int:
        return len(self.speed_deltas) * len(self.heading_deltas)

    @cached_property
    def delta_speed(self) -> np.ndarray:
        return np.repeat(np.asarray(self.speed_deltas, float), len(self.heading_deltas))

    @cached_property
    def delta_heading(self) -> np.ndarray:
        return np.tile(np.asarray(self.heading_deltas, float), len(self.speed_deltas))

    def token(self, token_id: int) -> MotionToken:
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")
        return MotionToken(int(token_id), float(self.delta_speed[token_id]),
                           float(self.delta_heading[token_id]))

    def nearest(self, delta_speed, delta_heading):
        """Token ids closest to continuous deltas, each grid snapped independently."""
        ds = np.asarray(delta_speed, float)[..., None]
        dh = np.asarray(delta_heading, float)[..., None]
        i = np.argmin(np.abs(ds - np.asarray(self.speed_deltas)), axis=-1)
        j = np.argmin(np.abs(dh - np.asarray(self.heading_deltas)), axis=-1)
        return i * len(self.heading_deltas) + j


def step_kinematics(state: AgentState, token: MotionToken, dt: float = DT) -> AgentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not state.valid:
        raise ValueError("cannot step an invalid agent")
    out = step_arrays(state.as_array(), np.array(token.delta_speed), np.array(token.delta_heading), dt)
    return AgentState(*out.tolist(), length=state.length, width=state.width)


def step_arrays(states: np.ndarray, delta_speed, delta_heading, dt: float = DT) -> np.ndarray:
    """Vectorised kinematic step over ``states[..., 4]``.

    The new speed is clamped at zero and the position advances along the mean
    of the old and new heading at the mean of the old and new speed.
    """
    heading, speed = states[..., HEADING], states[..., SPEED]
    new_speed = np.maximum(0.0, speed + delta_speed)
    raw_heading = heading + delta_heading
    mid_heading = heading + 0.5 * np.asarray(delta_heading)
    dist = 0.5 * (speed + new_speed) * dt
    out = np.empty(np.broadcast_shapes(states.shape, np.shape(delta_speed) + (4,)))
    out[..., X] = states[..., X] + dist * np.cos(mid_heading)
    out[..., Y] = states[..., Y] + dist * np.sin(mid_heading)
    out[..., HEADING] = wrap_angle(raw_heading)
    out[..., SPEED] = new_speed
    return out


@dataclass
class Rollout:
    scenario_id: str
    states: np.ndarray          # [T+1, A, 4]
    tokens: np.ndarray          # [T, A]
    logprobs: np.ndarray        # [T, A]
    rng_seed: int = 0
    valid: np.ndarray | None = None  # [T+1, A]

    def __post_init__(self):
        self.states = np.asarray(self.states, float)
        self.tokens = np.asarray(self.tokens, np.int64)
        self.logprobs = np.asarray(self.logprobs, float)
        if self.valid is None:
            self.valid = np.ones(self.states.shape[:2], bool)
        self.valid = np.asarray(self.valid, bool)
        if self.tokens.shape != (self.states.shape[0] - 1, self.states.shape[1]):
            raise ValueError("tokens must have shape [T, A] matching states [T+1, A, 4]")

    @property
    def horizon(self) -> int:
        return self.tokens.shape[0]

    def agent_state(self, t: int, a: int, length: float = 4.5, width: float = 2.0) -> AgentState:
        x, y, h, v = self.states[t, a]
        return AgentState(x, y, h, v, length, width, bool(self.valid[t, a]))

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "states": self.states.tolist(),
            "tokens": self.tokens.tolist(),
            "logprobs": self.logprobs.tolist(),
            "rng_seed": int(self.rng_seed),
            "valid": self.valid.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Rollout":
        return cls(d["scenario_id"], np.array(d["states"], float), np.array(d["tokens"], np.int64),
                   np.array(d["logprobs"], float), int(d.get("rng_seed", 0)),
                   np.array(d["valid"], bool) if "valid" in d else None)


class MapGeometry:
    """Segment-level view of a map for vectorised nearest-lane queries."""

    LOOKAHEAD = 8.0
    CHUNK = 2048

    def __init__(self, polylines: Sequence[MapPolyline]):
        if not polylines:
            raise ValueError("map needs at least one polyline")
        polylines = sorted(polylines, key=lambda p: p.id)
        starts, ends, pid, width, ahead = [], [], [], [], []
        pts, pts_id = [], []
        for pl in polylines:
            p = pl.points
            seg = np.diff(p, axis=0)
            heading = np.arctan2(seg[:, 1], seg[:, 0])
            s0 = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])[:-1]
            idx = np.searchsorted(s0, s0 + self.LOOKAHEAD, side="right") - 1
            starts.append(p[:-1])
            ends.append(p[1:])
            pid.append(np.full(len(seg), pl.id))
            width.append(np.full(len(seg), pl.lane_width))
            ahead.append(heading[np.minimum(idx, len(seg) - 1)])
            pts.append(p)
            pts_id.append(np.full(len(p), pl.id))
        self.start = np.concatenate(starts)
        self.end = np.concatenate(ends)
        self.vec = self.end - self.start
        self.len2 = np.einsum("si,si->s", self.vec, self.vec)
        self.heading = np.arctan2(self.vec[:, 1], self.vec[:, 0])
        self.polyline_id = np.concatenate(pid)
        self.lane_width = np.concatenate(width)
        self.ahead_heading = np.concatenate(ahead)
        self.points = np.concatenate(pts)
        self.point_polyline = np.concatenate(pts_id)

    def nearest(self, pos: np.ndarray) -> dict:
        """Nearest segment for each position in ``pos[..., 2]``.

        Returns segment index, unsigned distance, signed lateral offset (left of
        the lane direction is positive), polyline id, lane width and tangent.
        """
        pos = np.asarray(pos, float)
        flat = pos.reshape(-1, 2)
        seg = np.empty(len(flat), np.int64)
        dist = np.empty(len(flat))
        cross = np.empty(len(flat))
        sx, sy = self.start[:, 0], self.start[:, 1]
        vx, vy = self.vec[:, 0], self.vec[:, 1]
        for lo in range(0, len(flat), self.CHUNK):
            px = flat[lo:lo + self.CHUNK, :1]
            py = flat[lo:lo + self.CHUNK, 1:]
            rx, ry = px - sx, py - sy
            u = np.clip((rx * vx + ry * vy) / self.len2, 0.0, 1.0)
            dx, dy = rx - u * vx, ry - u * vy
            d2 = dx * dx + dy * dy
            k = np.argmin(d2, axis=-1)
            rows = np.arange(len(k))
            seg[lo:lo + len(k)] = k
            dist[lo:lo + len(k)] = np.sqrt(d2[rows, k])
            cross[lo:lo + len(k)] = vx[k] * ry[rows, k] - vy[k] * rx[rows, k]
        shape = pos.shape[:-1]
        seg, dist, cross = seg.reshape(shape), dist.reshape(shape), cross.reshape(shape)
        return {
            "segment": seg,
            "distance": dist,
            "lateral": np.where(cross >= 0, dist, -dist),
            "polyline": self.polyline_id[seg],
            "lane_width": self.lane_width[seg],
            "heading": self.heading[seg],
            "ahead_heading": self.ahead_heading[seg],
        }

    def goal_polyline(self, goal) -> tuple[int, float]:
        """Polyline owning the map point nearest ``goal``; ties go to the lowest id."""
        d = np.linalg.norm(self.points - np.asarray(goal, float), axis=1)
        best = d.min()
        ids = self.point_polyline[d == best]
        return int(ids.min()), float(best)


@dataclass
class Scenario:
    id: str
    map: list[MapPolyline]
    agent_ids: list[int]
    history: np.ndarray          # [A, H, 4]
    lengths: np.ndarray          # [A]
    widths: np.ndarray           # [A]
    horizon_T: int
    eval_agent_ids: list[int]
    goals: dict[int, tuple[float, float]] = field(default_factory=dict)
    expert: Rollout | None = None

    def __post_init__(self):
        self.history = np.asarray(self.history, float)
        self.lengths = np.asarray(self.lengths, float)
        self.widths = np.asarray(self.widths, float)
        if not self.agent_ids:
            raise ValueError(f"scenario {self.id}: no agents")
        if self.horizon_T < 1:
            raise ValueError(f"scenario {self.id}: horizon_T must be >= 1")
        if not set(self.eval_agent_ids) <= set(self.agent_ids):
            raise ValueError(f"scenario {self.id}: eval agents must be a subset of agents")
        if not set(self.goals) <= set(self.agent_ids):
            raise ValueError(f"scenario {self.id}: goal keys must be agent ids")
        if self.history.shape[:1] != (len(self.agent_ids),) or self.history.shape[-1] != 4:
            raise ValueError(f"scenario {self.id}: history must be [A, H, 4]")

    @property
    def num_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def initial_states(self) -> np.ndarray:
        return self.history[:, -1, :]

    @cached_property
    def geometry(self) -> MapGeometry:
        return MapGeometry(self.map)

    def agent_index(self, agent_id: int) -> int:
        return self.agent_ids.index(agent_id)

    @property
    def eval_mask(self) -> np.ndarray:
        ids = set(self.eval_agent_ids)
        return np.array([a in ids for a in self.agent_ids])

    def goal_array(self, goals: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Goals as ``([A, 2] coordinates, [A] mask)``; agents without a goal get zeros."""
        goals = self.goals if goals is None else goals
        xy = np.zeros((self.num_agents, 2))
        mask = np.zeros(self.num_agents, bool)
        for aid, g in goals.items():
            i = self.agent_index(int(aid))
            xy[i] = g
            mask[i] = True
        return xy, mask

    def with_goals(self, goals: dict) -> "Scenario":
        return Scenario(self.id, self.map, self.agent_ids, self.history, self.lengths, self.widths,
                        self.horizon_T, self.eval_agent_ids, dict(goals), self.expert)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "map": [{"id": p.id, "points": p.points.tolist(), "lane_width": p.lane_width} for p in self.map],
            "agents": [
                {
                    "id": aid,
                    "history": [dict(zip(("x", "y", "heading", "speed"), s)) for s in self.history[i].tolist()],
                    "length": float(self.lengths[i]),
                    "width": float(self.widths[i]),
                }
                for i, aid in enumerate(self.agent_ids)
            ],
            "goals": {str(k): list(map(float, v)) for k, v in self.goals.items()},
            "horizon_T": self.horizon_T,
            "eval_agent_ids": list(self.eval_agent_ids),
        }
        if self.expert is not None:
            d["expert"] = {"states": self.expert.states.tolist(), "tokens": self.expert.tokens.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        agents = d["agents"]
        history = np.array([[[s["x"], s["y"], s["heading"], s["speed"]] for s in a["history"]] for a in agents])
        sc = cls(
            id=str(d["id"]),
            map=[MapPolyline(int(p["id"]), np.array(p["points"], float), float(p["lane_width"])) for p in d["map"]],
            agent_ids=[int(a["id"]) for a in agents],
            history=history,
            lengths=np.array([a.get("length", 4.5) for a in agents]),
            widths=np.array([a.get("width", 2.0) for a in agents]),
            horizon_T=int(d["horizon_T"]),
            eval_agent_ids=[int(a) for a in d["eval_agent_ids"]],
            goals={int(k): (float(v[0]), float(v[1])) for k, v in (d.get("goals") or {}).items()},
        )
        if "expert" in d:
            ex = d["expert"]
            T, A = len(ex["tokens"]), len(agents)
            sc.expert = Rollout(sc.id, np.array(ex["states"], float), np.array(ex["tokens"], np.int64),
                                np.zeros((T, A)))
        return sc


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_scenarios(path, scenarios: Sequence[Scenario]) -> None:
    write_jsonl(path, (s.to_dict() for s in scenarios))


def load_scenarios(path) -> list[Scenario]:
    return [Scenario.from_dict(d) for d in read_jsonl(path)]


def save_rollouts(path, rollouts: Sequence[Rollout]) -> None:
    write_jsonl(path, (r.to_dict() for r in rollouts))


def load_rollouts(path) -> list[Rollout]:
    return [Rollout.from_dict(d) for d in read_jsonl(path)]
