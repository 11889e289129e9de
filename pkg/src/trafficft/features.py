"""Per-timestep kinematic, interactive and map features of rollouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .world import DT, HEADING, SPEED, Rollout, Scenario, wrap_angle

DIM_NAMES = (
    "linear_speed",
    "linear_accel",
    "angular_speed",
    "angular_accel",
    "dist_to_nearest_agent",
    "time_to_collision",
    "collision_indicator",
    "dist_to_road_edge",
    "offroad_indicator",
)
COMPONENT_OF = {
    "linear_speed": "kinematic",
    "linear_accel": "kinematic",
    "angular_speed": "kinematic",
    "angular_accel": "kinematic",
    "dist_to_nearest_agent": "interactive",
    "time_to_collision": "interactive",
    "collision_indicator": "interactive",
    "dist_to_road_edge": "map",
    "offroad_indicator": "map",
}
TTC_CAP = 30.0
NO_NEIGHBOR_DISTANCE = 45.0
# Values saturate at these limits so every feature lies inside its default bin range.
FEATURE_RANGES = {
    "linear_speed": (0.0, 25.0),
    "linear_accel": (-5.25, 5.25),
    "angular_speed": (-1.05, 1.05),
    "angular_accel": (-3.15, 3.15),
    "dist_to_nearest_agent": (-5.0, NO_NEIGHBOR_DISTANCE),
    "time_to_collision": (0.0, TTC_CAP),
    "collision_indicator": (-0.5, 1.5),
    "dist_to_road_edge": (-6.0, 4.0),
    "offroad_indicator": (-0.5, 1.5),
}
_LOW = np.array([FEATURE_RANGES[n][0] for n in DIM_NAMES])
_HIGH = np.array([FEATURE_RANGES[n][1] for n in DIM_NAMES])
# Traffic-light violations are out of scope; the feature is the constant "no violation".
TRAFFIC_LIGHT_OK = 1.0


@dataclass
class FeatureTable:
    values: np.ndarray       # [R, A, T, D]
    validity: np.ndarray     # [A, T]
    dim_names: tuple[str, ...] = DIM_NAMES

    def __post_init__(self):
        if self.values.ndim == 3:
            self.values = self.values[None]
        if self.values.shape[1:3] != self.validity.shape:
            raise ValueError("validity must be [A, T] matching values [R, A, T, D]")
        if self.values.shape[-1] != len(self.dim_names):
            raise ValueError("dimension names do not match feature width")

    @property
    def num_rollouts(self) -> int:
        return self.values.shape[0]

    def dim(self, name: str) -> np.ndarray:
        return self.values[..., self.dim_names.index(name)]

    def to_csv(self, path) -> None:
        R, A, T, D = self.values.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rollout", "agent", "t", "dim", "value", "valid"])
            for r in range(R):
                for a in range(A):
                    for t in range(T):
                        for d in range(D):
                            w.writerow([r, a, t + 1, self.dim_names[d], repr(float(self.values[r, a, t, d])),
                                        int(self.validity[a, t])])


# --- pairwise geometry -------------------------------------------------------

def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]


def _axes(heading):
    return np.stack([np.cos(heading), np.sin(heading)], -1), np.stack([-np.sin(heading), np.cos(heading)], -1)


def capsule_distance(pos, heading, lengths, widths):
    """Signed pairwise gap between vehicle capsules, ``[..., A, A]``.

    Each vehicle is the set of points within ``width / sqrt(2)`` of its centre
    segment of half-length ``(length - width) / 2``; the capsule encloses the
    bounding box, so overlapping boxes always give a gap <= 0.
    """
    u, _ = _axes(heading)
    half = np.maximum(0.5 * (lengths - widths), 0.0)
    radius = widths / np.sqrt(2.0)
    p = pos - (half[..., None] * u)
    d = 2.0 * half[..., None] * u                      # segment direction vectors
    p1, d1 = p[..., :, None, :], d[..., :, None, :]
    p2, d2 = p[..., None, :, :], d[..., None, :, :]
    r = p1 - p2
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    c = _dot(d1, r)
    b = _dot(d1, d2)
    eps = 1e-12
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > eps, np.clip((b * f - c * e) / np.where(denom > eps, denom, 1.0), 0, 1), 0.0)
        s = np.where(a > eps, s, 0.0)
        t = np.where(e > eps, (b * s + f) / np.where(e > eps, e, 1.0), 0.0)
        s_lo = np.where(a > eps, np.clip(-c / np.where(a > eps, a, 1.0), 0, 1), 0.0)
        s_hi = np.where(a > eps, np.clip((b - c) / np.where(a > eps, a, 1.0), 0, 1), 0.0)
    s = np.where(t < 0, s_lo, np.where(t > 1, s_hi, s))
    t = np.clip(t, 0, 1)
    gap = (p1 + s[..., None] * d1) - (p2 + t[..., None] * d2)
    return np.linalg.norm(gap, axis=-1) - (radius[..., :, None] + radius[..., None, :])


def boxes_overlap(pos, heading, lengths, widths):
    """Pairwise oriented-bounding-box overlap by separating axes, ``[..., A, A]``."""
    u, n = _axes(heading)
    hl, hw = 0.5 * lengths, 0.5 * widths
    c = pos[..., :, None, :] - pos[..., None, :, :]
    ui, ni = u[..., :, None, :], n[..., :, None, :]
    uj, nj = u[..., None, :, :], n[..., None, :, :]
    overlap = np.ones(c.shape[:-1], bool)
    for k in (ui, ni, uj, nj):
        ri = hl[..., :, None] * np.abs(_dot(ui, k)) + hw[..., :, None] * np.abs(_dot(ni, k))
        rj = hl[..., None, :] * np.abs(_dot(uj, k)) + hw[..., None, :] * np.abs(_dot(nj, k))
        overlap &= np.abs(_dot(c, k)) < ri + rj
    return overlap


def in_path_gap(pos, heading, speed, lengths, widths):
    """Bumper gap and closing speed to every agent ahead in the lateral path.

    Returns ``(gap, closing, ahead)`` each ``[..., A, A]`` with row = ego.
    """
    u, n = _axes(heading)
    rel = pos[..., None, :, :] - pos[..., :, None, :]
    dx = _dot(rel, u[..., :, None, :])
    dy = _dot(rel, n[..., :, None, :])
    ahead = (dx > 0) & (np.abs(dy) < 0.5 * (widths[..., :, None] + widths[..., None, :]))
    gap = dx - 0.5 * (lengths[..., :, None] + lengths[..., None, :])
    other_along = speed[..., None, :] * np.cos(heading[..., None, :] - heading[..., :, None])
    closing = speed[..., :, None] - other_along
    return gap, closing, ahead


def time_to_collision(pos, heading, speed, lengths, widths, valid, cap: float = TTC_CAP):
    """Constant-velocity time until the ego closes the gap to an in-path agent, capped."""
    gap, closing, ahead = in_path_gap(pos, heading, speed, lengths, widths)
    A = pos.shape[-2]
    mask = ahead & valid[..., None, :] & ~np.eye(A, dtype=bool) & (closing > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(mask, np.maximum(gap, 0.0) / np.where(mask, closing, 1.0), np.inf)
    return np.minimum(ttc.min(axis=-1), cap)


def _pairwise_features(pos, heading, speed, lengths, widths, valid):
    A = pos.shape[-2]
    others = valid[..., None, :] & ~np.eye(A, dtype=bool)
    dist = capsule_distance(pos, heading, lengths, widths)
    nearest = np.where(others, dist, np.inf).min(axis=-1)
    nearest = np.where(np.isfinite(nearest), nearest, NO_NEIGHBOR_DISTANCE)
    collide = (boxes_overlap(pos, heading, lengths, widths) & others).any(axis=-1)
    ttc = time_to_collision(pos, heading, speed, lengths, widths, valid)
    return nearest, ttc, collide.astype(float)


# --- main extraction -----------------------------------------------------------

def _derivative(series, angular=False):
    """Backward difference per step; the first entry uses the forward difference."""
    d = np.diff(series, axis=1)
    if angular:
        d = wrap_angle(d)
    d = d / DT
    return np.concatenate([d[:, :1], d], axis=1)


def extract_batch(states: np.ndarray, scenario: Scenario, valid: np.ndarray | None = None) -> np.ndarray:
    """Feature values ``[R, A, T, D]`` for stacked rollout states ``[R, T+1, A, 4]``."""
    states = np.asarray(states, float)
    if states.ndim == 3:
        states = states[None]
    R, T1, A, _ = states.shape
    if A == 0:
        raise ValueError("empty agent set")
    T = T1 - 1
    if valid is None:
        valid = np.ones((T1, A), bool)
    H = scenario.history.shape[1]
    past = np.broadcast_to(scenario.history[:, :-1, :].transpose(1, 0, 2), (R, H - 1, A, 4))
    full = np.concatenate([past, states], axis=1)          # [R, H-1+T+1, A, 4]
    speed = full[..., SPEED]
    accel = _derivative(speed)
    ang = _derivative(full[..., HEADING], angular=True)
    ang_acc = _derivative(ang)
    fut = slice(H, H + T)                                   # t = 1..T

    st = states[:, 1:]                                      # [R, T, A, 4]
    pos, hd, sp = st[..., :2], st[..., HEADING], st[..., SPEED]
    v = np.broadcast_to(valid[1:], (R, T, A))
    lengths, widths = scenario.lengths, scenario.widths
    nearest, ttc, collide = _pairwise_features(pos, hd, sp, lengths, widths, v)

    lane = scenario.geometry.nearest(pos)
    edge = 0.5 * lane["lane_width"] - lane["distance"]
    out = np.stack([
        speed[:, fut], accel[:, fut], ang[:, fut], ang_acc[:, fut],
        nearest, ttc, collide,
        edge, (edge < 0).astype(float),
    ], axis=-1)                                             # [R, T, A, D]
    return np.clip(out, _LOW, _HIGH).transpose(0, 2, 1, 3)


def validity_set(scenario: Scenario) -> np.ndarray:
    """Mask ``[A, T]`` of evaluated agents at steps where they are valid."""
    if not scenario.eval_agent_ids:
        raise ValueError("scenario has no evaluation agents")
    T = scenario.horizon_T
    alive = scenario.expert.valid[1:].T if scenario.expert is not None else np.ones((scenario.num_agents, T), bool)
    return scenario.eval_mask[:, None] & alive


def extract_features(rollout: Rollout | list[Rollout], scenario: Scenario) -> FeatureTable:
    rollouts = [rollout] if isinstance(rollout, Rollout) else list(rollout)
    for r in rollouts:
        if r.states.shape[1] != scenario.num_agents or r.horizon != scenario.horizon_T:
            raise ValueError(f"rollout of {r.scenario_id} inconsistent with scenario {scenario.id}")
    states = np.stack([r.states for r in rollouts])
    return FeatureTable(extract_batch(states, scenario, rollouts[0].valid), validity_set(scenario))
