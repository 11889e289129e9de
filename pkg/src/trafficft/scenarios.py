"""Synthetic seed scenarios with a scripted lane-following expert."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .features import extract_batch
from .world import DT, HEADING, SPEED, MapPolyline, Rollout, Scenario, Vocabulary, step_arrays, wrap_angle

TEMPLATES = ("straight", "t_intersection", "curve")


@dataclass
class GeneratorConfig:
    counts: dict = field(default_factory=lambda: {"straight": 7, "t_intersection": 7, "curve": 6})
    min_agents: int = 2
    max_agents: int = 8
    horizon_T: int = 16
    history: int = 2
    lane_width: float = 4.0
    eval_fraction: float = 0.75

    def validate(self) -> None:
        unknown = set(self.counts) - set(TEMPLATES)
        if unknown:
            raise ValueError(f"unknown map templates: {sorted(unknown)}")
        if sum(self.counts.values()) < 1 or any(c < 0 for c in self.counts.values()):
            raise ValueError("template counts must be non-negative and not all zero")
        if not 1 <= self.min_agents <= self.max_agents:
            raise ValueError("need 1 <= min_agents <= max_agents")
        if self.horizon_T < 1:
            raise ValueError("horizon_T must be >= 1")
        if self.history < 1:
            raise ValueError("history must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _line(p0, p1, spacing=4.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / spacing)) + 1)
    return np.linspace(p0, p1, n)


def _arc(center, radius, a0, a1, spacing=3.0):
    n = max(3, int(np.ceil(abs(a1 - a0) * radius / spacing)) + 1)
    a = np.linspace(a0, a1, n)
    return np.asarray(center) + radius * np.stack([np.cos(a), np.sin(a)], -1)


def _join(*parts):
    pts = [parts[0]]
    for p in parts[1:]:
        pts.append(p[1:] if np.allclose(p[0], pts[-1][-1]) else p)
    return np.concatenate(pts)


def _layout(template: str, lane_width: float):
    """Map polylines and candidate routes as ``(polylines, routes)``.

    A route is ``(points, start_arc_range)`` along which agents are placed.
    """
    w = lane_width
    if template == "straight":
        lanes = [_line((-30, 0), (260, 0)), _line((-30, w), (260, w))]
        polys = [MapPolyline(i, p, w) for i, p in enumerate(lanes)]
        routes = [(lanes[0], (30.0, 110.0)), (lanes[1], (30.0, 110.0))]
    elif template == "curve":
        lanes = []
        for r in (60.0, 60.0 + w):
            lead = _line((-40, -r), (0, -r))
            arc = _arc((0, 0), r, -np.pi / 2, -np.pi / 2 + 2.6)
            end = arc[-1]
            tangent = np.array([-np.sin(-np.pi / 2 + 2.6), np.cos(-np.pi / 2 + 2.6)])
            lanes.append(_join(lead, arc, _line(end, end + 80 * tangent)))
        polys = [MapPolyline(i, p, w) for i, p in enumerate(lanes)]
        routes = [(lanes[0], (10.0, 90.0)), (lanes[1], (10.0, 90.0))]
    elif template == "t_intersection":
        r = 20.0
        main = _line((-140, 0), (220, 0))
        side = _line((-140, -w), (220, -w))
        connector = _arc((16, r), r, -np.pi / 2, 0.0, spacing=2.0)
        branch = _line((16 + r, r), (16 + r, 240))
        polys = [MapPolyline(0, main, w), MapPolyline(1, connector, w), MapPolyline(2, branch, w),
                 MapPolyline(3, side, w)]
        turn = _join(_line((-140, 0), (16, 0)), connector, branch)
        routes = [(main, (30.0, 120.0)), (turn, (90.0, 140.0)), (side, (30.0, 120.0))]
    else:
        raise ValueError(f"unknown template {template!r}")
    return polys, routes


class _Route:
    def __init__(self, points):
        self.points = points
        seg = np.diff(points, axis=0)
        self.seg = seg
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])

    def project(self, p) -> float:
        rel = p - self.points[:-1]
        u = np.clip(np.einsum("si,si->s", rel, self.seg) / self.seg_len ** 2, 0, 1)
        d = np.linalg.norm(rel - u[:, None] * self.seg, axis=1)
        i = int(np.argmin(d))
        return float(self.s[i] + u[i] * self.seg_len[i])

    def point(self, s: float):
        s = float(np.clip(s, 0, self.s[-1]))
        i = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg) - 1))
        u = (s - self.s[i]) / self.seg_len[i]
        return self.points[i] + u * self.seg[i], float(np.arctan2(self.seg[i, 1], self.seg[i, 0]))


def expert_rollout(scenario_id: str, init: np.ndarray, routes: list[_Route], targets: np.ndarray,
                   lengths: np.ndarray, widths: np.ndarray, T: int, vocab: Vocabulary) -> Rollout:
    """Pure-pursuit lane follower with gap keeping, executed through the token grid."""
    from .features import in_path_gap

    A = len(init)
    states = np.empty((T + 1, A, 4))
    tokens = np.empty((T, A), np.int64)
    states[0] = init
    for t in range(T):
        cur = states[t]
        gap, _, ahead = in_path_gap(cur[:, :2], cur[:, HEADING], cur[:, SPEED], lengths, widths)
        ahead &= ~np.eye(A, dtype=bool)
        ds = np.empty(A)
        dh = np.empty(A)
        for a in range(A):
            v = cur[a, SPEED]
            desired = targets[a]
            if ahead[a].any():
                j = int(np.argmin(np.where(ahead[a], gap[a], np.inf)))
                safe = 4.0 + 1.2 * v
                if gap[a, j] < safe:
                    lead_v = cur[j, SPEED] * np.cos(cur[j, HEADING] - cur[a, HEADING])
                    desired = max(0.0, min(desired, lead_v - (safe - gap[a, j]) / 2.0))
            ds[a] = np.clip(desired - v, -2.0, 2.0)
            route = routes[a]
            s = route.project(cur[a, :2])
            look = max(5.0, 1.2 * v + 3.0)
            target, _ = route.point(s + look)
            bearing = np.arctan2(target[1] - cur[a, 1], target[0] - cur[a, 0])
            dh[a] = np.clip(0.8 * wrap_angle(bearing - cur[a, HEADING]), -0.3, 0.3)
        tok = vocab.nearest(ds, dh)
        tokens[t] = tok
        states[t + 1] = step_arrays(cur, vocab.delta_speed[tok], vocab.delta_heading[tok])
    return Rollout(scenario_id, states, tokens, np.zeros((T, A)))


def _place_agents(rng, routes, n_agents, lane_width):
    """Pick a route and start arc per agent, keeping 12 m spacing on a route."""
    by_route: dict[int, list[float]] = {}
    picks = []
    for _ in range(n_agents):
        for _attempt in range(100):
            r = int(rng.integers(len(routes)))
            lo, hi = routes[r][1]
            s = float(rng.uniform(lo, hi))
            taken = by_route.get(r, []) + [x for k, v in by_route.items() if k != r for x in v
                                            if np.allclose(routes[k][0][0], routes[r][0][0])]
            if all(abs(s - x) >= 12.0 for x in taken):
                by_route.setdefault(r, []).append(s)
                picks.append((r, s))
                break
        else:
            return None
    return picks


def _make_scenario(rng, template: str, sid: str, cfg: GeneratorConfig, vocab: Vocabulary) -> Scenario | None:
    polys, routes = _layout(template, cfg.lane_width)
    A = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
    picks = _place_agents(rng, routes, A, cfg.lane_width)
    if picks is None:
        return None
    lengths = rng.uniform(4.0, 5.0, A)
    widths = rng.uniform(1.8, 2.1, A)
    init = np.empty((A, 4))
    agent_routes = []
    for a, (r, s) in enumerate(picks):
        route = _Route(routes[r][0])
        p, h = route.point(s)
        normal = np.array([-np.sin(h), np.cos(h)])
        p = p + normal * rng.uniform(-0.2, 0.2) * cfg.lane_width
        init[a] = (p[0], p[1], wrap_angle(h + rng.uniform(-0.08, 0.08)), rng.uniform(5.0, 10.0))
        agent_routes.append(route)
    targets = rng.uniform(6.0, 11.0, A)
    H = cfg.history
    history = np.empty((A, H, 4))
    for k in range(H):
        back = (H - 1 - k) * DT * init[:, SPEED]
        history[:, k] = init
        history[:, k, 0] -= back * np.cos(init[:, HEADING])
        history[:, k, 1] -= back * np.sin(init[:, HEADING])
    ids = list(range(A))
    eval_ids = [0] + [a for a in ids[1:] if rng.random() < cfg.eval_fraction]
    expert = expert_rollout(sid, init, agent_routes, targets, lengths, widths, cfg.horizon_T, vocab)
    sc = Scenario(sid, polys, ids, history, lengths, widths, cfg.horizon_T, eval_ids, expert=expert)
    feats = extract_batch(expert.states, sc)[0]
    if feats[..., 8].any() or feats[..., 6].any():
        return None                       # reject off-road or colliding experts
    sc.goals = {a: tuple(map(float, expert.states[-1, a, :2])) for a in eval_ids}
    return sc


def generate_scenarios(config: GeneratorConfig | None = None, seed: int = 0,
                       vocab: Vocabulary | None = None) -> list[Scenario]:
    """Deterministic list of scenarios; templates appear in a seed-shuffled order."""
    config = config or GeneratorConfig()
    config.validate()
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(seed)
    order = [t for t in TEMPLATES for _ in range(config.counts.get(t, 0))]
    order = [order[i] for i in rng.permutation(len(order))]
    out = []
    for i, template in enumerate(order):
        sid = f"{template}-{seed}-{i:04d}"
        for _attempt in range(200):
            sc = _make_scenario(rng, template, sid, config, vocab)
            if sc is not None:
                out.append(sc)
                break
        else:
            raise RuntimeError(f"could not build a valid {template} scenario")
    return out
