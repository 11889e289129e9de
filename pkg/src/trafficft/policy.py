"""Linear-softmax policy over the motion-token vocabulary.

One parameter matrix ``theta[F, V]`` is shared by all agents; logits are
``features @ theta``.  Gradients are analytic, so every quantity here has a
closed form that tests can check against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import in_path_gap
from .world import HEADING, SPEED, MapGeometry, Vocabulary, wrap_angle

FEATURE_NAMES = (
    "bias", "speed", "prev_accel", "neighbor_dx", "neighbor_dy", "leader_closeness",
    "lane_offset", "heading_error", "lane_curvature",
    "goal_range", "goal_bearing", "goal_polyline_flag",
)
FEATURE_DIM = len(FEATURE_NAMES)
GOAL_SLICE = slice(9, 12)
GOAL_MODES = ("none", "concat", "indication")


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    version: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, float)
        if theta.ndim != 2:
            raise ValueError("theta must be a [feature_dim, vocab] matrix")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, feature_dim: int = FEATURE_DIM, vocab_size: int = 25) -> "PolicyParams":
        return cls(np.zeros((feature_dim, vocab_size)))

    @property
    def feature_dim(self) -> int:
        return self.theta.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.theta.shape[1]

    def updated(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.version + 1)

    def to_dict(self) -> dict:
        return {"version": self.version, "feature_dim": self.feature_dim, "vocab_size": self.vocab_size,
                "theta": self.theta.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        theta = np.array(d["theta"], float).reshape(d["feature_dim"], d["vocab_size"])
        return cls(theta, int(d["version"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PolicyHandle:
    """Parameters plus the goal representation the featurizer uses."""

    params: PolicyParams
    goal_mode: str = "none"
    vocab: Vocabulary = field(default_factory=Vocabulary)

    def __post_init__(self):
        if self.goal_mode not in GOAL_MODES:
            raise ValueError(f"goal_mode must be one of {GOAL_MODES}")
        if self.params.vocab_size != self.vocab.size:
            raise ValueError(f"policy has {self.params.vocab_size} outputs but vocabulary has {self.vocab.size}")
        if self.params.feature_dim != FEATURE_DIM:
            raise ValueError(f"policy expects {self.params.feature_dim} features, featurizer gives {FEATURE_DIM}")


@dataclass
class GoalContext:
    xy: np.ndarray          # [A, 2]
    mask: np.ndarray        # [A]
    polyline: np.ndarray    # [A] goal polyline id, -1 if no goal

    @classmethod
    def build(cls, geometry: MapGeometry, xy: np.ndarray, mask: np.ndarray) -> "GoalContext":
        poly = np.array([geometry.goal_polyline(g)[0] if m else -1 for g, m in zip(xy, mask)], np.int64)
        return cls(np.asarray(xy, float), np.asarray(mask, bool), poly)

    @classmethod
    def empty(cls, num_agents: int) -> "GoalContext":
        return cls(np.zeros((num_agents, 2)), np.zeros(num_agents, bool), np.full(num_agents, -1))


def featurize(states, prev_speed, geometry: MapGeometry, lengths, widths, valid=None,
              goals: GoalContext | None = None, goal_mode: str = "none") -> np.ndarray:
    """Policy inputs ``[..., A, F]`` for agent states ``[..., A, 4]``."""
    states = np.asarray(states, float)
    pos, heading, speed = states[..., :2], states[..., HEADING], states[..., SPEED]
    A = states.shape[-2]
    lead = states.shape[:-1]
    if valid is None:
        valid = np.ones(lead, bool)
    valid = np.broadcast_to(valid, lead)
    f = np.zeros(lead + (FEATURE_DIM,))
    f[..., 0] = 1.0
    f[..., 1] = speed / 10.0
    f[..., 2] = (speed - prev_speed) / 2.0

    cos, sin = np.cos(heading), np.sin(heading)
    rel = pos[..., None, :, :] - pos[..., :, None, :]
    others = valid[..., None, :] & ~np.eye(A, dtype=bool)
    d2 = np.where(others, np.sum(rel * rel, -1), np.inf)
    j = np.argmin(d2, axis=-1)
    has = np.isfinite(np.take_along_axis(d2, j[..., None], -1)[..., 0])
    r = np.take_along_axis(rel, j[..., None, None], -2)[..., 0, :]
    dx = r[..., 0] * cos + r[..., 1] * sin
    dy = -r[..., 0] * sin + r[..., 1] * cos
    f[..., 3] = np.where(has, np.clip(dx / 20.0, -2, 2), 2.0)
    f[..., 4] = np.where(has, np.clip(dy / 20.0, -2, 2), 0.0)
    gap, _, ahead = in_path_gap(pos, heading, speed, lengths, widths)
    gap = np.where(ahead & others, gap, np.inf).min(axis=-1)
    f[..., 5] = np.clip(1.0 - gap / 30.0, 0.0, 1.0)

    lane = geometry.nearest(pos)
    f[..., 6] = np.clip(lane["lateral"] / (0.5 * lane["lane_width"]), -3, 3)
    f[..., 7] = wrap_angle(heading - lane["heading"])
    f[..., 8] = wrap_angle(lane["ahead_heading"] - lane["heading"])

    if goals is not None and goal_mode != "none":
        g = goals.mask
        if goal_mode == "concat":
            to_goal = goals.xy - pos
            rng = np.linalg.norm(to_goal, axis=-1)
            bearing = np.where(rng > 0, wrap_angle(np.arctan2(to_goal[..., 1], to_goal[..., 0]) - heading), 0.0)
            f[..., 9] = np.where(g, np.minimum(rng / 50.0, 2.0), 0.0)
            f[..., 10] = np.where(g, bearing / np.pi, 0.0)
        elif goal_mode == "indication":
            f[..., 11] = np.where(g & (lane["polyline"] == goals.polyline), 1.0, 0.0)
        else:
            raise ValueError(f"unknown goal mode {goal_mode!r}")
    return f


# --- distributions ---------------------------------------------------------------

def logits(theta, features):
    z = np.asarray(features) @ theta
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    return z


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def probabilities(theta, features, temperature: float = 1.0, top_k: int | None = None):
    return np.exp(sampling_log_probs(theta, features, temperature, top_k))


def sampling_log_probs(theta, features, temperature: float = 1.0, top_k: int | None = None):
    """Log-probabilities of temperature sampling restricted to the ``top_k`` logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = logits(theta, features) / temperature
    V = z.shape[-1]
    if top_k is not None and top_k < V:
        order = np.argsort(-z, axis=-1, kind="stable")
        drop = np.zeros(z.shape, bool)
        np.put_along_axis(drop, order[..., top_k:], True, axis=-1)
        z = np.where(drop, -np.inf, z)
    with np.errstate(invalid="ignore"):
        return log_softmax(z)


def sample_tokens(log_p, uniforms):
    """Inverse-CDF draw of one token per row from ``uniforms`` in [0, 1)."""
    cdf = np.cumsum(np.exp(log_p), axis=-1)
    tok = (cdf <= uniforms[..., None]).sum(axis=-1)
    tok = np.minimum(tok, log_p.shape[-1] - 1)
    # guard against rounding landing on a zero-probability token
    bad = ~np.isfinite(np.take_along_axis(log_p, tok[..., None], -1)[..., 0])
    if bad.any():
        tok = np.where(bad, np.argmax(log_p, axis=-1), tok)
    return tok


def log_prob_and_grad(params: PolicyParams | np.ndarray, features, token_id: int):
    """Log-probability of ``token_id`` and its gradient ``features ⊗ (onehot - softmax)``."""
    theta = params.theta if isinstance(params, PolicyParams) else np.asarray(params)
    features = np.asarray(features, float)
    if not 0 <= token_id < theta.shape[1]:
        raise ValueError(f"token {token_id} outside vocabulary")
    lp = log_softmax(logits(theta, features))
    p = np.exp(lp)
    onehot = np.zeros_like(p)
    onehot[token_id] = 1.0
    return float(lp[token_id]), np.outer(features, onehot - p)


def score_gradients(theta, features, tokens, weights=None):
    """``sum_j w_j * d log pi(token_j | features_j) / d theta`` over leading axes.

    ``features[..., F]``, ``tokens[...]`` and optional ``weights[...]``.
    """
    features = np.asarray(features, float)
    resid = -np.exp(log_softmax(logits(theta, features)))
    onehot = np.zeros_like(resid)
    np.put_along_axis(onehot, np.asarray(tokens)[..., None], 1.0, axis=-1)
    resid += onehot
    if weights is not None:
        resid = resid * np.asarray(weights)[..., None]
    F, V = theta.shape
    return features.reshape(-1, F).T @ resid.reshape(-1, V)


def token_log_probs(theta, features, tokens):
    lp = log_softmax(logits(theta, features))
    return np.take_along_axis(lp, np.asarray(tokens)[..., None], -1)[..., 0]


def categorical_kl(log_p, log_q):
    """``KL(p || q)`` along the last axis for log-probability arrays."""
    p = np.exp(log_p)
    return np.sum(np.where(p > 0, p * (log_p - log_q), 0.0), axis=-1)


def kl_to_reference(params: PolicyParams, reference: PolicyParams, features) -> float:
    """Mean categorical KL(policy || reference) over the rows of ``features``."""
    features = np.asarray(features, float)
    lp = log_softmax(logits(params.theta, features))
    lq = log_softmax(logits(reference.theta, features))
    return float(np.mean(np.maximum(categorical_kl(lp, lq), 0.0)))


def kl_and_grad(theta, ref_theta, features):
    """Mean KL(policy || reference) over rows and its exact gradient w.r.t. ``theta``."""
    F, V = theta.shape
    x = np.asarray(features, float).reshape(-1, F)
    lp = log_softmax(x @ theta)
    lq = log_softmax(x @ ref_theta)
    p = np.exp(lp)
    kl = np.sum(p * (lp - lq), axis=-1)
    dz = p * ((lp - lq) - kl[:, None])
    n = x.shape[0]
    return float(kl.mean()), x.T @ dz / n
