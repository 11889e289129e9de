"""Goal-conditioned fine-tuning: goal criteria, target augmentation, hindsight ratios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import PolicyHandle, PolicyParams, token_log_probs
from .rewards import gcft_reward, mloo
from .rollout import RolloutGroup, goal_context, observe, simulate
from .trainer import ScenarioScorer, TrainerConfig, TrainResult, train
from .world import DT, Scenario, Vocabulary, write_jsonl

GOAL_THRESHOLD = 2.0
CRITERIA = ("hard_reach", "soft_pass")
RATIO_CLIP = (0.1, 10.0)


def _criterion(name: str) -> str:
    aliases = {"hard": "hard_reach", "soft": "soft_pass", "hard_reach": "hard_reach", "soft_pass": "soft_pass"}
    if name not in aliases:
        raise ValueError(f"unknown goal criterion {name!r}")
    return aliases[name]


@dataclass(frozen=True)
class Goal:
    agent_id: int
    xy: tuple[float, float]
    criterion: str = "hard_reach"
    threshold: float = GOAL_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "criterion", _criterion(self.criterion))


@dataclass(frozen=True)
class GoalPolyline:
    polyline_id: int
    distance: float


def goal_polyline(scenario: Scenario, goal) -> GoalPolyline:
    pid, dist = scenario.geometry.goal_polyline(goal)
    return GoalPolyline(pid, dist)


def goal_reached(trajectory, goal: Goal | Sequence[float], criterion: str | None = None,
                 threshold: float | None = None) -> bool:
    """Hard reach tests the final position; soft pass tests every position."""
    traj = np.asarray(trajectory, float)
    if traj.size == 0:
        raise ValueError("empty trajectory")
    if isinstance(goal, Goal):
        criterion = criterion or goal.criterion
        threshold = goal.threshold if threshold is None else threshold
        xy = np.asarray(goal.xy)
    else:
        xy = np.asarray(goal, float)
    criterion = _criterion(criterion or "hard_reach")
    threshold = GOAL_THRESHOLD if threshold is None else threshold
    d = np.linalg.norm(traj[..., :2] - xy, axis=-1)
    return bool(d[-1] <= threshold) if criterion == "hard_reach" else bool(d.min() <= threshold)


def goal_flags(positions, goals_xy, criterion: str, threshold: float = GOAL_THRESHOLD) -> np.ndarray:
    """Per-rollout, per-agent success ``[N, A]`` for positions ``[N, T, A, 2]``.

    ``goals_xy`` is ``[A, 2]`` or per-rollout ``[N, A, 2]``.
    """
    g = np.asarray(goals_xy, float)
    if g.ndim == 2:
        g = g[None]
    d = np.linalg.norm(np.asarray(positions) - g[:, None], axis=-1)          # [N, T, A]
    if _criterion(criterion) == "hard_reach":
        return d[:, -1] <= threshold
    return d.min(axis=1) <= threshold


def completion_rates(positions, goals_xy, mask, threshold: float = GOAL_THRESHOLD) -> dict:
    """Reach and pass rates over rollouts and goal-carrying agents."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        return {"reach_rate": float("nan"), "pass_rate": float("nan"), "pairs": 0}
    reach = goal_flags(positions, goals_xy, "hard_reach", threshold)[:, mask]
    passed = goal_flags(positions, goals_xy, "soft_pass", threshold)[:, mask]
    return {"reach_rate": float(reach.mean()), "pass_rate": float(passed.mean()), "pairs": int(mask.sum())}


def goal_rewards(group: RolloutGroup, scenario: Scenario, goals: dict, criterion: str,
                 threshold: float = GOAL_THRESHOLD) -> np.ndarray:
    """Mean binary goal success over evaluated agents that carry a goal, per rollout."""
    xy, mask = scenario.goal_array(goals)
    mask &= scenario.eval_mask
    if not mask.any():
        return np.zeros(len(group))
    flags = goal_flags(group.states[:, 1:, :, :2], xy, criterion, threshold)
    return flags[:, mask].mean(axis=1)


# --- stochastic target augmentation ----------------------------------------------------

@dataclass
class AugmentedSample:
    scenario: Scenario
    relabeled_goals: dict[int, tuple[float, float]]
    source_rollout: int
    source_rmm: float
    rollout_seed: int = 0
    group_rmms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = self.scenario.to_dict()
        d["relabeled_goals"] = {str(k): list(v) for k, v in self.relabeled_goals.items()}
        d["provenance"] = {"source_rollout": self.source_rollout, "source_rmm": self.source_rmm,
                           "rollout_seed": self.rollout_seed, "group_rmms": self.group_rmms}
        return d


def select_best(rmms) -> int:
    return int(np.argmax(np.asarray(rmms)))


def augment_targets(scenarios: Sequence[Scenario], policy: PolicyHandle, N_G: int = 4, temperature: float = 1.0,
                    seed: int = 0, scorer: ScenarioScorer | None = None, top_k: int = 32) -> list[AugmentedSample]:
    """Relabel each scenario's goals with the terminal positions of its best sampled rollout."""
    if N_G < 2:
        raise ValueError("N_G must be >= 2")
    scorer = scorer or ScenarioScorer()
    k = min(top_k, policy.vocab.size)
    out = []
    for j, sc in enumerate(scenarios):
        group = simulate(sc, policy, N_G, temperature, seed=seed + 104729 * j, top_k=k)
        ev = scorer.evaluator(sc)
        single = ev.single(ev.counts(scorer.features(sc, group)))
        best = select_best(single)
        agents = sorted(sc.goals) if sc.goals else list(sc.eval_agent_ids)
        final = group.states[best, -1]
        relabeled = {a: (float(final[sc.agent_index(a), 0]), float(final[sc.agent_index(a), 1])) for a in agents}
        out.append(AugmentedSample(sc, relabeled, best, float(single[best]), int(group.seeds[best]),
                                   [float(x) for x in single]))
    return out


def save_augmented(path, samples: Sequence[AugmentedSample]) -> None:
    write_jsonl(path, (s.to_dict() for s in samples))


# --- hindsight ratio ----------------------------------------------------------------------

def hindsight_step_log_ratios(policy: PolicyHandle, scenario: Scenario, states, tokens,
                              original_goals: dict, relabeled_goals: dict) -> np.ndarray:
    """Per-step log ratio ``[N, T]`` summed over agents, by re-featurizing the same tokens."""
    states = np.asarray(states, float)
    tokens = np.asarray(tokens)
    if states.ndim == 3:
        states, tokens = states[None], tokens[None]
    theta = policy.params.theta
    obs_new = observe(scenario, states, policy, goal_context(scenario, relabeled_goals))
    obs_old = observe(scenario, states, policy, goal_context(scenario, original_goals))
    diff = token_log_probs(theta, obs_new, tokens) - token_log_probs(theta, obs_old, tokens)
    return diff.sum(axis=-1)


def hindsight_ratio(policy: PolicyHandle, scenario: Scenario, rollout, original_goals: dict,
                    relabeled_goals: dict) -> np.ndarray:
    """``pi(tau | relabeled goals) / pi(tau | original goals)`` per rollout."""
    if isinstance(rollout, RolloutGroup):
        states, tokens = rollout.states, rollout.tokens
    else:
        states, tokens = rollout.states, rollout.tokens
    log_r = hindsight_step_log_ratios(policy, scenario, states, tokens, original_goals, relabeled_goals).sum(-1)
    ratio = np.exp(log_r)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite hindsight ratio")
    return ratio


# --- goal-conditioned training -------------------------------------------------------------

@dataclass
class GcftConfig:
    representation: str = "concat"
    criterion: str = "soft"
    lam: float = 0.1
    her_fraction: float = 0.5
    augment_group_size: int = 4
    threshold: float = GOAL_THRESHOLD

    def validate(self) -> None:
        if self.representation not in ("concat", "indication", "ind", "cat"):
            raise ValueError("representation must be concat or indication")
        _criterion(self.criterion)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.her_fraction <= 1.0:
            raise ValueError("her_fraction must lie in [0, 1]")

    @property
    def goal_mode(self) -> str:
        return {"cat": "concat", "ind": "indication"}.get(self.representation, self.representation)


def train_gcft(scenarios: Sequence[Scenario], config: TrainerConfig, gcft: GcftConfig, init: PolicyParams,
               seed: int = 0, scorer: ScenarioScorer | None = None, on_step=None) -> TrainResult:
    """Fine-tune for goal completion with ``(1 - lam) * MLOO + lam * goal`` rewards.

    Half of each batch (``her_fraction``) trains on hindsight-relabeled goals,
    with the policy-gradient term weighted by the clipped hindsight ratio.
    With ``lam == 0`` the goal signal vanishes and this is goal-free training.
    """
    gcft.validate()
    scorer = scorer or ScenarioScorer()
    if gcft.lam == 0.0:
        return train(scenarios, config, "mloo", init=init, seed=seed, scorer=scorer, on_step=on_step)
    mode = gcft.goal_mode
    crit = _criterion(gcft.criterion)
    augmented = {}
    if gcft.her_fraction > 0:
        handle0 = PolicyHandle(init, mode)
        for s in augment_targets(scenarios, handle0, gcft.augment_group_size, seed=seed + 1, scorer=scorer):
            augmented[s.scenario.id] = s
    n_her = int(round(gcft.her_fraction * config.batch_size))

    def hook(step, slot, sc, group, feats, params):
        ev = scorer.evaluator(sc)
        counts = ev.counts(feats)
        realism = mloo(ev.loo(counts))
        info = {"group_rmm": float(ev.group(counts))}
        handle = PolicyHandle(params, mode)
        flags_orig = goal_rewards(group, sc, sc.goals, "soft_pass", gcft.threshold)
        info["metrics"] = {"miss_rate": 1.0 - float(flags_orig.mean())}
        aug = augmented.get(sc.id)
        if slot < n_her and aug is not None:
            goals = aug.relabeled_goals
            ratio = np.clip(hindsight_ratio(handle, sc, group, sc.goals, goals), *RATIO_CLIP)
            obs = observe(sc, group.states, handle, goal_context(sc, goals))
        else:
            goals = sc.goals
            ratio = np.ones(len(group))
            obs = group.observations
        reward = gcft_reward(realism, goal_rewards(group, sc, goals, crit, gcft.threshold), gcft.lam)
        info["rewards"] = reward
        weights = np.broadcast_to((ratio * reward)[:, None, None], group.tokens.shape)
        return obs, weights, info

    return train(scenarios, config, "gcft", init=init, seed=seed, scorer=scorer, goal_mode=mode,
                 group_hook=hook, on_step=on_step)


# --- controllability evaluation --------------------------------------------------------------

def perturbed_goals(scenario: Scenario, horizon_s: float) -> dict:
    """Expert terminal goals shifted in time by ``horizon_s`` seconds.

    Negative shifts take the expert position earlier in the rollout; positive
    shifts extrapolate the terminal state at constant speed and heading.
    """
    ex = scenario.expert
    T = scenario.horizon_T
    out = {}
    for a in scenario.eval_agent_ids:
        i = scenario.agent_index(a)
        if horizon_s <= 0:
            t = max(0, T + int(round(horizon_s / DT)))
            xy = ex.states[t, i, :2]
        else:
            x, y, h, v = ex.states[T, i]
            xy = np.array([x + v * horizon_s * np.cos(h), y + v * horizon_s * np.sin(h)])
        out[a] = (float(xy[0]), float(xy[1]))
    return out


def alternative_goals(scenario: Scenario, rng: np.random.Generator, reach: float = 150.0) -> dict | None:
    """Goals on a drivable polyline other than the one the expert ends on.

    A polyline qualifies when its direction at the point nearest the agent's
    start is within 90 degrees of the agent's heading and that point lies
    within ``reach`` metres.  The goal is the polyline point whose distance
    from the start best matches the expert's terminal distance.  Agents with
    no qualifying polyline are dropped; ``None`` if none qualify.
    """
    geom = scenario.geometry
    out = {}
    for a in scenario.eval_agent_ids:
        i = scenario.agent_index(a)
        start = scenario.initial_states[i]
        term = scenario.expert.states[-1, i, :2]
        term_pid, _ = geom.goal_polyline(term)
        want = np.linalg.norm(term - start[:2])
        fwd = np.array([np.cos(start[2]), np.sin(start[2])])
        cands = []
        for pl in sorted(scenario.map, key=lambda p: p.id):
            if pl.id == term_pid:
                continue
            pts = pl.points
            d = np.linalg.norm(pts - start[:2], axis=1)
            j = int(np.argmin(d))
            seg = pts[min(j + 1, len(pts) - 1)] - pts[max(j - 1, 0)]
            if d[j] > reach or np.dot(seg, fwd) <= 0:
                continue
            ahead = (pts - start[:2]) @ fwd > 0
            if not ahead.any():
                continue
            k = int(np.argmin(np.where(ahead, np.abs(d - want), np.inf)))
            cands.append(pts[k])
        if cands:
            g = cands[int(rng.integers(len(cands)))]
            out[a] = (float(g[0]), float(g[1]))
    return out or None


def eval_controllability(params: PolicyParams, scenarios: Sequence[Scenario], goal_source: str = "ground_truth",
                         goal_mode: str = "none", horizon_s: float = 0.0, n_rollouts: int = 8, seed: int = 0,
                         threshold: float = GOAL_THRESHOLD) -> dict:
    """Reach and pass rates over (scenario, evaluated agent, rollout) triples."""
    if goal_source not in ("ground_truth", "perturbed", "alternative"):
        raise ValueError(f"unknown goal source {goal_source!r}")
    handle = PolicyHandle(params, goal_mode, Vocabulary())
    rng = np.random.default_rng(seed)
    reach, passed, skipped, pairs = [], [], 0, 0
    for k, sc in enumerate(scenarios):
        if goal_source == "ground_truth":
            goals = perturbed_goals(sc, 0.0)
        elif goal_source == "perturbed":
            goals = perturbed_goals(sc, horizon_s)
        else:
            goals = alternative_goals(sc, rng)
            if goals is None:
                skipped += 1
                continue
        group = simulate(sc, handle, n_rollouts, seed=seed + 7919 * k, goals=goals)
        xy, mask = sc.goal_array(goals)
        pos = group.states[:, 1:, :, :2]
        reach.append(goal_flags(pos, xy, "hard_reach", threshold)[:, mask].ravel())
        passed.append(goal_flags(pos, xy, "soft_pass", threshold)[:, mask].ravel())
        pairs += int(mask.sum())
    if not reach:
        return {"reach_rate": float("nan"), "pass_rate": float("nan"), "pairs": 0, "skipped": skipped}
    return {"reach_rate": float(np.concatenate(reach).mean()), "pass_rate": float(np.concatenate(passed).mean()),
            "pairs": pairs, "skipped": skipped}
