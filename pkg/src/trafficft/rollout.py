"""Closed-loop multi-agent rollouts under a token policy.

All rollouts of a group are stepped together.  Every rollout owns a seed
from which its whole uniform stream ``[T, A]`` is drawn up front, so a
rollout's trajectory depends only on its own seed and the policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import GoalContext, PolicyHandle, featurize, sample_tokens, sampling_log_probs
from .world import SPEED, Rollout, Scenario, Vocabulary, step_arrays


@dataclass
class RolloutGroup:
    scenario_id: str
    states: np.ndarray        # [R, T+1, A, 4]
    tokens: np.ndarray        # [R, T, A]
    logprobs: np.ndarray      # [R, T, A]
    observations: np.ndarray  # [R, T, A, F]
    seeds: np.ndarray         # [R] uint64

    def __len__(self) -> int:
        return self.states.shape[0]

    def rollouts(self) -> list[Rollout]:
        return [Rollout(self.scenario_id, self.states[i], self.tokens[i], self.logprobs[i], int(self.seeds[i]))
                for i in range(len(self))]

    def take(self, idx) -> "RolloutGroup":
        return RolloutGroup(self.scenario_id, self.states[idx], self.tokens[idx], self.logprobs[idx],
                            self.observations[idx], self.seeds[idx])


def rollout_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2**63 - 1, size=n, dtype=np.uint64)


def goal_context(scenario: Scenario, goals: dict | None = None) -> GoalContext:
    xy, mask = scenario.goal_array(goals)
    return GoalContext.build(scenario.geometry, xy, mask)


def observe(scenario: Scenario, states: np.ndarray, policy: PolicyHandle, goals: GoalContext | None = None):
    """Policy inputs ``[R, T, A, F]`` seen along stacked trajectories ``[R, T+1, A, 4]``."""
    first = scenario.history[:, max(-2, -scenario.history.shape[1]), SPEED]
    prev = np.concatenate([np.broadcast_to(first, states[:, :1, :, SPEED].shape), states[:, :-2, :, SPEED]], axis=1)
    return featurize(states[:, :-1], prev, scenario.geometry, scenario.lengths, scenario.widths,
                     goals=goals, goal_mode=policy.goal_mode)


def simulate(scenario: Scenario, policy: PolicyHandle, n: int | None = None, temperature: float = 1.0,
             seed: int = 0, top_k: int | None = None, goals: dict | None = None,
             seeds: np.ndarray | None = None, chunk: int = 1024) -> RolloutGroup:
    """Sample ``n`` closed-loop rollouts (or one per entry of ``seeds``)."""
    if seeds is None:
        if n is None or n < 1:
            raise ValueError("need N >= 1 rollouts")
        seeds = rollout_seeds(seed, n)
    seeds = np.asarray(seeds, np.uint64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    theta = policy.params.theta
    vocab = policy.vocab
    if theta.shape[1] != vocab.size:
        raise ValueError("policy/vocabulary dimension mismatch")
    ctx = goal_context(scenario, goals) if policy.goal_mode != "none" else None
    T, A = scenario.horizon_T, scenario.num_agents
    parts = []
    for lo in range(0, len(seeds), chunk):
        sd = seeds[lo:lo + chunk]
        R = len(sd)
        U = np.stack([np.random.default_rng(int(s)).random((T, A)) for s in sd])
        states = np.empty((R, T + 1, A, 4))
        tokens = np.empty((R, T, A), np.int64)
        logp = np.empty((R, T, A))
        obs = np.empty((R, T, A, theta.shape[0]))
        states[:, 0] = scenario.initial_states
        prev_speed = np.broadcast_to(scenario.history[:, max(-2, -scenario.history.shape[1]), SPEED], (R, A))
        for t in range(T):
            cur = states[:, t]
            f = featurize(cur, prev_speed, scenario.geometry, scenario.lengths, scenario.widths,
                          goals=ctx, goal_mode=policy.goal_mode)
            lp = sampling_log_probs(theta, f, temperature, top_k)
            tok = sample_tokens(lp, U[:, t])
            obs[:, t] = f
            tokens[:, t] = tok
            logp[:, t] = np.take_along_axis(lp, tok[..., None], -1)[..., 0]
            states[:, t + 1] = step_arrays(cur, vocab.delta_speed[tok], vocab.delta_heading[tok])
            prev_speed = cur[..., SPEED]
        parts.append((states, tokens, logp, obs))
    cat = [np.concatenate(x) for x in zip(*parts)]
    return RolloutGroup(scenario.id, *cat, seeds)


def rollout_group(scenario: Scenario, policy: PolicyHandle, N: int, temperature: float = 1.0,
                  seed: int = 0, top_k: int | None = None, goals: dict | None = None) -> list[Rollout]:
    return simulate(scenario, policy, N, temperature, seed, top_k, goals).rollouts()


def replay(scenario: Scenario, tokens: np.ndarray, vocab=None) -> np.ndarray:
    """States ``[T+1, A, 4]`` reached by executing ``tokens[T, A]`` from the scenario start."""
    vocab = vocab or Vocabulary()
    tokens = np.asarray(tokens)
    states = np.empty((tokens.shape[0] + 1,) + scenario.initial_states.shape)
    states[0] = scenario.initial_states
    for t, tok in enumerate(tokens):
        states[t + 1] = step_arrays(states[t], vocab.delta_speed[tok], vocab.delta_heading[tok])
    return states
