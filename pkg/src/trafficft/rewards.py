"""Per-rollout rewards from a group of rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REWARD_KINDS = ("mloo", "rloo-rmm", "rloo-minade", "col-off", "col-off-ade", "gcft")


@dataclass
class RewardBatch:
    rewards: np.ndarray
    kind: str
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class HeuristicCoefficients:
    collision: float = 1.0
    offroad: float = 1.0
    ade: float = 0.1


def mloo(loo_values) -> np.ndarray:
    """Mean of the leave-one-out values minus each rollout's own one."""
    v = np.asarray(loo_values, float)
    if v.shape[-1] < 2:
        raise ValueError("MLOO needs N >= 2")
    return v.mean(axis=-1, keepdims=True) - v


def rloo(values) -> np.ndarray:
    """Each value minus the mean of the other N - 1."""
    v = np.asarray(values, float)
    n = v.shape[-1]
    if n < 2:
        raise ValueError("RLOO needs N >= 2")
    return v - (v.sum(axis=-1, keepdims=True) - v) / (n - 1)


def ade(positions, gt_positions, valid) -> np.ndarray:
    """Mean Euclidean error over the validity set, one value per rollout.

    ``positions[N, T, A, 2]``, ``gt_positions[T, A, 2]``, ``valid[A, T]``.
    """
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("empty validity set")
    err = np.linalg.norm(np.asarray(positions) - gt_positions, axis=-1)     # [N, T, A]
    return (err * valid.T).sum(axis=(-2, -1)) / valid.sum()


def min_ade_reward(positions, gt_positions, valid) -> RewardBatch:
    e = ade(positions, gt_positions, valid)
    return RewardBatch(rloo(-e), "rloo-minade", {"ade": e, "min_ade": float(e.min())})


def heuristic_penalty(collision, offroad, valid, ade_values=None,
                      coef: HeuristicCoefficients = HeuristicCoefficients()) -> np.ndarray:
    """``a * collision_rate + b * offroad_rate (+ c * ADE)`` per rollout.

    Indicator arrays are ``[N, A, T]``; rates are taken over the validity set.
    """
    valid = np.asarray(valid, bool)
    n = valid.sum()
    col = (np.asarray(collision) * valid).sum(axis=(-2, -1)) / n
    off = (np.asarray(offroad) * valid).sum(axis=(-2, -1)) / n
    pen = coef.collision * col + coef.offroad * off
    if ade_values is not None:
        pen = pen + coef.ade * np.asarray(ade_values)
    return pen


def heuristic_reward(collision, offroad, valid, mode: str = "col_off", ade_values=None,
                     coef: HeuristicCoefficients = HeuristicCoefficients()) -> RewardBatch:
    if mode not in ("col_off", "col_off_ade"):
        raise ValueError(f"unknown heuristic mode {mode!r}")
    if mode == "col_off_ade" and ade_values is None:
        raise ValueError("col_off_ade needs ADE values")
    pen = heuristic_penalty(collision, offroad, valid, ade_values if mode == "col_off_ade" else None, coef)
    kind = "col-off" if mode == "col_off" else "col-off-ade"
    return RewardBatch(rloo(-pen), kind, {"penalty": pen})


def gcft_reward(mloo_values, goal_rewards, lam: float = 0.1) -> np.ndarray:
    """``(1 - lam) * MLOO + lam * goal`` per rollout."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return (1.0 - lam) * np.asarray(mloo_values, float) + lam * np.asarray(goal_rewards, float)
