"""REINFORCE fine-tuning with leave-one-out rewards and adaptive KL control."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .features import extract_batch, validity_set
from .policy import (FEATURE_DIM, PolicyHandle, PolicyParams, kl_and_grad, log_softmax, score_gradients)
from .rewards import (HeuristicCoefficients, RewardBatch, ade, heuristic_reward, mloo, rloo)
from .rmm import BinningConfig, RmmEvaluator, RmmWeights
from .rollout import RolloutGroup, observe, simulate
from .world import Scenario, Vocabulary

log = logging.getLogger(__name__)

# "momentum" keeps only the first-moment average; "adam" also divides by the
# root of the second moment.
OPTIMIZERS = ("adam", "momentum")

METRIC_FIELDS = ("step", "mean_rmm", "kl", "kl_orig", "beta", "reward_mean", "reward_std",
                 "grad_norm", "lr")


@dataclass
class TrainerConfig:
    learning_rate: float = 3e-6
    rollouts_per_update: int = 4
    batch_size: int = 8
    kl_target: float = 0.01
    kl_horizon: float = 5.0
    beta_min: float = 1e-3
    beta_max: float = 1e3
    beta_init: float = 0.1
    ref_sync_steps: int = 500
    ref_sync_alpha: float = 0.005
    grad_clip: float = 1.0
    warmup_steps: int = 100
    total_steps: int = 2000
    optimizer: str = "momentum"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    entropy_bonus: float = 0.0
    temperature: float = 1.0
    checkpoint_every: int = 500
    metrics_window: int = 500

    def validate(self) -> None:
        positive = ("rollouts_per_update", "batch_size", "kl_target", "kl_horizon", "beta_min",
                    "beta_max", "beta_init", "ref_sync_steps", "grad_clip", "temperature")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("learning_rate, total_steps and warmup_steps must be non-negative")
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.rollouts_per_update < 2:
            raise ValueError("leave-one-out rewards need at least 2 rollouts per update")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.ref_sync_alpha <= 1:
            raise ValueError("ref_sync_alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ReferenceHandle:
    params: PolicyParams
    last_sync_step: int = 0
    alpha: float = 0.005


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    reference: ReferenceHandle
    beta: float
    original: PolicyParams
    momentum: np.ndarray
    second_moment: np.ndarray
    metrics: deque = field(default_factory=lambda: deque(maxlen=500))


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict]
    checkpoints: dict[int, PolicyParams]
    state: TrainState


# --- small operations ---------------------------------------------------------------

def kl_controller_update(beta: float, measured_kl: float, config: TrainerConfig) -> float:
    if measured_kl < 0:
        raise ValueError("measured KL must be non-negative")
    e = float(np.clip(measured_kl / config.kl_target - 1.0, -0.2, 0.2))
    return float(np.clip(beta * (1.0 + e / config.kl_horizon), config.beta_min, config.beta_max))


def sync_reference(state: TrainState, config: TrainerConfig) -> ReferenceHandle:
    a = config.ref_sync_alpha
    theta = (1.0 - a) * state.reference.params.theta + a * state.params.theta
    return ReferenceHandle(PolicyParams(theta, state.reference.params.version + 1), state.step, a)


def clip_global_norm(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.sum(g * g)))
    if norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


def policy_gradient(theta: np.ndarray, groups: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> np.ndarray:
    """Batch-mean of ``sum_i reward_i * grad log pi(tau_i)``.

    ``groups`` holds ``(observations[N, T, A, F], tokens[N, T, A], rewards[N])``
    per scenario; the rollout log-probability sums over agents and steps.
    """
    g = np.zeros_like(theta)
    for obs, tokens, rewards in groups:
        rewards = np.asarray(rewards, float)
        if obs.shape[0] != len(rewards) or tokens.shape != obs.shape[:-1]:
            raise ValueError("rewards, tokens and observations are misaligned")
        if obs.shape[-1] != theta.shape[0]:
            raise ValueError("feature dimension mismatch")
        w = np.broadcast_to(rewards[:, None, None], tokens.shape)
        g += score_gradients(theta, obs, tokens, w)
    return g / max(len(groups), 1)


# --- scenario-level scoring ---------------------------------------------------------

class ScenarioScorer:
    """Caches each scenario's ground-truth features and metric evaluator."""

    def __init__(self, bins: BinningConfig | None = None, weights: RmmWeights | None = None,
                 strict: bool = False, coef: HeuristicCoefficients = HeuristicCoefficients()):
        self.bins = bins or BinningConfig.default()
        self.weights = weights or RmmWeights.default()
        self.strict = strict
        self.coef = coef
        self._cache: dict[str, RmmEvaluator] = {}

    def evaluator(self, scenario: Scenario) -> RmmEvaluator:
        ev = self._cache.get(scenario.id)
        if ev is None:
            if scenario.expert is None:
                raise ValueError(f"scenario {scenario.id} has no ground-truth rollout")
            gt = extract_batch(scenario.expert.states, scenario, scenario.expert.valid)[0]
            ev = RmmEvaluator(gt, validity_set(scenario), self.bins, self.weights, self.strict, scenario.horizon_T)
            self._cache[scenario.id] = ev
        return ev

    def features(self, scenario: Scenario, group: RolloutGroup) -> np.ndarray:
        return extract_batch(group.states, scenario)

    def group_rmm(self, scenario: Scenario, group: RolloutGroup, feats=None) -> float:
        ev = self.evaluator(scenario)
        feats = self.features(scenario, group) if feats is None else feats
        return float(ev.group(ev.counts(feats)))

    def rewards(self, kind: str, scenario: Scenario, group: RolloutGroup, feats=None) -> RewardBatch:
        ev = self.evaluator(scenario)
        feats = self.features(scenario, group) if feats is None else feats
        valid = validity_set(scenario)
        if kind in ("mloo", "rloo-rmm", "gcft"):
            counts = ev.counts(feats)
            diag = {"group_rmm": float(ev.group(counts))}
            if kind == "rloo-rmm":
                single = ev.single(counts)
                return RewardBatch(rloo(single), kind, {**diag, "single": single})
            loo = ev.loo(counts)
            return RewardBatch(mloo(loo), "mloo" if kind == "mloo" else kind, {**diag, "loo": loo})
        gt_pos = scenario.expert.states[1:, :, :2]
        e = ade(group.states[:, 1:, :, :2], gt_pos, valid)
        if kind == "rloo-minade":
            return RewardBatch(rloo(-e), kind, {"ade": e, "min_ade": float(e.min())})
        if kind in ("col-off", "col-off-ade"):
            mode = "col_off" if kind == "col-off" else "col_off_ade"
            return heuristic_reward(feats[..., 6], feats[..., 8], valid, mode, e, self.coef)
        raise ValueError(f"unknown reward kind {kind!r}")


# --- behaviour cloning ---------------------------------------------------------------

@dataclass
class BCResult:
    params: PolicyParams
    losses: list[float]
    converged: bool


def expert_dataset(scenarios: Sequence[Scenario], goal_mode: str = "none", vocab: Vocabulary | None = None):
    """Teacher-forced observations ``[M, F]`` and expert tokens ``[M]``."""
    handle = PolicyHandle(PolicyParams.zeros(FEATURE_DIM, (vocab or Vocabulary()).size), goal_mode,
                          vocab or Vocabulary())
    xs, ys = [], []
    for sc in scenarios:
        if sc.expert is None:
            raise ValueError(f"scenario {sc.id} has no expert rollout")
        from .rollout import goal_context
        ctx = goal_context(sc) if goal_mode != "none" else None
        obs = observe(sc, sc.expert.states[None], handle, ctx)[0]
        xs.append(obs.reshape(-1, FEATURE_DIM))
        ys.append(sc.expert.tokens.reshape(-1))
    return np.concatenate(xs), np.concatenate(ys)


def _bc_objective(theta, x, y, l2):
    lp = log_softmax(x @ theta)
    p = np.exp(lp)
    n = len(y)
    ll = lp[np.arange(n), y].mean() - 0.5 * l2 * np.sum(theta * theta)
    resid = -p
    resid[np.arange(n), y] += 1.0
    grad = x.T @ resid / n - l2 * theta
    return ll, grad


def fit_bc(x: np.ndarray, y: np.ndarray, vocab_size: int, steps: int = 300, l2: float = 1e-3,
           init: np.ndarray | None = None, tol: float = 1e-9) -> BCResult:
    """Full-batch gradient ascent on the token log-likelihood with backtracking.

    ``losses`` records the negative objective, which never increases.
    """
    theta = np.zeros((x.shape[1], vocab_size)) if init is None else np.array(init, float)
    ll, grad = _bc_objective(theta, x, y, l2)
    losses = [-ll]
    lr = 1.0
    converged = False
    for _ in range(steps):
        gn2 = float(np.sum(grad * grad))
        if gn2 < tol:
            converged = True
            break
        while True:
            cand = theta + lr * grad
            ll_new, grad_new = _bc_objective(cand, x, y, l2)
            if ll_new >= ll + 0.5 * lr * gn2 or lr < 1e-12:
                break
            lr *= 0.5
        if ll_new < ll:
            break
        theta, ll, grad = cand, ll_new, grad_new
        losses.append(-ll)
        lr *= 1.5
    return BCResult(PolicyParams(theta), losses, converged)


def pretrain_bc(scenarios: Sequence[Scenario], steps: int = 300, l2: float = 1e-3,
                vocab: Vocabulary | None = None) -> BCResult:
    vocab = vocab or Vocabulary()
    x, y = expert_dataset(scenarios, "none", vocab)
    res = fit_bc(x, y, vocab.size, steps, l2)
    if not res.converged:
        log.info("behaviour cloning stopped at step budget %d (loss %.5f)", steps, res.losses[-1])
    return res


def greedy_ade(params: PolicyParams, scenarios: Sequence[Scenario], vocab: Vocabulary | None = None) -> float:
    """Mean ADE of near-greedy rollouts against the expert over evaluation agents."""
    handle = PolicyHandle(params, "none", vocab or Vocabulary())
    errs = []
    for sc in scenarios:
        g = simulate(sc, handle, 1, temperature=1e-6, seed=0)
        errs.append(ade(g.states[:, 1:, :, :2], sc.expert.states[1:, :, :2], validity_set(sc))[0])
    return float(np.mean(errs))


# --- training loop ---------------------------------------------------------------------

GroupHook = Callable[[int, int, Scenario, RolloutGroup, np.ndarray, PolicyParams],
                     tuple[np.ndarray, np.ndarray, dict]]


def init_state(params: PolicyParams, config: TrainerConfig) -> TrainState:
    return TrainState(0, params, ReferenceHandle(params, 0, config.ref_sync_alpha), config.beta_init,
                      params, np.zeros_like(params.theta), np.zeros_like(params.theta),
                      deque(maxlen=config.metrics_window))


def _sample_batch(rng, n_scenarios: int, batch: int) -> np.ndarray:
    return rng.choice(n_scenarios, size=batch, replace=batch > n_scenarios)


def train(scenarios: Sequence[Scenario], config: TrainerConfig, reward_kind: str = "mloo",
          init: PolicyParams | None = None, seed: int = 0, scorer: ScenarioScorer | None = None,
          goal_mode: str = "none", group_hook: GroupHook | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``config.total_steps`` REINFORCE updates.

    ``group_hook(step, slot, scenario, group, feats, params)`` lets
    goal-conditioned training replace, per batch slot, the observations and
    weights used for the score and the reward vector.  Values under the
    optional ``info["metrics"]`` key are averaged into the step's metrics row.
    """
    config.validate()
    if not scenarios:
        raise ValueError("no training scenarios")
    vocab = Vocabulary()
    scorer = scorer or ScenarioScorer()
    params = init or PolicyParams.zeros(FEATURE_DIM, vocab.size)
    state = init_state(params, config)
    rng = np.random.default_rng(seed)
    metrics: list[dict] = []
    checkpoints = {0: params}
    N = config.rollouts_per_update
    for step in range(config.total_steps):
        theta = state.params.theta
        handle = PolicyHandle(state.params, goal_mode, vocab)
        idx = _sample_batch(rng, len(scenarios), config.batch_size)
        group_seeds = rng.integers(0, 2**63 - 1, size=len(idx))
        terms, obs_all, rmms, rewards_all, extra = [], [], [], [], {}
        for k, (i, gs) in enumerate(zip(idx, group_seeds)):
            sc = scenarios[i]
            group = simulate(sc, handle, N, config.temperature, int(gs))
            feats = scorer.features(sc, group)
            if group_hook is not None:
                obs, weights, info = group_hook(step, k, sc, group, feats, state.params)
                rewards = info["rewards"]
                rmms.append(info["group_rmm"])
                for key, v in info.get("metrics", {}).items():
                    extra.setdefault(key, []).append(v)
            else:
                rb = scorer.rewards(reward_kind, sc, group, feats)
                rewards = rb.rewards
                obs, weights = group.observations, np.broadcast_to(rewards[:, None, None], group.tokens.shape)
                rmms.append(rb.diagnostics.get("group_rmm", scorer.group_rmm(sc, group, feats)))
            terms.append((obs, group.tokens, weights))
            obs_all.append(group.observations.reshape(-1, theta.shape[0]))
            rewards_all.append(rewards)
        pg = np.zeros_like(theta)
        for obs, tokens, w in terms:
            pg += score_gradients(theta, obs, tokens, w)
        pg /= len(terms)
        visited = np.concatenate(obs_all)
        kl, kl_grad = kl_and_grad(theta, state.reference.params.theta, visited)
        kl_orig = kl if state.original is state.reference.params else kl_and_grad(theta, state.original.theta, visited)[0]
        total = pg - state.beta * kl_grad
        if config.entropy_bonus:
            lp = log_softmax(visited @ theta)
            p = np.exp(lp)
            ent = -np.sum(p * lp, axis=-1)
            total += config.entropy_bonus * (visited.T @ (-p * (lp + ent[:, None]))) / len(visited)
        if not np.all(np.isfinite(total)):
            raise FloatingPointError(f"non-finite gradient at step {step} (kl={kl}, beta={state.beta})")
        total, gnorm = clip_global_norm(total, config.grad_clip)
        lr = config.learning_rate * min(1.0, (step + 1) / config.warmup_steps) if config.warmup_steps else config.learning_rate
        b1, b2 = config.adam_beta1, config.adam_beta2
        state.momentum = b1 * state.momentum + (1.0 - b1) * total
        state.second_moment = b2 * state.second_moment + (1.0 - b2) * total * total
        m_hat = state.momentum / (1.0 - b1 ** (step + 1))
        if config.optimizer == "adam":
            v_hat = state.second_moment / (1.0 - b2 ** (step + 1))
            direction = m_hat / (np.sqrt(v_hat) + config.adam_eps)
        else:
            direction = m_hat
        new_theta = theta + lr * direction - lr * config.weight_decay * theta
        state.params = state.params.updated(new_theta)
        state.beta = kl_controller_update(state.beta, kl, config)
        state.step = step + 1
        if state.step % config.ref_sync_steps == 0:
            state.reference = sync_reference(state, config)
        r = np.concatenate(rewards_all)
        row = {"step": state.step, "mean_rmm": float(np.mean(rmms)), "kl": kl, "kl_orig": float(kl_orig),
               "beta": state.beta, "reward_mean": float(r.mean()), "reward_std": float(r.std()),
               "grad_norm": gnorm, "lr": lr}
        row.update({key: float(np.mean(v)) for key, v in extra.items()})
        metrics.append(row)
        state.metrics.append(row)
        if on_step is not None:
            on_step(row)
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            checkpoints[state.step] = state.params
    return TrainResult(state.params, metrics, checkpoints, state)


def write_metrics_csv(path, metrics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(metrics[0].keys()) if metrics else list(METRIC_FIELDS))
        w.writeheader()
        for row in metrics:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --- evaluation ---------------------------------------------------------------------------

def evaluate_rmm(params: PolicyParams, scenarios: Sequence[Scenario], n_rollouts: int = 32, seed: int = 0,
                 scorer: ScenarioScorer | None = None, goal_mode: str = "none", temperature: float = 1.0,
                 goals: Sequence[dict] | None = None, repeats: int = 1) -> np.ndarray:
    """Group metric per scenario with ``n_rollouts`` rollouts; seeds are shared across policies.

    With ``repeats > 1`` the metric is averaged over independent groups of
    ``n_rollouts``, which tightens the estimate without changing the group size.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    scorer = scorer or ScenarioScorer()
    handle = PolicyHandle(params, goal_mode)
    out = np.zeros(len(scenarios))
    for r in range(repeats):
        base = seed + 1_000_003 * r
        for k, sc in enumerate(scenarios):
            g = simulate(sc, handle, n_rollouts, temperature, seed=base + 7919 * k,
                         goals=None if goals is None else goals[k])
            out[k] += scorer.group_rmm(sc, g)
    return out / repeats
