"""Variance and bias diagnostics for leave-one-out realism rewards."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import validity_set
from .policy import FEATURE_DIM, PolicyHandle, PolicyParams, token_log_probs
from .rewards import mloo, rloo
from .rmm import BinningConfig, RmmEvaluator, RmmWeights
from .rollout import observe, replay, simulate
from .trainer import ScenarioScorer
from .world import MapPolyline, Rollout, Scenario, Vocabulary

ESTIMATORS = ("mloo", "rloo", "group_rmm")
MIN_REPS = 30


# --- mismatch factor -----------------------------------------------------------------------

def kappa(alpha, q, strict: bool = True) -> float:
    """``sum_k alpha_k**2 / q_k``; infinite (or an error in strict mode) off the support of ``q``."""
    a = np.asarray(alpha, float)
    q = np.asarray(q, float)
    if a.shape != q.shape or a.ndim != 1:
        raise ValueError("alpha and q must be 1-d arrays of equal length")
    if (a < 0).any() or (q < 0).any():
        raise ValueError("distributions must be non-negative")
    if abs(a.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("distributions must sum to 1")
    outside = (a > 0) & (q == 0)
    if outside.any():
        if strict:
            raise ValueError("support of alpha is not contained in support of q")
        return math.inf
    m = a > 0
    return float(np.sum(a[m] ** 2 / q[m]))


@dataclass
class MismatchReport:
    scenario_id: str
    dim_names: list[str]
    kappa_d: np.ndarray
    n_rollouts: int

    @property
    def kappa_hat(self) -> float:
        return float(np.max(self.kappa_d))

    @property
    def n_eff(self) -> float:
        return self.n_rollouts / self.kappa_hat


def mismatch_report(policy: PolicyHandle, scenario: Scenario, n_rollouts: int = 32, seed: int = 0,
                    scorer: ScenarioScorer | None = None) -> MismatchReport:
    """Per-dimension mismatch between simulated bin probabilities and ground-truth frequencies.

    Both distributions pool the validity set; simulated probabilities carry
    the same Laplace floor as the metric so the support condition holds.
    """
    scorer = scorer or ScenarioScorer()
    ev = scorer.evaluator(scenario)
    group = simulate(scenario, policy, n_rollouts, seed=seed)
    counts = ev.counts(scorer.features(scenario, group)).sum(axis=0)          # [D, A, K]
    prep = ev.prep
    kap = np.empty(len(prep.K))
    for d, K in enumerate(prep.K):
        gt = prep.gt_bins[..., d][prep.valid]
        alpha = np.bincount(gt, minlength=K)[:K] / len(gt)
        sim = counts[d, :, :K].sum(axis=0)
        q = sim / sim.sum()
        eps = 1.0 / (n_rollouts * scenario.horizon_T * K)
        q = (q + eps) / (1.0 + K * eps)
        kap[d] = kappa(alpha, q / q.sum())
    return MismatchReport(scenario.id, list(prep.bins.dim_names), kap, n_rollouts)


# --- variance sweep ------------------------------------------------------------------------

@dataclass
class VarianceCurve:
    estimator: str
    n_values: list[int]
    mean_var: np.ndarray          # mean over scenarios of Var(reward at rollout 0)
    log_std: np.ndarray           # std over scenarios of log variance
    per_scenario: np.ndarray      # [S, len(n_values)]
    slope: float = float("nan")
    intercept: float = float("nan")
    alpha: float = float("nan")   # least-squares alpha for alpha / N**2 in log space
    constant: float = float("nan")
    residual: float = float("nan")
    fit_n: list[int] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise ValueError("N values must be strictly increasing")
        if (np.asarray(self.mean_var) < 0).any():
            raise ValueError("variances must be non-negative")


def fit_loglog(n_values, variances) -> tuple[float, float, float]:
    """Least-squares ``log V = intercept + slope * log N``; returns slope, intercept, RMS residual."""
    x = np.log(np.asarray(n_values, float))
    y = np.log(np.asarray(variances, float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2)))


def _fit_curve(curve: VarianceCurve, min_n: int) -> VarianceCurve:
    n = np.asarray(curve.n_values)
    keep = n >= min_n
    if keep.sum() >= 2 and np.all(curve.mean_var[keep] > 0):
        curve.slope, curve.intercept, curve.residual = fit_loglog(n[keep], curve.mean_var[keep])
        logv = np.log(curve.mean_var[keep])
        curve.alpha = float(np.exp(np.mean(logv + 2 * np.log(n[keep]))))
        curve.constant = float(np.mean(curve.mean_var[keep]))
        curve.fit_n = [int(v) for v in n[keep]]
    return curve


def estimator_samples(ev: RmmEvaluator, counts: np.ndarray, N: int) -> dict[str, np.ndarray]:
    """Rewards at rollout index 0 (and the group metric) for groups ``counts[reps, N, ...]``."""
    c = counts[:, :N]
    loo = ev.loo(c)
    single = ev.single(c)
    return {"mloo": mloo(loo)[:, 0], "rloo": rloo(single)[:, 0], "group_rmm": ev.group(c)}


def variance_sweep(policy: PolicyHandle, scenarios: Sequence[Scenario], n_list: Sequence[int] = (2, 4, 8, 16, 32, 64),
                   reps: int = 200, seed: int = 0, scorer: ScenarioScorer | None = None,
                   temperature: float = 1.0, chunk: int = 2048) -> dict[str, VarianceCurve]:
    """Variance of each reward estimator against group size.

    Each repetition draws ``max(n_list)`` rollouts; the group of size N is
    the first N of them, so all estimators and sizes share one rollout stream.
    The MLOO and group-metric fits skip N = 2; the RLOO fit uses N >= 8.
    """
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions per (scenario, N), got {reps}")
    n_list = sorted(int(n) for n in n_list)
    if n_list[0] < 2:
        raise ValueError("group sizes must be >= 2")
    scorer = scorer or ScenarioScorer()
    n_max = n_list[-1]
    var = {e: np.empty((len(scenarios), len(n_list))) for e in ESTIMATORS}
    for s, sc in enumerate(scenarios):
        ev = scorer.evaluator(sc)
        group = simulate(sc, policy, reps * n_max, temperature, seed=seed + 7919 * s, chunk=chunk)
        counts = ev.counts(scorer.features(sc, group))
        counts = counts.reshape((reps, n_max) + counts.shape[1:])
        for j, N in enumerate(n_list):
            for e, v in estimator_samples(ev, counts, N).items():
                var[e][s, j] = np.var(v, ddof=1)
    curves = {}
    for e in ESTIMATORS:
        per = var[e]
        with np.errstate(divide="ignore"):
            logs = np.log(per)
        log_std = np.where(np.isfinite(logs).all(axis=0), logs.std(axis=0), np.nan)
        curve = VarianceCurve(e, n_list, per.mean(axis=0), log_std, per)
        curves[e] = _fit_curve(curve, 8 if e == "rloo" else 3)
    return curves


# --- unbiasedness harness ----------------------------------------------------------------------

@dataclass
class TinyMDP:
    scenario: Scenario
    policy: PolicyHandle
    bins: BinningConfig
    weights: RmmWeights
    strict: bool = False

    @property
    def n_trajectories(self) -> int:
        return self.policy.vocab.size ** (self.scenario.horizon_T * self.scenario.num_agents)


def tiny_mdp(seed: int = 0, horizon_T: int = 2, scale: float = 0.5) -> TinyMDP:
    """One agent on a straight lane choosing among three speed changes."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary((-1.0, 0.0, 1.0), (0.0,))
    lane = MapPolyline(0, np.array([[-50.0, 0.0], [200.0, 0.0]]), 4.0)
    history = np.array([[[-3.0, 0.5, 0.0, 6.0], [0.0, 0.5, 0.0, 6.0]]])
    gt_tokens = rng.integers(0, vocab.size, (horizon_T, 1))
    sc = Scenario("tiny", [lane], [0], history, np.array([4.5]), np.array([2.0]), horizon_T, [0])
    sc.expert = Rollout("tiny", replay(sc, gt_tokens, vocab), gt_tokens, np.zeros((horizon_T, 1)))
    theta = rng.normal(0.0, scale, (FEATURE_DIM, vocab.size))
    return TinyMDP(sc, PolicyHandle(PolicyParams(theta), "none", vocab), BinningConfig.default(),
                   RmmWeights.default())


def enumerate_trajectories(mdp: TinyMDP, limit: int = 10_000):
    """All token sequences ``[M, T, A]`` with their states ``[M, T+1, A, 4]``."""
    V = mdp.policy.vocab.size
    T, A = mdp.scenario.horizon_T, mdp.scenario.num_agents
    if V ** (T * A) > limit:
        raise ValueError(f"state space too large: {V ** (T * A)} trajectories exceeds {limit}")
    tokens = np.array(list(itertools.product(range(V), repeat=T * A))).reshape(-1, T, A)
    states = np.stack([replay(mdp.scenario, t, mdp.policy.vocab) for t in tokens])
    return tokens, states


def trajectory_log_probs(mdp: TinyMDP, theta: np.ndarray, tokens, states) -> np.ndarray:
    obs = observe(mdp.scenario, states, mdp.policy)
    return token_log_probs(theta, obs, tokens).sum(axis=(1, 2))


@dataclass
class UnbiasednessResult:
    exact: np.ndarray
    mc_mean: np.ndarray
    mc_se: np.ndarray
    z: np.ndarray
    batches: int
    N: int

    @property
    def fraction_within(self) -> float:
        return float(np.mean(self.within(3.0)))

    def within(self, bound: float) -> np.ndarray:
        """Componentwise agreement; zero-variance components must match exactly."""
        zero = self.mc_se == 0
        ok = np.abs(self.z) < bound
        return np.where(zero, np.abs(self.mc_mean - self.exact) <= 1e-12, ok)


def unbiasedness_check(mdp: TinyMDP, N: int = 4, batches: int = 100_000, seed: int = 0,
                       constant_reward: float | None = None, fd_step: float = 1e-5,
                       max_tuples: int = 1_000_000, chunk: int = 8192) -> UnbiasednessResult:
    """Compare the Monte-Carlo mean of ``sum_i MLOO_i grad log pi(tau_i)`` with the exact gradient.

    The exact target is the gradient of the expected metric of N - 1 i.i.d.
    rollouts.  It is found by summing over every ordered (N - 1)-tuple of
    trajectories and differentiating that expectation by central finite
    differences, so it shares no code with the score-function estimator.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    tokens, states = enumerate_trajectories(mdp)
    M = len(tokens)
    if M ** (N - 1) > max_tuples:
        raise ValueError(f"state space too large: {M ** (N - 1)} trajectory tuples")
    sc = mdp.scenario
    scorer = ScenarioScorer(mdp.bins, mdp.weights, mdp.strict)
    ev = scorer.evaluator(sc)
    counts = ev.counts(scorer.features(sc, _group_of(sc, states, tokens)))        # [M, D, A, K]

    # metric of every ordered (N-1)-tuple
    idx = np.array(list(itertools.product(range(M), repeat=N - 1)))
    if constant_reward is not None:
        tuple_rmm = np.full(len(idx), float(constant_reward))
    else:
        tuple_rmm = ev.group(counts[idx])

    theta0 = mdp.policy.params.theta

    def expected(theta):
        p = np.exp(trajectory_log_probs(mdp, theta, tokens, states))
        return float(np.sum(np.prod(p[idx], axis=1) * tuple_rmm))

    exact = np.zeros_like(theta0)
    for i, j in np.ndindex(theta0.shape):
        tp, tm = theta0.copy(), theta0.copy()
        tp[i, j] += fd_step
        tm[i, j] -= fd_step
        exact[i, j] = (expected(tp) - expected(tm)) / (2 * fd_step)

    # Monte-Carlo estimator with rollouts drawn by the simulator
    obs = observe(sc, states, mdp.policy)
    grads = _trajectory_scores(theta0, obs, tokens)                               # [M, F, V]
    code = {tuple(t.ravel()): m for m, t in enumerate(tokens)}
    total = np.zeros_like(theta0)
    total_sq = np.zeros_like(theta0)
    done = 0
    rng = np.random.default_rng(seed)
    while done < batches:
        b = min(chunk, batches - done)
        group = simulate(sc, mdp.policy, seeds=rng.integers(0, 2**63 - 1, b * N, dtype=np.uint64), chunk=b * N)
        cls = np.array([code[tuple(t.ravel())] for t in group.tokens]).reshape(b, N)
        if constant_reward is not None:
            loo = np.full((b, N), float(constant_reward))
        else:
            loo = ev.loo(counts[cls])
        g = np.einsum("bn,bnfv->bfv", mloo(loo), grads[cls])
        total += g.sum(axis=0)
        total_sq += (g * g).sum(axis=0)
        done += b
    mean = total / batches
    var = np.maximum(total_sq / batches - mean ** 2, 0.0) * batches / (batches - 1)
    se = np.sqrt(var / batches)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mean - exact) / se, 0.0)
    return UnbiasednessResult(exact, mean, se, z, batches, N)


def _group_of(sc: Scenario, states, tokens):
    from .rollout import RolloutGroup
    M = len(tokens)
    return RolloutGroup(sc.id, states, tokens, np.zeros(tokens.shape), np.zeros(tokens.shape + (FEATURE_DIM,)),
                        np.zeros(M, np.uint64))


def _trajectory_scores(theta, obs, tokens) -> np.ndarray:
    """``grad log pi(tau)`` per trajectory, ``[M, F, V]``."""
    from .policy import score_gradients
    return np.stack([score_gradients(theta, obs[m:m + 1], tokens[m:m + 1], np.ones(tokens[m:m + 1].shape))
                     for m in range(len(tokens))])


# --- reporting -----------------------------------------------------------------------------

CSV_FIELDS = ("N", "estimator", "mean_var", "log_std")


def emit_report(curves: Sequence[VarianceCurve], reports: Sequence[MismatchReport], out_dir) -> list[str]:
    """Write ``variance.csv``, ``fits.csv``, ``kappa.csv`` and a log-log ``variance.svg``.

    Returns one summary line per fitted curve.  An empty curve list yields a
    header-only CSV and no plot.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "variance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in curves:
            for n, v, s in zip(c.n_values, c.mean_var, c.log_std):
                w.writerow([n, c.estimator, repr(float(v)), repr(float(s))])
    lines = []
    if curves:
        with open(out / "fits.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "slope", "intercept", "alpha", "constant", "residual", "fit_n"])
            for c in curves:
                w.writerow([c.estimator, repr(c.slope), repr(c.intercept), repr(c.alpha), repr(c.constant),
                            repr(c.residual), " ".join(map(str, c.fit_n))])
                lines.append(f"{c.estimator}: slope={c.slope:.3f} alpha={c.alpha:.4g} residual={c.residual:.3g}")
        _plot(curves, out / "variance.svg")
    if reports:
        with open(out / "kappa.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "dim", "kappa", "kappa_hat", "n_eff"])
            for r in reports:
                for name, k in zip(r.dim_names, r.kappa_d):
                    w.writerow([r.scenario_id, name, repr(float(k)), repr(r.kappa_hat), repr(r.n_eff)])
    return lines


def _plot(curves: Sequence[VarianceCurve], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "variance", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for c in curves:
            n = np.asarray(c.n_values, float)
            line, = ax.plot(n, c.mean_var, "o", label=c.estimator)
            if np.isfinite(c.slope):
                ax.plot(n, np.exp(c.intercept) * n ** c.slope, "-", color=line.get_color(),
                        label=f"{c.estimator} fit (slope {c.slope:.2f})")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("rollouts per group N")
        ax.set_ylabel("reward variance")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
