"""Realism meta-metric over binned feature histograms.

For every dimension ``d`` and agent ``a`` the simulated features of all
rollouts and valid timesteps are pooled into a time-marginal histogram
``P[d, a, k]``.  The per-dimension score is the geometric mean over the
validity set of ``P[d, a, k*]`` where ``k*`` is the ground-truth bin, and the
metric is the weighted sum of per-dimension scores.

Everything here works on integer bin counts, so the leave-one-out values are
obtained by subtracting one rollout's counts from the group total.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import COMPONENT_OF, DIM_NAMES, FEATURE_RANGES, FeatureTable

COMPONENTS = ("kinematic", "interactive", "map")

_DEFAULT_BINS = {"linear_accel": 21, "angular_speed": 21, "angular_accel": 21,
                 "collision_indicator": 2, "offroad_indicator": 2}
_DEFAULT_RANGES = {n: (*FEATURE_RANGES[n], _DEFAULT_BINS.get(n, 20)) for n in DIM_NAMES}


@dataclass
class BinningConfig:
    edges: list[np.ndarray]
    dim_names: tuple[str, ...] = DIM_NAMES

    def __post_init__(self):
        self.edges = [np.asarray(e, float) for e in self.edges]
        if len(self.edges) != len(self.dim_names):
            raise ValueError("one edge array per dimension required")
        for name, e in zip(self.dim_names, self.edges):
            if e.ndim != 1 or len(e) < 3:
                raise ValueError(f"{name}: need K >= 2 bins")
            if np.any(np.diff(e) <= 0):
                raise ValueError(f"{name}: edges must be strictly increasing")

    @property
    def K(self) -> np.ndarray:
        return np.array([len(e) - 1 for e in self.edges])

    @classmethod
    def default(cls) -> "BinningConfig":
        return cls([np.linspace(lo, hi, k + 1) for lo, hi, k in (_DEFAULT_RANGES[n] for n in DIM_NAMES)])

    @classmethod
    def uniform(cls, ranges: dict, dim_names=DIM_NAMES) -> "BinningConfig":
        return cls([np.linspace(*ranges[n][:2], ranges[n][2] + 1) for n in dim_names], tuple(dim_names))

    def to_dict(self) -> dict:
        return {n: {"edges": e.tolist()} for n, e in zip(self.dim_names, self.edges)}

    @classmethod
    def from_dict(cls, d: dict) -> "BinningConfig":
        unknown = set(d) - set(DIM_NAMES)
        if unknown:
            raise ValueError(f"unknown binning dimensions: {sorted(unknown)}")
        base = cls.default()
        edges = []
        for name, default in zip(DIM_NAMES, base.edges):
            spec = d.get(name)
            if spec is None:
                edges.append(default)
            elif "edges" in spec:
                edges.append(np.asarray(spec["edges"], float))
            else:
                edges.append(np.linspace(spec["low"], spec["high"], int(spec.get("K", 20)) + 1))
        return cls(edges)

    def digitize(self, values: np.ndarray) -> np.ndarray:
        """Bin index per value of ``values[..., D]``; out-of-range values go to the end bins."""
        out = np.empty(values.shape, np.int64)
        for d, e in enumerate(self.edges):
            idx = np.searchsorted(e, values[..., d], side="right") - 1
            out[..., d] = np.clip(idx, 0, len(e) - 2)
        return out


@dataclass
class RmmWeights:
    w: np.ndarray
    component_of: tuple[str, ...] = tuple(COMPONENT_OF[n] for n in DIM_NAMES)

    def __post_init__(self):
        self.w = np.asarray(self.w, float)
        if np.any(self.w < 0):
            raise ValueError("weights must be non-negative")
        if abs(math.fsum(self.w) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {math.fsum(self.w)!r}")
        if len(self.component_of) != len(self.w):
            raise ValueError("component_of must name one component per weight")

    @classmethod
    def default(cls) -> "RmmWeights":
        share = {"kinematic": 0.4, "interactive": 0.3, "map": 0.3}
        comps = [COMPONENT_OF[n] for n in DIM_NAMES]
        return cls(np.array([share[c] / comps.count(c) for c in comps]), tuple(comps))

    def to_dict(self) -> dict:
        return {n: float(w) for n, w in zip(DIM_NAMES, self.w)}

    @classmethod
    def from_dict(cls, d: dict) -> "RmmWeights":
        unknown = set(d) - set(DIM_NAMES)
        if unknown:
            raise ValueError(f"unknown weight dimensions: {sorted(unknown)}")
        base = cls.default()
        return cls(np.array([d.get(n, w) for n, w in zip(DIM_NAMES, base.w)]), base.component_of)


@dataclass
class RmmReport:
    rmm: float
    per_dimension: np.ndarray
    components: dict[str, float]
    histograms: np.ndarray = field(repr=False)   # [D, A, K_max]
    gt_bins: np.ndarray = field(repr=False)      # [A, T, D]
    dim_names: tuple[str, ...] = DIM_NAMES

    def to_dict(self) -> dict:
        return {
            "rmm": self.rmm,
            "per_dimension": dict(zip(self.dim_names, self.per_dimension.tolist())),
            "components": self.components,
            "histograms": self.histograms.tolist(),
            "gt_bins": self.gt_bins.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class _Prepared:
    """Ground-truth side of the metric, shared by every rollout subset."""

    def __init__(self, gt_values, valid, bins: BinningConfig, horizon: int | None = None):
        valid = np.asarray(valid, bool)
        if not valid.any():
            raise ValueError("empty validity set")
        gt_values = np.asarray(gt_values, float)
        if gt_values.ndim == 4:
            gt_values = gt_values[0]
        if gt_values.shape[-1] != len(bins.edges):
            raise ValueError("bin edges do not match the feature dimensions")
        self.bins = bins
        self.valid = valid
        self.K = bins.K
        self.K_max = int(self.K.max())
        A, T, D = gt_values.shape
        self.shape = (A, T, D)
        self.horizon = T if horizon is None else horizon
        self.gt_bins = bins.digitize(gt_values)
        self.t_valid = valid.sum(axis=1)                       # [A]
        self.n_valid = int(valid.sum())
        # M[d, a, k] = number of valid (a, t) whose ground truth falls into bin k
        M = np.zeros((D, A, self.K_max))
        a_idx, t_idx = np.nonzero(valid)
        for d in range(D):
            np.add.at(M[d], (a_idx, self.gt_bins[a_idx, t_idx, d]), 1.0)
        self.M = M
        self.M_pos = M > 0

    def counts(self, sim_values) -> np.ndarray:
        """Per-rollout bin counts ``[..., D, A, K_max]`` over valid timesteps."""
        sim_values = np.asarray(sim_values, float)
        if sim_values.shape[-3:] != self.shape:
            raise ValueError(f"simulated features {sim_values.shape} do not match ground truth {self.shape}")
        lead = sim_values.shape[:-3]
        A, T, D = self.shape
        b = self.bins.digitize(sim_values).reshape(-1, A, T, D)
        R = b.shape[0]
        r_idx = np.arange(R)[:, None, None]
        a_idx = np.arange(A)[None, :, None]
        w = np.broadcast_to(self.valid[None], (R, A, T)).ravel()
        out = np.empty((R, D, A, self.K_max))
        for d in range(D):
            key = ((r_idx * A + a_idx) * self.K_max + b[..., d]).ravel()
            out[:, d] = np.bincount(key[w], minlength=R * A * self.K_max).reshape(R, A, self.K_max)
        return out.reshape(*lead, D, A, self.K_max)

    def histograms(self, counts, n) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.nan_to_num(counts / (n * self.t_valid[:, None]))

    def scores(self, counts, n, strict: bool) -> np.ndarray:
        """Per-dimension geometric-mean scores ``[..., D]`` from pooled counts of ``n`` rollouts."""
        P = self.histograms(counts, n)
        if not strict:
            eps = 1.0 / (n * self.horizon * self.K)                       # [D]
            P = (P + eps[:, None, None]) / (1.0 + self.K * eps)[:, None, None]
        with np.errstate(divide="ignore"):
            logp = np.where(self.M_pos, np.log(np.where(self.M_pos, P, 1.0)), 0.0)
        total = np.einsum("...dak,dak->...d", logp, self.M)
        return np.exp(total / self.n_valid)


def _values(x):
    return x.values if isinstance(x, FeatureTable) else np.asarray(x, float)


def _setup(sim, gt, bins, weights, valid, horizon):
    bins = bins or BinningConfig.default()
    weights = weights or RmmWeights.default()
    if valid is None:
        if isinstance(gt, FeatureTable):
            valid = gt.validity
        elif isinstance(sim, FeatureTable):
            valid = sim.validity
        else:
            raise ValueError("validity mask required")
    return _Prepared(_values(gt), valid, bins, horizon), weights


def combine(per_dim: np.ndarray, weights: RmmWeights) -> np.ndarray:
    """Weighted sum over the last axis, accumulated in a fixed order.

    Written as one minus the weighted deficit so that a perfect match is
    exactly 1 regardless of how the weights round.
    """
    deficit = np.zeros(per_dim.shape[:-1])
    for d in range(per_dim.shape[-1]):
        deficit = deficit + weights.w[d] * (1.0 - per_dim[..., d])
    return np.maximum(1.0 - deficit, 0.0)


def component_scores(per_dim: np.ndarray, weights: RmmWeights) -> dict[str, float]:
    comps = np.array(weights.component_of)
    out = {}
    for c in COMPONENTS:
        m = comps == c
        if m.any() and weights.w[m].sum() > 0:
            out[c] = float(np.dot(weights.w[m], per_dim[m]) / weights.w[m].sum())
    return out


def rmm(sim, gt, bins: BinningConfig | None = None, weights: RmmWeights | None = None,
        valid=None, strict: bool = False, horizon: int | None = None) -> RmmReport:
    """Metric of a group of simulated rollouts against the ground-truth features.

    ``sim`` is a FeatureTable or array ``[N, A, T, D]``; ``gt`` is ``[A, T, D]``
    (or a single-rollout table).  Outside ``strict`` mode a Laplace floor of
    ``1 / (N T K)`` keeps every bin probability positive.
    """
    prep, weights = _setup(sim, gt, bins, weights, valid, horizon)
    values = _values(sim)
    if values.ndim == 3:
        values = values[None]
    N = values.shape[0]
    if N < 1:
        raise ValueError("need at least one rollout")
    counts = prep.counts(values).sum(axis=0)
    per_dim = prep.scores(counts, N, strict)
    return RmmReport(
        rmm=float(combine(per_dim, weights)),
        per_dimension=per_dim,
        components=component_scores(per_dim, weights),
        histograms=prep.histograms(counts, N),
        gt_bins=prep.gt_bins,
    )


def rmm_single(rollout_features, gt, bins=None, weights=None, valid=None, strict=False, horizon=None) -> float:
    return rmm(rollout_features, gt, bins, weights, valid, strict, horizon).rmm


class RmmEvaluator:
    """Binds one scenario's ground truth so groups can be scored repeatedly."""

    def __init__(self, gt, valid, bins: BinningConfig | None = None, weights: RmmWeights | None = None,
                 strict: bool = False, horizon: int | None = None):
        self.prep = _Prepared(_values(gt), valid, bins or BinningConfig.default(), horizon)
        self.weights = weights or RmmWeights.default()
        self.strict = strict

    def counts(self, sim_values) -> np.ndarray:
        return self.prep.counts(_values(sim_values))

    def group(self, counts: np.ndarray) -> np.ndarray:
        """Metric of each group from per-rollout counts ``[..., N, D, A, K]``."""
        n = counts.shape[-4]
        return combine(self.prep.scores(counts.sum(axis=-4), n, self.strict), self.weights)

    def loo(self, counts: np.ndarray) -> np.ndarray:
        """Leave-one-out metric ``[..., N]`` by subtracting each rollout's counts."""
        n = counts.shape[-4]
        if n < 2:
            raise ValueError("leave-one-out needs at least 2 rollouts")
        total = counts.sum(axis=-4, keepdims=True)
        return combine(self.prep.scores(total - counts, n - 1, self.strict), self.weights)

    def single(self, counts: np.ndarray) -> np.ndarray:
        """Single-rollout metric of every rollout, ``[..., N]``."""
        return combine(self.prep.scores(counts, 1, self.strict), self.weights)


def rmm_loo(sim, gt, bins=None, weights=None, valid=None, strict=False, horizon=None,
            naive: bool = False) -> np.ndarray:
    """``RMM_{-i}`` for every rollout of the group.

    The default path subtracts each rollout's counts from the pooled
    histogram; ``naive=True`` recomputes the metric on every subset.
    """
    values = _values(sim)
    N = values.shape[0]
    if N < 2:
        raise ValueError("leave-one-out needs at least 2 rollouts")
    if naive:
        keep = ~np.eye(N, dtype=bool)
        return np.array([rmm(values[keep[i]], gt, bins, weights, valid if valid is not None else
                             (gt.validity if isinstance(gt, FeatureTable) else None), strict, horizon).rmm
                         for i in range(N)])
    prep, weights = _setup(sim, gt, bins, weights, valid, horizon)
    ev = RmmEvaluator.__new__(RmmEvaluator)
    ev.prep, ev.weights, ev.strict = prep, weights, strict
    return ev.loo(prep.counts(values))
