import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import lane_scenario
from trafficft.rmm import BinningConfig, RmmEvaluator, RmmWeights, combine, rmm, rmm_loo, rmm_single

ONE_DIM = BinningConfig([np.array([0.0, 1.0, 2.0])], ("x",))
ONE_W = RmmWeights(np.array([1.0]), ("kinematic",))


def _hand_instance():
    sim = np.array([0.5, 0.5, 0.5, 0.5, 0.5, 1.5, 1.5, 1.5]).reshape(4, 1, 2, 1)
    gt = np.array([0.5, 1.5]).reshape(1, 2, 1)
    return sim, gt, np.ones((1, 2), bool)


def test_hand_computed_example():
    sim, gt, valid = _hand_instance()
    rep = rmm(sim, gt, ONE_DIM, ONE_W, valid, strict=True)
    assert rep.rmm == pytest.approx(math.sqrt(15) / 8, abs=1e-12)
    np.testing.assert_allclose(rep.histograms[0, 0], [5 / 8, 3 / 8])
    assert rep.gt_bins[0, :, 0].tolist() == [0, 1]


def _random_instance(rng, N=None, A=None, T=None):
    N = N or int(rng.integers(2, 7))
    A = A or int(rng.integers(1, 4))
    T = T or int(rng.integers(1, 5))
    bins = BinningConfig.uniform({"a": (0, 1, 3), "b": (0, 1, 2), "c": (0, 1, 4)}, ("a", "b", "c"))
    w = rng.dirichlet(np.ones(3))
    w[-1] = 1.0 - w[:-1].sum()
    weights = RmmWeights(w, ("kinematic", "interactive", "map"))
    sim = rng.uniform(0, 1, (N, A, T, 3))
    gt = rng.uniform(0, 1, (A, T, 3))
    valid = rng.random((A, T)) < 0.8
    valid[0, 0] = True
    return sim, gt, bins, weights, valid


def test_perfect_match_is_exactly_one():
    # a cruising agent keeps every feature in one bin, so copies of it match with probability 1
    from trafficft.features import extract_batch, validity_set
    sc = lane_scenario([[0.0, 0.0, 0.0, 7.0]], horizon_T=6, lane_width=4.2)
    gt = extract_batch(sc.expert.states, sc)[0]
    assert rmm(np.repeat(gt[None], 3, axis=0), gt, valid=validity_set(sc), strict=True).rmm == 1.0
    assert rmm_single(gt, gt, valid=validity_set(sc), strict=True) == 1.0


def test_single_rollout_time_marginal(smoke):
    # with time-varying features the time-marginal histogram spreads mass, so a copy scores below 1
    from trafficft.features import extract_batch, validity_set
    sc = smoke[0]
    gt = extract_batch(sc.expert.states, sc)[0]
    val = rmm_single(gt, gt, valid=validity_set(sc), strict=True)
    assert 0.0 < val <= 1.0
    assert val == rmm_single(gt, gt, valid=validity_set(sc), strict=True)


def test_zero_mass_bin_scores_zero_in_strict_mode():
    sim = np.full((3, 1, 2, 1), 0.5)
    gt = np.array([0.5, 1.5]).reshape(1, 2, 1)
    rep = rmm(sim, gt, ONE_DIM, ONE_W, np.ones((1, 2), bool), strict=True)
    assert rep.per_dimension[0] == 0.0 and rep.rmm == 0.0
    floored = rmm(sim, gt, ONE_DIM, ONE_W, np.ones((1, 2), bool))
    eps = 1.0 / (3 * 2 * 2)
    assert floored.rmm >= eps / (1 + 2 * eps)


def test_loo_of_two_is_single_of_other():
    sim, gt, valid = _hand_instance()
    pair = sim[:2]
    loo = rmm_loo(pair, gt, ONE_DIM, ONE_W, valid)
    assert loo[0] == rmm_single(pair[1:], gt, ONE_DIM, ONE_W, valid)
    assert loo[1] == rmm_single(pair[:1], gt, ONE_DIM, ONE_W, valid)


def test_identical_rollouts_have_equal_loo():
    rng = np.random.default_rng(0)
    sim, gt, bins, weights, valid = _random_instance(rng)
    same = np.repeat(sim[:1], 5, axis=0)
    loo = rmm_loo(same, gt, bins, weights, valid)
    assert np.all(loo == loo[0])


@given(st.integers(0, 2**31), st.booleans())
def test_incremental_loo_matches_naive(seed, strict):
    sim, gt, bins, weights, valid = _random_instance(np.random.default_rng(seed))
    fast = rmm_loo(sim, gt, bins, weights, valid, strict)
    slow = rmm_loo(sim, gt, bins, weights, valid, strict, naive=True)
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)


@given(st.integers(0, 2**31), st.booleans())
def test_bounds_permutation_and_conservation(seed, strict):
    rng = np.random.default_rng(seed)
    sim, gt, bins, weights, valid = _random_instance(rng)
    rep = rmm(sim, gt, bins, weights, valid, strict)
    assert 0.0 <= rep.rmm <= 1.0
    perm = rmm(sim[rng.permutation(len(sim))], gt, bins, weights, valid, strict)
    assert perm.rmm == pytest.approx(rep.rmm, abs=1e-15)
    for d, K in enumerate(bins.K):
        sums = rep.histograms[d, :, :K].sum(axis=-1)
        np.testing.assert_allclose(sums[valid.any(axis=1)], 1.0, atol=1e-12)
    assert rep.rmm == pytest.approx(float(np.dot(weights.w, rep.per_dimension)), abs=1e-12)


def test_mean_loo_approaches_group_metric():
    rng = np.random.default_rng(5)
    gaps = {}
    for N in (8, 32):
        diffs = []
        for _ in range(40):
            sim, gt, bins, weights, valid = _random_instance(rng, N=N, A=2, T=4)
            diffs.append(abs(rmm_loo(sim, gt, bins, weights, valid).mean() - rmm(sim, gt, bins, weights, valid).rmm))
        gaps[N] = np.mean(diffs)
    assert gaps[32] < gaps[8]


def test_evaluator_matches_functional_api():
    rng = np.random.default_rng(1)
    sim, gt, bins, weights, valid = _random_instance(rng, N=5)
    ev = RmmEvaluator(gt, valid, bins, weights)
    c = ev.counts(sim)
    assert ev.group(c) == pytest.approx(rmm(sim, gt, bins, weights, valid).rmm, abs=1e-15)
    np.testing.assert_allclose(ev.single(c), [rmm_single(s, gt, bins, weights, valid) for s in sim], atol=1e-15)


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        RmmWeights(np.array([0.5, 0.6]), ("kinematic", "map"))
    w = RmmWeights.default()
    assert math.fsum(w.w) == pytest.approx(1.0, abs=1e-12)
    assert combine(np.ones(9), w) == 1.0


def test_binning_validation_and_dict_roundtrip():
    with pytest.raises(ValueError):
        BinningConfig([np.array([0.0, 1.0])], ("x",))
    with pytest.raises(ValueError):
        BinningConfig([np.array([0.0, 2.0, 1.0])], ("x",))
    b = BinningConfig.default()
    back = BinningConfig.from_dict(b.to_dict())
    assert all(np.array_equal(x, y) for x, y in zip(b.edges, back.edges))
    with pytest.raises(ValueError):
        BinningConfig.from_dict({"bogus": {"edges": [0, 1, 2]}})


def test_empty_validity_set_rejected():
    sim, gt, valid = _hand_instance()
    with pytest.raises(ValueError):
        rmm(sim, gt, ONE_DIM, ONE_W, np.zeros((1, 2), bool))


def test_report_serialises():
    sim, gt, valid = _hand_instance()
    rep = rmm(sim, gt, ONE_DIM, ONE_W, valid, strict=True)
    assert '"rmm"' in rep.to_json()
