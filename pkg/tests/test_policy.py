import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from trafficft.policy import (FEATURE_DIM, GoalContext, PolicyHandle, PolicyParams, categorical_kl, featurize,
                              kl_and_grad, kl_to_reference, log_prob_and_grad, log_softmax, probabilities,
                              sample_tokens, score_gradients, token_log_probs)
from trafficft.rollout import goal_context, observe

from helpers import lane_scenario

V = 25


def _triple(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1, (FEATURE_DIM, V)), rng.normal(0, 1, FEATURE_DIM), int(rng.integers(V))


def test_uniform_policy_log_prob():
    lp, _ = log_prob_and_grad(PolicyParams.zeros(), np.ones(FEATURE_DIM), 7)
    assert lp == pytest.approx(-np.log(25), abs=1e-15)


def _fd_grad(theta, f, tok, h=1e-5):
    g = np.zeros_like(theta)
    for i, j in np.ndindex(theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[i, j] += h
        tm[i, j] -= h
        g[i, j] = (log_prob_and_grad(tp, f, tok)[0] - log_prob_and_grad(tm, f, tok)[0]) / (2 * h)
    return g


@given(st.integers(0, 2**31))
def test_gradient_matches_finite_differences(seed):
    theta, f, tok = _triple(seed)
    _, g = log_prob_and_grad(theta, f, tok)
    assert np.max(np.abs(g - _fd_grad(theta, f, tok))) < 1e-6


def test_score_identity():
    theta, f, _ = _triple(3)
    p = np.exp(log_softmax(f @ theta))
    total = sum(p[k] * log_prob_and_grad(theta, f, k)[1] for k in range(V))
    assert np.max(np.abs(total)) < 1e-12


def test_batched_score_gradients_match_single():
    rng = np.random.default_rng(4)
    theta = rng.normal(0, 1, (FEATURE_DIM, V))
    f = rng.normal(0, 1, (3, 2, FEATURE_DIM))
    tok = rng.integers(0, V, (3, 2))
    w = rng.normal(0, 1, (3, 2))
    ref = sum(w[i, j] * log_prob_and_grad(theta, f[i, j], tok[i, j])[1] for i in range(3) for j in range(2))
    np.testing.assert_allclose(score_gradients(theta, f, tok, w), ref, atol=1e-12)
    assert np.all(score_gradients(theta, f, tok, np.zeros((3, 2))) == 0)


def test_kl_examples():
    lp, lq = np.log([0.9, 0.1]), np.log([0.5, 0.5])
    assert categorical_kl(lp, lq) == pytest.approx(0.9 * np.log(1.8) + 0.1 * np.log(0.2), abs=1e-12)
    assert categorical_kl(lp, lq) == pytest.approx(0.3681, abs=1e-4)
    p = PolicyParams(np.random.default_rng(0).normal(0, 1, (FEATURE_DIM, V)))
    f = np.random.default_rng(1).normal(0, 1, (10, FEATURE_DIM))
    assert kl_to_reference(p, p, f) == 0.0


@given(st.integers(0, 2**31))
def test_kl_nonnegative_and_gradient(seed):
    rng = np.random.default_rng(seed)
    theta, ref = rng.normal(0, 1, (2, FEATURE_DIM, V))
    f = rng.normal(0, 1, (4, FEATURE_DIM))
    kl, g = kl_and_grad(theta, ref, f)
    assert kl >= 0
    h = 1e-6
    for i, j in [(0, 0), (3, 7), (11, 24)]:
        tp, tm = theta.copy(), theta.copy()
        tp[i, j] += h
        tm[i, j] -= h
        fd = (kl_and_grad(tp, ref, f)[0] - kl_and_grad(tm, ref, f)[0]) / (2 * h)
        assert g[i, j] == pytest.approx(fd, abs=1e-6)


@given(st.integers(0, 2**31), st.floats(0.2, 3.0), st.sampled_from([None, 1, 5, 32]))
def test_probabilities_sum_to_one(seed, temperature, top_k):
    theta, f, _ = _triple(seed)
    p = probabilities(theta, np.stack([f, -f]), temperature, top_k)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    if top_k is not None and top_k < V:
        assert np.all((p > 0).sum(axis=-1) == top_k)


def test_sampling_frequencies_match_softmax():
    theta, f, _ = _triple(8)
    lp = log_softmax(f @ theta * 0.3)
    n = 100_000
    tok = sample_tokens(np.broadcast_to(lp, (n, V)), np.random.default_rng(2).random(n))
    counts = np.bincount(tok, minlength=V)
    expected = np.exp(lp) * n
    keep = expected >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 1e-3


def test_score_function_has_zero_mean():
    theta, f, _ = _triple(9)
    lp = log_softmax(f @ theta * 0.3)
    theta = theta * 0.3
    n = 20_000
    tok = sample_tokens(np.broadcast_to(lp, (n, V)), np.random.default_rng(5).random(n))
    p = np.exp(lp)
    grads = f[None, :, None] * (np.eye(V)[tok] - p)[:, None, :]
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.where(se > 0, mean / np.where(se > 0, se, 1), 0)
    assert np.mean(np.abs(z) < 3) >= 0.95


def test_params_validation_and_versioning(tmp_path):
    p = PolicyParams.zeros()
    with pytest.raises(ValueError):
        p.theta[0, 0] = 1.0
    with pytest.raises(ValueError):
        PolicyParams(np.full((FEATURE_DIM, V), np.nan))
    q = p.updated(np.ones((FEATURE_DIM, V)))
    assert q.version > p.version
    q.save(tmp_path / "p.json")
    back = PolicyParams.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.theta, q.theta)
    assert back.version == q.version
    with pytest.raises(ValueError):
        PolicyHandle(PolicyParams.zeros(FEATURE_DIM, 7))
    with pytest.raises(ValueError):
        PolicyHandle(p, goal_mode="telepathy")


def _goal_feats(mode, goal):
    sc = lane_scenario([[0.0, 0.0, 0.0, 5.0], [30.0, 4.0, 0.0, 5.0]], goals={0: goal})
    h = PolicyHandle(PolicyParams.zeros(), mode)
    return observe(sc, sc.expert.states[None], h, goal_context(sc))[0], sc


def test_goal_channels():
    f, _ = _goal_feats("none", (50.0, 0.0))
    assert np.all(f[..., 9:] == 0)
    f, sc = _goal_feats("concat", (0.0, 0.0))
    assert f[0, 0, 9] == 0.0                                    # goal at the agent's start
    assert np.all(f[:, 1, 9:] == 0)                             # agent without a goal
    f, _ = _goal_feats("indication", (60.0, 0.3))
    assert np.all(f[:, 0, 11] == 1.0)
    f, _ = _goal_feats("indication", (60.0, 4.2))
    assert np.all(f[:, 0, 11] == 0.0)


def test_token_log_probs_consistent():
    theta, f, tok = _triple(11)
    assert token_log_probs(theta, f, np.array(tok)) == pytest.approx(log_prob_and_grad(theta, f, tok)[0])
