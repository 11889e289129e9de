import numpy as np

from trafficft.world import MapPolyline, Rollout, Scenario, Vocabulary
from trafficft.rollout import replay


def lane_scenario(init, horizon_T=4, lane_width=4.0, eval_ids=None, lengths=None, widths=None,
                  expert_tokens=None, goals=None, history=2):
    """Agents on a long straight lane along the x axis, constant-velocity history."""
    init = np.atleast_2d(np.asarray(init, float))
    A = len(init)
    hist = np.repeat(init[:, None, :], history, axis=1).copy()
    for k in range(history - 1):
        back = (history - 1 - k) * 0.5 * init[:, 3]
        hist[:, k, 0] -= back * np.cos(init[:, 2])
        hist[:, k, 1] -= back * np.sin(init[:, 2])
    lanes = [MapPolyline(0, np.array([[-200.0, 0.0], [400.0, 0.0]]), lane_width),
             MapPolyline(1, np.array([[-200.0, lane_width], [400.0, lane_width]]), lane_width)]
    sc = Scenario("lane", lanes, list(range(A)), hist,
                  np.full(A, 4.5) if lengths is None else np.asarray(lengths, float),
                  np.full(A, 2.0) if widths is None else np.asarray(widths, float),
                  horizon_T, list(range(A)) if eval_ids is None else list(eval_ids), dict(goals or {}))
    tokens = np.full((horizon_T, A), 12) if expert_tokens is None else np.asarray(expert_tokens)
    sc.expert = Rollout("lane", replay(sc, tokens), tokens, np.zeros(tokens.shape))
    return sc


def naive_log_ratio(handle, sc, states, tokens, orig, relabeled):
    """Per-rollout hindsight log ratio by featurizing one (step, agent) at a time."""
    from trafficft.policy import featurize, log_prob_and_grad
    from trafficft.rollout import goal_context

    first = sc.history[:, max(-2, -sc.history.shape[1]), 3]
    out = np.zeros(len(states))
    for n in range(len(states)):
        for t in range(sc.horizon_T):
            prev = first if t == 0 else states[n, t - 1, :, 3]
            fa = featurize(states[n, t], prev, sc.geometry, sc.lengths, sc.widths,
                           goals=goal_context(sc, relabeled), goal_mode=handle.goal_mode)
            fb = featurize(states[n, t], prev, sc.geometry, sc.lengths, sc.widths,
                           goals=goal_context(sc, orig), goal_mode=handle.goal_mode)
            for a in range(sc.num_agents):
                out[n] += (log_prob_and_grad(handle.params, fa[a], int(tokens[n, t, a]))[0]
                           - log_prob_and_grad(handle.params, fb[a], int(tokens[n, t, a]))[0])
    return out


def goal_policy(base_theta, seed=0, scale=1.0):
    """Cloned weights with random goal-channel rows, so goals change the policy."""
    from trafficft.policy import PolicyParams
    theta = np.array(base_theta, float)
    theta[9:12] = np.random.default_rng(seed).normal(0, scale, (3, theta.shape[1]))
    return PolicyParams(theta)
