"""Bradley-Terry and Plackett-Luce preference probabilities, reward shifts
and reward normalization.

Reward tables are ``(n_prompts, n_completions)`` float arrays; every
probability is evaluated in log space so that large rewards do not overflow.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ._validation import check_index, check_policy, check_reward


def log_sigmoid(z):
    """``log(sigmoid(z))`` computed as ``-softplus(-z)``."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def bt_prob(r, x, y1, y2) -> float:
    """Probability that ``y1`` is preferred to ``y2`` for prompt ``x``."""
    r = check_reward(r)
    x = check_index(x, r.shape[0], "x")
    y1 = check_index(y1, r.shape[1], "y1")
    y2 = check_index(y2, r.shape[1], "y2")
    return float(expit(r[x, y1] - r[x, y2]))


def pl_log_prob(r, x, order) -> float:
    r = check_reward(r)
    x = check_index(x, r.shape[0], "x")
    order = [check_index(y, r.shape[1], "order entry") for y in order]
    if len(order) < 2:
        raise ValueError("a ranking needs at least two completions")
    if len(set(order)) != len(order):
        raise ValueError(f"ranking contains duplicate completions: {order}")
    s = r[x, order]
    # suffix log-sum-exps: lse(s[k:]) for every k
    suffix = np.logaddexp.accumulate(s[::-1])[::-1]
    return float(np.sum(s - suffix))


def pl_prob(r, x, order) -> float:
    """Plackett-Luce probability of the ranking ``order`` (best first)."""
    return float(np.exp(pl_log_prob(r, x, order)))


def shift_reward(r, f) -> np.ndarray:
    """Add the per-prompt offset ``f[x]`` to every completion of prompt ``x``."""
    r = check_reward(r)
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (r.shape[0],):
        raise ValueError(f"shift must have shape ({r.shape[0]},), got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("shift contains non-finite entries")
    return r + f[:, None]


def normalize_reward(r, weights) -> np.ndarray:
    """Subtract the per-prompt ``weights``-expectation of ``r``.

    The result lies in the same equivalence class as ``r`` and has zero
    weighted mean in every row.
    """
    r = check_reward(r)
    w = check_policy(weights, shape=r.shape)
    return shift_reward(r, -np.sum(w * r, axis=1))


def pair_log_likelihood(r, x, yw, yl) -> np.ndarray:
    """Vectorized ``log sigmoid(r[x, yw] - r[x, yl])`` over record arrays."""
    r = np.asarray(r, dtype=np.float64)
    return log_sigmoid(r[x, yw] - r[x, yl])


def ranking_log_likelihood(r, x, orders) -> np.ndarray:
    """Vectorized Plackett-Luce log-likelihood of ``orders`` (shape (n, K))."""
    r = np.asarray(r, dtype=np.float64)
    s = r[np.asarray(x)[:, None], orders]
    suffix = np.logaddexp.accumulate(s[:, ::-1], axis=1)[:, ::-1]
    return np.sum(s - suffix, axis=1)
