"""Closed-form solutions of the KL-constrained reward maximization problem.

For a reward table ``r``, reference policy ``pi_ref`` and temperature ``beta``
the maximizer of ``E_pi[r] - beta * KL(pi || pi_ref)`` is

    pi*(y|x) = pi_ref(y|x) * exp(r(x, y) / beta) / Z(x)

and everything in this module is built on that identity: the partition
function, the inverse map from a policy back to a reward, the projection that
picks the unique member of a reward's equivalence class with ``Z = 1``, and
exact evaluation of KL, expected reward and the regularized objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import (
    check_index,
    check_policy,
    check_positive,
    check_prompt_weights,
    check_reward,
)

# rows longer than this are summed with math.fsum
COMPENSATED_ROW_LEN = 1024


@dataclass(frozen=True)
class FrontierPoint:
    kl: float
    expected_reward: float
    beta: float
    method_tag: str


def _row_log_partition(logits_row: np.ndarray) -> float:
    if logits_row.size <= COMPENSATED_ROW_LEN:
        return float(logsumexp(logits_row))
    m = float(np.max(logits_row))
    return m + math.log(math.fsum(np.exp(logits_row - m)))


def log_partitions(r, pi_ref, beta) -> np.ndarray:
    """Per-prompt ``log Z(x)`` as a vector."""
    beta = check_positive(beta, "beta")
    r = check_reward(r)
    pi_ref = check_policy(pi_ref, shape=r.shape, strictly_positive=True)
    logits = np.log(pi_ref) + r / beta
    if r.shape[1] <= COMPENSATED_ROW_LEN:
        return logsumexp(logits, axis=1)
    return np.array([_row_log_partition(row) for row in logits])


def log_partition(r, pi_ref, beta, x) -> float:
    """``log sum_y pi_ref(y|x) exp(r(x, y) / beta)`` for a single prompt."""
    beta = check_positive(beta, "beta")
    r = check_reward(r)
    pi_ref = check_policy(pi_ref, shape=r.shape, strictly_positive=True)
    x = check_index(x, r.shape[0], "x")
    return _row_log_partition(np.log(pi_ref[x]) + r[x] / beta)


def optimal_log_policy(r, pi_ref, beta) -> np.ndarray:
    beta = check_positive(beta, "beta")
    r = check_reward(r)
    pi_ref = check_policy(pi_ref, shape=r.shape, strictly_positive=True)
    logits = np.log(pi_ref) + r / beta
    return logits - log_partitions(r, pi_ref, beta)[:, None]


def optimal_policy(r, pi_ref, beta) -> np.ndarray:
    """The maximizer of the KL-regularized objective for reward ``r``."""
    return np.exp(optimal_log_policy(r, pi_ref, beta))


def reward_from_policy(pi, pi_ref, beta, log_Z) -> np.ndarray:
    """Invert :func:`optimal_policy`: ``beta * log(pi / pi_ref) + beta * log Z``."""
    beta = check_positive(beta, "beta")
    pi_ref = check_policy(pi_ref, strictly_positive=True)
    pi = check_policy(pi, shape=pi_ref.shape)
    if np.any(pi == 0):
        raise ValueError("policy has a zero entry where the reference is positive")
    log_Z = np.asarray(log_Z, dtype=np.float64)
    if log_Z.shape != (pi.shape[0],):
        raise ValueError(f"log_Z must have shape ({pi.shape[0]},)")
    return beta * (np.log(pi) - np.log(pi_ref)) + beta * log_Z[:, None]


def project_reward(r, pi_ref, beta) -> np.ndarray:
    """Representative of ``r``'s equivalence class whose partition function is 1."""
    r = check_reward(r)
    return r - beta * log_partitions(r, pi_ref, beta)[:, None]


def _kl_rows(pi, pi_ref) -> np.ndarray:
    pi_ref = check_policy(pi_ref)
    pi = check_policy(pi, shape=pi_ref.shape)
    if np.any((pi > 0) & (pi_ref == 0)):
        raise ValueError("policy is not absolutely continuous w.r.t. the reference")
    pos = pi > 0
    terms = np.zeros_like(pi)
    terms[pos] = pi[pos] * (np.log(pi[pos]) - np.log(pi_ref[pos]))
    return terms.sum(axis=1)


def kl_to_ref(pi, pi_ref, prompt_weights=None) -> float:
    """Prompt-weighted ``KL(pi || pi_ref)`` in nats (uniform weights by default)."""
    rows = _kl_rows(pi, pi_ref)
    w = check_prompt_weights(prompt_weights, rows.shape[0])
    return float(np.dot(w, rows))


def expected_reward(pi, r, prompt_weights=None) -> float:
    r = check_reward(r)
    pi = check_policy(pi, shape=r.shape)
    w = check_prompt_weights(prompt_weights, r.shape[0])
    return float(np.dot(w, np.sum(pi * r, axis=1)))


def rl_objective(pi, r, pi_ref, beta, prompt_weights=None) -> float:
    """``E_{x~w, y~pi}[r(x, y)] - beta * KL(pi || pi_ref)``."""
    beta = check_positive(beta, "beta")
    return expected_reward(pi, r, prompt_weights) - beta * kl_to_ref(
        pi, pi_ref, prompt_weights
    )


def frontier_point(pi, inst, beta, tag: str) -> FrontierPoint:
    """KL to the reference and true expected reward of ``pi`` on ``inst``."""
    beta = check_positive(beta, "beta")
    return FrontierPoint(
        kl=kl_to_ref(pi, inst.pi_ref),
        expected_reward=expected_reward(pi, inst.reward_true),
        beta=beta,
        method_tag=tag,
    )


def exact_frontier(inst, betas) -> list[FrontierPoint]:
    return [
        frontier_point(optimal_policy(inst.reward_true, inst.pi_ref, b), inst, b, "exact")
        for b in betas
    ]


def frontier_reward_at_kl(inst, kl: float, tol: float = 1e-12) -> float:
    """Best achievable expected true reward among policies with KL equal to ``kl``.

    The optimal frontier is traced by ``beta``; the KL of ``pi*(beta)`` is
    monotone in ``beta`` so the matching temperature is found by bisection in
    ``log beta``. Targets beyond the reachable range clamp to the greedy
    endpoint (``beta -> 0``).
    """
    r, pi_ref = inst.reward_true, inst.pi_ref

    def kl_at(log_b):
        return kl_to_ref(optimal_policy(r, pi_ref, math.exp(log_b)), pi_ref)

    lo, hi = math.log(1e-8), math.log(1e8)
    if kl <= 0:
        return expected_reward(pi_ref, r)
    if kl >= kl_at(lo):
        return expected_reward(optimal_policy(r, pi_ref, math.exp(lo)), r)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if kl_at(mid) > kl:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return expected_reward(optimal_policy(r, pi_ref, math.exp(0.5 * (lo + hi))), r)
