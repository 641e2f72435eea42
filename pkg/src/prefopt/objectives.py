"""Trainable losses over tabular policies and rewards, with analytic gradients.

A tabular policy is a logit matrix ``theta[x, y]`` with ``pi_theta(.|x) =
softmax(theta[x])``; a tabular reward model is a free table ``phi[x, y]``.
Every loss returns a :class:`LossReport` whose ``grad`` is flattened in the
same row-major layout as the parameters, so optimizers never need to know
which loss they are driving.

Soft datasets are handled by expanding each unordered record into its two
directed comparisons weighted by ``p`` and ``1 - p``; the loss is still a
mean over the original records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from ._validation import (
    WrongKindError,
    check_policy,
    check_positive,
    check_prompt_weights,
    check_reward,
)
from .exact import log_partitions

DEFAULT_BETA = 0.1


@dataclass
class ParametricPolicy:
    """Free logits; probabilities are the row-wise softmax."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be a finite 2-D array")

    @classmethod
    def from_policy(cls, pi) -> "ParametricPolicy":
        pi = check_policy(pi, strictly_positive=True)
        return cls(np.log(pi))

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)


@dataclass
class ParametricReward:
    values: np.ndarray

    def __post_init__(self):
        self.values = check_reward(np.array(self.values, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class LossReport:
    loss: float
    grad: np.ndarray
    aux: dict = field(default_factory=dict)


def _logits(theta, shape=None) -> np.ndarray:
    if isinstance(theta, ParametricPolicy):
        arr = theta.logits
    elif isinstance(theta, ParametricReward):
        arr = theta.values
    else:
        arr = np.asarray(theta, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def _directed(data, allowed=("pairs", "soft")):
    """Return ``(x, winner, loser, weight, n_records)`` for pair-like data."""
    if data.kind not in allowed:
        raise WrongKindError(f"expected a dataset of kind {allowed}, got {data.kind!r}")
    n = len(data)
    if data.kind == "pairs":
        return data.x, data.a, data.b, np.ones(n), n
    x = np.concatenate([data.x, data.x])
    w = np.concatenate([data.a, data.b])
    l = np.concatenate([data.b, data.a])
    wt = np.concatenate([data.p, 1.0 - data.p])
    return x, w, l, wt, n


def _scatter(shape, x, y, values) -> np.ndarray:
    g = np.zeros(shape)
    np.add.at(g, (x, y), values)
    return g


def implicit_reward(theta, pi_ref, beta) -> np.ndarray:
    """``beta * (log pi_theta - log pi_ref)``."""
    beta = check_positive(beta, "beta")
    pi_ref = check_policy(pi_ref, strictly_positive=True)
    return beta * (log_softmax(_logits(theta, pi_ref.shape), axis=1) - np.log(pi_ref))


def _bt_pair_loss(scores, data, scale):
    """Shared Bradley-Terry NLL over score table ``scores``.

    ``scale`` is d(score)/d(param) for the winner/loser entries.
    """
    x, w, l, wt, n = _directed(data)
    z = scores[x, w] - scores[x, l]
    losses = np.logaddexp(0.0, -z)
    coef = expit(-z)
    loss = float(np.sum(wt * losses) / n)
    dz = -wt * coef * scale / n
    grad = _scatter(scores.shape, x, w, dz) - _scatter(scores.shape, x, l, dz)
    aux = {
        "margin": float(np.sum(wt * z) / n),
        "weight_mean": float(np.sum(wt * coef) / n),
    }
    return loss, grad, aux


def dpo_loss(theta, pi_ref, beta, data) -> LossReport:
    """Bradley-Terry NLL of the preferences under the implicit reward."""
    pi_ref = check_policy(pi_ref, strictly_positive=True)
    rhat = implicit_reward(_logits(theta, pi_ref.shape), pi_ref, beta)
    if len(data) == 0:
        raise ValueError("empty dataset")
    loss, grad, aux = _bt_pair_loss(rhat, data, beta)
    return LossReport(loss, grad.ravel(), aux)


def dpo_grad_direct(theta, pi_ref, beta, data) -> np.ndarray:
    """DPO gradient assembled from ``grad log pi(y|x) = e_y - pi(.|x)``.

    Each comparison pushes the winner up and the loser down, weighted by
    ``sigmoid(rhat_l - rhat_w)``: how wrongly the implicit reward orders it.
    """
    pi_ref = check_policy(pi_ref, strictly_positive=True)
    theta = _logits(theta, pi_ref.shape)
    beta = check_positive(beta, "beta")
    x, w, l, wt, n = _directed(data)
    pi = softmax(theta, axis=1)
    rhat = beta * (log_softmax(theta, axis=1) - np.log(pi_ref))
    coef = wt * expit(rhat[x, l] - rhat[x, w]) / n
    m = theta.shape[1]
    eye = np.eye(m)
    dlog_w = eye[w] - pi[x]
    dlog_l = eye[l] - pi[x]
    contrib = -beta * coef[:, None] * (dlog_w - dlog_l)
    grad = np.zeros_like(theta)
    np.add.at(grad, x, contrib)
    return grad.ravel()


def dpo_weights(theta, pi_ref, beta, data) -> np.ndarray:
    """Per-directed-record weighting coefficients ``sigmoid(rhat_l - rhat_w)``."""
    rhat = implicit_reward(theta, pi_ref, beta)
    x, w, l, _, _ = _directed(data)
    return expit(rhat[x, l] - rhat[x, w])


def _pl_loss(scores, data, scale):
    if data.kind != "rankings":
        raise WrongKindError(f"expected a rankings dataset, got {data.kind!r}")
    n = len(data)
    x = data.x[:, None]
    order = data.order
    s = scores[x, order]
    suffix = np.logaddexp.accumulate(s[:, ::-1], axis=1)[:, ::-1]
    loglik = np.sum(s - suffix, axis=1)
    # d(-loglik)/ds_i = -1 + sum_{k <= i} exp(s_i - suffix_k)
    acc = np.logaddexp.accumulate(-suffix, axis=1)
    ds = -1.0 + np.exp(s + acc)
    grad = np.zeros_like(scores)
    np.add.at(grad, (np.broadcast_to(x, order.shape), order), ds * scale / n)
    return float(-np.mean(loglik)), grad


def pl_dpo_loss(theta, pi_ref, beta, data) -> LossReport:
    """Plackett-Luce NLL of rankings under the implicit reward."""
    pi_ref = check_policy(pi_ref, strictly_positive=True)
    rhat = implicit_reward(_logits(theta, pi_ref.shape), pi_ref, beta)
    loss, grad = _pl_loss(rhat, data, beta)
    return LossReport(loss, grad.ravel(), {})


def rm_nll(phi, data) -> LossReport:
    """Bradley-Terry NLL of a free reward table."""
    values = check_reward(_logits(phi))
    if data.kind not in ("pairs", "soft"):
        raise WrongKindError(f"reward-model NLL needs pairs or soft data, got {data.kind!r}")
    loss, grad, aux = _bt_pair_loss(values, data, 1.0)
    return LossReport(loss, grad.ravel(), aux)


def _targets(data, on: str):
    """Completions whose likelihood is maximized, with weights summing to ``n``."""
    x, w, l, wt, n = _directed(data)
    if on == "winners":
        return x, w, wt, n
    if on == "both":
        # every completion appearing in a record, half weight each
        xs = np.concatenate([x, x])
        ys = np.concatenate([w, l])
        return xs, ys, 0.5 * np.concatenate([wt, wt]), n
    raise ValueError(f"on must be 'winners' or 'both', got {on!r}")


def sft_nll(theta, data, shape=None, on: str = "winners") -> LossReport:
    """Mean ``-log pi_theta(y_w|x)`` (Preferred-FT); ``on='both'`` fits every
    completion in the data instead."""
    theta = _logits(theta, shape)
    if theta.ndim != 2:
        raise ValueError("pass a 2-D logit table or a shape")
    xs, ys, wt, n = _targets(data, on)
    logp = log_softmax(theta, axis=1)
    pi = np.exp(logp)
    loss = float(-np.sum(wt * logp[xs, ys]) / n)
    grad = np.zeros_like(theta)
    np.add.at(grad, xs, (wt / n)[:, None] * pi[xs])
    grad -= _scatter(theta.shape, xs, ys, wt / n)
    return LossReport(loss, grad.ravel(), {})


def unlikelihood_loss(theta, data, alpha, shape=None) -> LossReport:
    """Mean ``-log pi(y_w|x) + alpha * log pi(y_l|x)``.

    Unbounded below for ``alpha > 0``: driving ``pi(y_l|x)`` to zero lowers
    the loss without limit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    theta = _logits(theta, shape)
    x, w, l, wt, n = _directed(data)
    logp = log_softmax(theta, axis=1)
    pi = np.exp(logp)
    loss = float(np.sum(wt * (-logp[x, w] + alpha * logp[x, l])) / n)
    c = wt / n
    grad = np.zeros_like(theta)
    np.add.at(grad, x, ((1.0 - alpha) * c)[:, None] * pi[x])
    grad -= _scatter(theta.shape, x, w, c)
    grad += _scatter(theta.shape, x, l, alpha * c)
    return LossReport(loss, grad.ravel(), {"margin": float(np.sum(c * (logp[x, w] - logp[x, l])))})


def shaped_reward(r_phi, theta, pi_ref, beta, x, y) -> float:
    """``r_phi(x, y) - beta * (log pi_theta(y|x) - log pi_ref(y|x))``."""
    r_phi = check_reward(r_phi)
    pi_ref = check_policy(pi_ref, shape=r_phi.shape, strictly_positive=True)
    logp = log_softmax(_logits(theta, r_phi.shape)[x])
    return float(r_phi[x, y] - beta * (logp[y] - np.log(pi_ref[x, y])))


def ac_objective(theta, r_phi, pi_ref, beta, prompt_weights=None, normalize: bool = True) -> float:
    """Exact expected KL-shaped reward under ``pi_theta``.

    With ``normalize`` the reward is first moved to its zero-log-partition
    representative (subtracting ``beta * log Z(x)``, the soft value of the
    reference policy); the shift is constant in ``theta``.
    """
    beta = check_positive(beta, "beta")
    r_phi = check_reward(r_phi)
    pi_ref = check_policy(pi_ref, shape=r_phi.shape, strictly_positive=True)
    w = check_prompt_weights(prompt_weights, r_phi.shape[0])
    logp = log_softmax(_logits(theta, r_phi.shape), axis=1)
    shaped = r_phi - beta * (logp - np.log(pi_ref))
    if normalize:
        shaped = shaped - beta * log_partitions(r_phi, pi_ref, beta)[:, None]
    return float(np.dot(w, np.sum(np.exp(logp) * shaped, axis=1)))


def ac_gradient(theta, r_phi, pi_ref, beta, prompt_weights=None) -> np.ndarray:
    """Exact gradient of :func:`ac_objective` w.r.t. the logits.

    ``d/d theta_k = pi_k * (g_k - E_pi[g])`` with ``g`` the shaped reward; the
    ``-beta * d log pi`` term has zero expectation and drops out.
    """
    r_phi = check_reward(r_phi)
    w = check_prompt_weights(prompt_weights, r_phi.shape[0])
    logp = log_softmax(_logits(theta, r_phi.shape), axis=1)
    pi = np.exp(logp)
    g = r_phi - beta * (logp - np.log(pi_ref))
    adv = g - np.sum(pi * g, axis=1, keepdims=True)
    return (w[:, None] * pi * adv).ravel()
