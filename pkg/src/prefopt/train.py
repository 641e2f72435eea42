"""Gradient-descent training, reward-model fitting, REINFORCE, sampling and
win-rate evaluation over tabular policies."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax

from ._validation import (
    DivergenceError,
    WrongKindError,
    check_policy,
    check_positive,
    check_reward,
)
from .exact import expected_reward, kl_to_ref, log_partitions, optimal_policy
from .objectives import (
    DEFAULT_BETA,
    LossReport,
    ParametricPolicy,
    ParametricReward,
    ac_gradient,
    ac_objective,
    dpo_loss,
    pl_dpo_loss,
    rm_nll,
    sft_nll,
    unlikelihood_loss,
)
from .prefmodel import normalize_reward
from .taskgen import Instance, PreferenceDataset

METHODS = ("dpo", "pl_dpo", "rm_then_rl", "reinforce", "sft", "preferred_ft", "unlikelihood")
MODES = ("sampled", "soft")
OPTIMIZERS = ("gd", "rmsprop", "natural")

# which dataset kinds each method accepts
METHOD_KINDS = {
    "dpo": ("pairs", "soft"),
    "pl_dpo": ("rankings",),
    "rm_then_rl": ("pairs", "soft"),
    "reinforce": ("pairs", "soft"),
    "sft": ("pairs", "soft"),
    "preferred_ft": ("pairs", "soft"),
    "unlikelihood": ("pairs", "soft"),
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one run.

    ``lr=None`` selects a step size from a curvature bound of the loss (see
    :func:`auto_lr`); ``batch_size=None`` means full-batch gradient descent.
    ``reinforce_samples=0`` makes REINFORCE use the exact expectation.
    ``optimizer=None`` picks ``natural`` for exact REINFORCE and ``gd``
    otherwise.
    """

    method: str = "dpo"
    beta: float = DEFAULT_BETA
    alpha: float = 1.0
    lr: float | None = None
    steps: int = 2000
    warmup_steps: int = 0
    seed: int = 0
    mode: str = "soft"
    eval_every: int = 100
    optimizer: str | None = None
    batch_size: int | None = None
    reinforce_samples: int = 0
    reinforce_baseline: bool = True
    reinforce_reward: str = "learned"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.optimizer is not None and self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer == "natural" and self.method != "reinforce":
            raise ValueError("the natural-gradient step is only defined for reinforce")
        check_positive(self.beta, "beta")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr is not None:
            check_positive(self.lr, "lr")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reinforce_samples < 0:
            raise ValueError("reinforce_samples must be >= 0")
        if self.reinforce_reward not in ("learned", "true"):
            raise ValueError("reinforce_reward must be 'learned' or 'true'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    kl: float
    expected_reward: float
    aux: dict = field(default_factory=dict)


@dataclass
class RunTrace:
    method: str
    records: list[TraceRecord]
    policy: ParametricPolicy | None = None
    reward: ParametricReward | None = None

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    @property
    def probs(self) -> np.ndarray:
        return self.policy.probs


# -- step sizes --------------------------------------------------------------


def _max_degree(data: PreferenceDataset, shape) -> float:
    """Largest total record weight touching any single table entry."""
    deg = np.zeros(shape)
    if data.kind == "rankings":
        np.add.at(deg, (np.broadcast_to(data.x[:, None], data.order.shape), data.order), 1.0)
    else:
        np.add.at(deg, (data.x, data.a), 1.0)
        np.add.at(deg, (data.x, data.b), 1.0)
    return float(deg.max())


def _max_prompt_count(data: PreferenceDataset, n_prompts: int) -> float:
    return float(np.bincount(data.x, minlength=n_prompts).max())


def auto_lr(method: str, data: PreferenceDataset, shape, beta: float, alpha: float = 1.0) -> float:
    """Step size ``1 / L`` for an upper bound ``L`` on the loss curvature.

    Bradley-Terry style losses have Hessian at most a quarter of the
    comparison-graph Laplacian divided by the record count; Laplacian
    eigenvalues are bounded by twice the maximum degree. Policy losses scale
    the implicit reward by ``beta``, so their curvature picks up ``beta**2``.
    """
    n = len(data)
    if method in ("dpo", "pl_dpo"):
        k = 1 if data.kind != "rankings" else data.K - 1
        return 1.0 / (beta**2 * k * _max_degree(data, shape) / (2.0 * n))
    if method in ("rm_then_rl", "reinforce", "rm"):
        return 1.0 / (_max_degree(data, shape) / (2.0 * n))
    if method in ("sft", "preferred_ft", "unlikelihood"):
        per_record = 2.0 if data.kind == "soft" else 1.0
        return 1.0 / ((1.0 + alpha) * per_record * _max_prompt_count(data, shape[0]) / (2.0 * n))
    raise ValueError(f"no automatic step size for {method!r}")


def reinforce_lr(beta: float, n_prompts: int, optimizer: str) -> float:
    """Default REINFORCE step size.

    The objective is ``beta`` times a negative KL. In natural coordinates the
    exact update contracts the logit error by ``1 - lr * beta`` per step; for
    the plain gradient the softmax Hessian is bounded by 1/2 per prompt weight.
    """
    if optimizer == "natural":
        return 0.1 / beta
    return n_prompts / beta


class _Optimizer:
    def __init__(self, cfg: TrainConfig, lr: float, n_params: int):
        self.kind = cfg.optimizer or "gd"
        self.lr = lr
        self.warmup = cfg.warmup_steps
        self.sq = np.zeros(n_params)

    def rate(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr

    def delta(self, grad: np.ndarray, step: int) -> np.ndarray:
        lr = self.rate(step)
        if self.kind == "rmsprop":  # natural and gd share the plain update
            self.sq = 0.99 * self.sq + 0.01 * grad * grad
            return lr * grad / (np.sqrt(self.sq) + 1e-8)
        return lr * grad


# -- objectives bound to data ------------------------------------------------

Objective = Callable[[np.ndarray, PreferenceDataset], LossReport]


def check_kind(method: str, data: PreferenceDataset) -> None:
    if data.kind not in METHOD_KINDS[method]:
        raise WrongKindError(
            f"method {method!r} cannot train on a {data.kind!r} dataset "
            f"(accepts {METHOD_KINDS[method]})"
        )


def policy_objective(cfg: TrainConfig, pi_ref) -> Objective:
    """The loss ``cfg.method`` minimizes, as ``f(logits, data) -> LossReport``."""
    if cfg.method == "dpo":
        return lambda th, d: dpo_loss(th, pi_ref, cfg.beta, d)
    if cfg.method == "pl_dpo":
        return lambda th, d: pl_dpo_loss(th, pi_ref, cfg.beta, d)
    if cfg.method == "preferred_ft":
        return lambda th, d: sft_nll(th, d, on="winners")
    if cfg.method == "sft":
        return lambda th, d: sft_nll(th, d, on="both")
    if cfg.method == "unlikelihood":
        return lambda th, d: unlikelihood_loss(th, d, cfg.alpha)
    raise ValueError(f"{cfg.method!r} is not trained by direct loss minimization")


def _subset(data: PreferenceDataset, idx: np.ndarray) -> PreferenceDataset:
    pick = lambda col: None if col is None else col[idx]  # noqa: E731
    return PreferenceDataset(
        data.kind, data.x[idx], data.instance_digest,
        a=pick(data.a), b=pick(data.b), p=pick(data.p), order=pick(data.order),
    )


def _check_finite(rep: LossReport, step: int) -> None:
    if not math.isfinite(rep.loss):
        raise DivergenceError(step, "loss")
    if not np.all(np.isfinite(rep.grad)):
        raise DivergenceError(step, "gradient")


def _descend(objective, params, data, cfg, lr, evaluate) -> tuple[np.ndarray, list[TraceRecord]]:
    """Plain (or RMSprop) descent loop shared by policy and reward fitting."""
    shape = params.shape
    params = params.ravel().copy()
    opt = _Optimizer(cfg, lr, params.size)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for step in range(cfg.steps):
        batch = data
        if cfg.batch_size is not None and cfg.batch_size < len(data):
            batch = _subset(data, rng.choice(len(data), size=cfg.batch_size, replace=False))
        rep = objective(params.reshape(shape), batch)
        _check_finite(rep, step)
        if step % cfg.eval_every == 0:
            full = rep if batch is data else objective(params.reshape(shape), data)
            records.append(evaluate(step, full, params.reshape(shape)))
        params = params - opt.delta(rep.grad, step)
    rep = objective(params.reshape(shape), data)
    _check_finite(rep, cfg.steps)
    records.append(evaluate(cfg.steps, rep, params.reshape(shape)))
    return params.reshape(shape), records


def train(
    inst: Instance,
    data: PreferenceDataset,
    cfg: TrainConfig,
    objective: Objective | None = None,
) -> RunTrace:
    """Train a policy initialized at ``pi_ref`` on ``data`` with ``cfg.method``.

    ``rm_then_rl`` and ``reinforce`` dispatch to their dedicated pipelines; a
    custom ``objective`` overrides the loss implied by the method.
    """
    check_kind(cfg.method, data)
    data.check_against(inst)
    if objective is None:
        if cfg.method == "rm_then_rl":
            return rm_then_rl(inst, data, cfg)
        if cfg.method == "reinforce":
            r_phi = inst.reward_true if cfg.reinforce_reward == "true" else fit_reward_model(inst, data, cfg).values
            return train_reinforce(inst, r_phi, cfg)
        objective = policy_objective(cfg, inst.pi_ref)
    lr = cfg.lr if cfg.lr is not None else auto_lr(cfg.method, data, inst.shape, cfg.beta, cfg.alpha)

    def evaluate(step, rep, theta):
        pi = softmax(theta, axis=1)
        return TraceRecord(
            step, rep.loss, kl_to_ref(pi, inst.pi_ref), expected_reward(pi, inst.reward_true), dict(rep.aux)
        )

    theta, records = _descend(objective, np.log(inst.pi_ref), data, cfg, lr, evaluate)
    return RunTrace(cfg.method, records, policy=ParametricPolicy(theta))


def _fit_reward(inst, data, cfg) -> tuple[np.ndarray, list[TraceRecord]]:
    if data.kind not in ("pairs", "soft"):
        raise WrongKindError(f"reward fitting needs pairs or soft data, got {data.kind!r}")
    data.check_against(inst)
    lr = cfg.lr if cfg.lr is not None else auto_lr("rm", data, inst.shape, cfg.beta)

    def evaluate(step, rep, phi):
        # track the policy the RL stage would return for the current reward
        pi = optimal_policy(phi, inst.pi_ref, cfg.beta)
        return TraceRecord(
            step, rep.loss, kl_to_ref(pi, inst.pi_ref), expected_reward(pi, inst.reward_true), dict(rep.aux)
        )

    phi, records = _descend(lambda p, d: rm_nll(p, d), np.zeros(inst.shape), data, cfg, lr, evaluate)
    return normalize_reward(phi, inst.pi_ref), records


def fit_reward_model(inst: Instance, data: PreferenceDataset, cfg: TrainConfig) -> ParametricReward:
    """Maximum-likelihood Bradley-Terry reward table, normalized to zero mean under ``pi_ref``."""
    phi, _ = _fit_reward(inst, data, cfg)
    return ParametricReward(phi)


def rm_then_rl(inst: Instance, data: PreferenceDataset, cfg: TrainConfig) -> RunTrace:
    """Two-stage RLHF: fit a reward model, then solve the KL-regularized RL
    problem exactly (the completion space is enumerable)."""
    phi, records = _fit_reward(inst, data, cfg)
    pi = optimal_policy(phi, inst.pi_ref, cfg.beta)
    return RunTrace("rm_then_rl", records, policy=ParametricPolicy(np.log(pi)), reward=ParametricReward(phi))


def reinforce_gradient(
    theta, r_phi, pi_ref, beta, n_samples: int, rng, baseline: bool = True, natural: bool = False
) -> np.ndarray:
    """Score-function estimate of the ascent direction of the KL-shaped reward.

    Draws ``n_samples`` completions per prompt. The baseline subtracts
    ``beta * log Z(x)``, the soft value of the reference policy, from the
    reward; it leaves the expectation unchanged. ``natural`` preconditions by
    the inverse softmax Fisher (per-prompt division by ``pi`` and the prompt
    weight), turning the estimate into an importance-weighted advantage.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n_p, m = theta.shape
    logp = log_softmax(theta, axis=1)
    pi = np.exp(logp)
    g = r_phi - beta * (logp - np.log(pi_ref))
    if baseline:
        g = g - beta * log_partitions(r_phi, pi_ref, beta)[:, None]
    cdf = np.cumsum(pi, axis=1)
    u = rng.random((n_p, n_samples))
    ys = np.minimum((cdf[:, None, :] < u[:, :, None] * cdf[:, -1:, None]).sum(axis=2), m - 1)
    counts = np.zeros((n_p, m))
    weighted = np.zeros((n_p, m))
    rows = np.repeat(np.arange(n_p), n_samples)
    gs = g[rows, ys.ravel()]
    np.add.at(counts, (rows, ys.ravel()), 1.0)
    np.add.at(weighted, (rows, ys.ravel()), gs)
    # mean over samples of (e_y - pi) * g_y
    if natural:
        est = weighted / (n_samples * pi) - weighted.sum(axis=1, keepdims=True) / n_samples
        return est.ravel()
    est = (weighted - pi * weighted.sum(axis=1, keepdims=True)) / n_samples
    return (est / n_p).ravel()


def natural_ac_gradient(theta, r_phi, pi_ref, beta) -> np.ndarray:
    """Exact natural-gradient direction: the per-prompt advantage of the shaped reward."""
    logp = log_softmax(np.asarray(theta, dtype=np.float64), axis=1)
    g = r_phi - beta * (logp - np.log(pi_ref))
    return (g - np.sum(np.exp(logp) * g, axis=1, keepdims=True)).ravel()


def train_reinforce(inst: Instance, r_phi, cfg: TrainConfig) -> RunTrace:
    """Policy-gradient ascent on the KL-shaped reward ``r_phi``.

    ``cfg.reinforce_samples == 0`` uses the exact gradient by enumeration;
    otherwise each step draws that many completions per prompt. Vanilla
    softmax policy gradient stalls for long stretches when the reference puts
    little mass on the best completion, so the default step is preconditioned
    by the inverse Fisher information (``cfg.optimizer='natural'``).
    """
    r_phi = check_reward(r_phi, shape=inst.shape)
    beta = cfg.beta
    if cfg.optimizer is None:
        cfg = replace(cfg, optimizer="gd" if cfg.reinforce_samples else "natural")
    natural = cfg.optimizer == "natural"
    lr = cfg.lr if cfg.lr is not None else reinforce_lr(beta, inst.n_prompts, cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg, lr, r_phi.size)
    theta = np.log(inst.pi_ref).ravel().copy()
    records = []

    def evaluate(step, th):
        obj = ac_objective(th.reshape(inst.shape), r_phi, inst.pi_ref, beta)
        if not math.isfinite(obj):
            raise DivergenceError(step, "loss")
        pi = softmax(th.reshape(inst.shape), axis=1)
        return TraceRecord(step, -obj, kl_to_ref(pi, inst.pi_ref), expected_reward(pi, inst.reward_true), {})

    for step in range(cfg.steps):
        th = theta.reshape(inst.shape)
        if step % cfg.eval_every == 0:
            records.append(evaluate(step, theta))
        if cfg.reinforce_samples:
            grad = reinforce_gradient(
                th, r_phi, inst.pi_ref, beta, cfg.reinforce_samples, rng, cfg.reinforce_baseline, natural
            )
        elif natural:
            grad = natural_ac_gradient(th, r_phi, inst.pi_ref, beta)
        else:
            grad = ac_gradient(th, r_phi, inst.pi_ref, beta)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(step, "gradient")
        theta = theta + opt.delta(grad, step)
    records.append(evaluate(cfg.steps, theta))
    return RunTrace("reinforce", records, policy=ParametricPolicy(theta.reshape(inst.shape)), reward=ParametricReward(r_phi))


# -- sampling and evaluation -------------------------------------------------


def tempered(pi_row, temperature: float) -> np.ndarray:
    """Row renormalized as ``softmax(log pi / T)``; ``T = 0`` is one-hot argmax."""
    pi_row = np.asarray(pi_row, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    if temperature == 0:
        out = np.zeros_like(pi_row)
        out[np.argmax(pi_row)] = 1.0
        return out
    with np.errstate(divide="ignore"):
        logits = np.log(pi_row) / temperature
    return softmax(logits)


def sample_completion(pi, x: int, temperature: float, rng) -> int:
    """Draw a completion for prompt ``x``; ties at ``T = 0`` go to the lowest id."""
    row = tempered(np.asarray(pi)[x], temperature)
    if temperature == 0:
        return int(np.argmax(row))
    return int(rng.choice(row.size, p=row))


def best_of_n(pi, r_phi, x: int, N: int, rng) -> int:
    """Draw ``N`` completions from ``pi(.|x)`` and keep the highest ``r_phi``;
    ties go to the lowest id among the draws."""
    if N < 1:
        raise ValueError("N must be >= 1")
    pi = np.asarray(pi)
    r_phi = np.asarray(r_phi)
    draws = rng.choice(pi.shape[1], size=N, p=pi[x])
    scores = r_phi[x, draws]
    return int(draws[scores == scores.max()].min())


def best_of_n_distribution(pi_row, r_row, N: int) -> np.ndarray:
    """Exact law of :func:`best_of_n` on one prompt, by order statistics.

    Completions are ranked by (reward desc, id asc); the selected one is the
    first in that order that appears among the ``N`` draws.
    """
    pi_row = np.asarray(pi_row, dtype=np.float64)
    order = sorted(range(pi_row.size), key=lambda y: (-r_row[y], y))
    out = np.zeros_like(pi_row)
    above = 0.0
    for y in order:
        # P(no draw in `above` set) - P(no draw in above or y)
        out[y] = (1.0 - above) ** N - (1.0 - above - pi_row[y]) ** N
        above += pi_row[y]
    return np.clip(out, 0.0, None)


def win_rate(pi_a, pi_b, inst: Instance, temperature: float, n: int, rng, exact: bool = False) -> float:
    """Fraction of head-to-head trials won by ``pi_a`` under the true reward.

    Each trial draws a uniform prompt and one completion from each policy;
    exact reward ties count half. ``exact=True`` returns the expectation by
    enumeration instead of sampling.
    """
    pi_a = check_policy(pi_a, shape=inst.shape)
    pi_b = check_policy(pi_b, shape=inst.shape)
    r = inst.reward_true
    ta = np.array([tempered(row, temperature) for row in pi_a])
    tb = np.array([tempered(row, temperature) for row in pi_b])
    if exact:
        beats = (r[:, :, None] > r[:, None, :]) + 0.5 * (r[:, :, None] == r[:, None, :])
        per_prompt = np.einsum("xa,xb,xab->x", ta, tb, beats)
        return float(per_prompt.mean())
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.integers(0, inst.n_prompts, size=n)
    ca = np.cumsum(ta, axis=1)[x]
    cb = np.cumsum(tb, axis=1)[x]
    m = inst.completions_per_prompt
    ya = np.minimum((ca < rng.random(n)[:, None] * ca[:, -1:]).sum(axis=1), m - 1)
    yb = np.minimum((cb < rng.random(n)[:, None] * cb[:, -1:]).sum(axis=1), m - 1)
    ra, rb = r[x, ya], r[x, yb]
    return float(np.mean((ra > rb) + 0.5 * (ra == rb)))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
