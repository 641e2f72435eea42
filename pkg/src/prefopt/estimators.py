"""scikit-learn compatible estimators wrapping the training pipelines.

``fit`` takes a :class:`~prefopt.taskgen.PreferenceDataset` and the
:class:`~prefopt.taskgen.Instance` it was drawn from; hyperparameters live in
``__init__`` so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .objectives import DEFAULT_BETA, dpo_loss, implicit_reward
from .prefmodel import pair_log_likelihood
from .taskgen import Instance, PreferenceDataset
from .train import TrainConfig, fit_reward_model, policy_objective, sample_completion, tempered, train


def _check_fit_args(X, instance):
    if not isinstance(X, PreferenceDataset):
        raise TypeError(f"X must be a PreferenceDataset, got {type(X).__name__}")
    if not isinstance(instance, Instance):
        raise TypeError("fit needs the Instance the dataset was drawn from")
    X.check_against(instance)


def _prompt_ids(prompts, n_prompts) -> np.ndarray:
    prompts = np.atleast_1d(np.asarray(prompts))
    if prompts.dtype.kind not in "iu" or prompts.ndim != 1:
        raise ValueError("prompts must be a 1-D array of prompt ids")
    if np.any((prompts < 0) | (prompts >= n_prompts)):
        raise ValueError(f"prompt ids must lie in [0, {n_prompts})")
    return prompts


class PreferencePolicy(BaseEstimator):
    """Tabular policy trained from preferences with any supported method."""

    def __init__(
        self,
        method="dpo",
        beta=DEFAULT_BETA,
        alpha=1.0,
        lr=None,
        steps=2000,
        warmup_steps=0,
        optimizer=None,
        batch_size=None,
        eval_every=100,
        random_state=0,
    ):
        self.method = method
        self.beta = beta
        self.alpha = alpha
        self.lr = lr
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.random_state = random_state

    def _config(self, kind: str) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            beta=self.beta,
            alpha=self.alpha,
            lr=self.lr,
            steps=self.steps,
            warmup_steps=self.warmup_steps,
            seed=self.random_state,
            mode="soft" if kind == "soft" else "sampled",
            eval_every=self.eval_every,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
        )

    def fit(self, X, instance):
        _check_fit_args(X, instance)
        self.config_ = self._config(X.kind)
        self.trace_ = train(instance, X, self.config_)
        self.pi_ref_ = instance.pi_ref
        self.logits_ = self.trace_.policy.logits
        self.policy_ = self.trace_.probs
        self.n_prompts_, self.n_completions_ = self.policy_.shape
        return self

    def predict_proba(self, prompts, temperature=1.0):
        """Completion distributions for ``prompts``, optionally tempered."""
        check_is_fitted(self, "policy_")
        ids = _prompt_ids(prompts, self.n_prompts_)
        if temperature == 1.0:
            return self.policy_[ids]
        return np.array([tempered(self.policy_[i], temperature) for i in ids])

    def predict(self, prompts):
        """Greedy (temperature 0) completion per prompt; ties to the lowest id."""
        return np.argmax(self.predict_proba(prompts), axis=1)

    def sample(self, prompts, temperature=1.0, random_state=None):
        check_is_fitted(self, "policy_")
        rng = np.random.default_rng(random_state)
        ids = _prompt_ids(prompts, self.n_prompts_)
        return np.array([sample_completion(self.policy_, int(i), temperature, rng) for i in ids])

    def implicit_reward(self):
        """``beta * log(pi / pi_ref)`` of the fitted policy."""
        check_is_fitted(self, "policy_")
        return implicit_reward(self.logits_, self.pi_ref_, self.beta)

    def score(self, X, instance=None):
        """Negative training loss of the fitted policy on ``X``."""
        check_is_fitted(self, "policy_")
        if instance is not None:
            X.check_against(instance)
        if self.method in ("rm_then_rl", "reinforce"):
            return -dpo_loss(self.logits_, self.pi_ref_, self.beta, X).loss
        return -policy_objective(self.config_, self.pi_ref_)(self.logits_, X).loss


class BradleyTerryRewardModel(BaseEstimator):
    """Maximum-likelihood reward table from pairwise preferences.

    The fitted table is centred so that its ``pi_ref``-expectation is zero on
    every prompt; rewards are identified only up to such per-prompt shifts.
    """

    def __init__(self, lr=None, steps=2000, batch_size=None, random_state=0):
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, instance):
        _check_fit_args(X, instance)
        cfg = TrainConfig(
            method="rm_then_rl", lr=self.lr, steps=self.steps,
            batch_size=self.batch_size, seed=self.random_state, eval_every=self.steps,
        )
        self.reward_ = fit_reward_model(instance, X, cfg).values
        self.n_prompts_, self.n_completions_ = self.reward_.shape
        return self

    def predict(self, X):
        """Rewards for an ``(n, 2)`` array of ``(prompt, completion)`` rows."""
        check_is_fitted(self, "reward_")
        X = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        return self.reward_[X[:, 0], X[:, 1]]

    def predict_proba(self, X):
        """``P(y1 beats y2)`` for an ``(n, 3)`` array of ``(prompt, y1, y2)`` rows."""
        check_is_fitted(self, "reward_")
        X = np.asarray(X, dtype=np.int64).reshape(-1, 3)
        return np.exp(pair_log_likelihood(self.reward_, X[:, 0], X[:, 1], X[:, 2]))

    def score(self, X, instance=None):
        """Mean preference log-likelihood of ``X`` under the fitted reward."""
        check_is_fitted(self, "reward_")
        if instance is not None:
            X.check_against(instance)
        if X.kind == "pairs":
            return float(np.mean(pair_log_likelihood(self.reward_, X.x, X.a, X.b)))
        if X.kind == "soft":
            ll = X.p * pair_log_likelihood(self.reward_, X.x, X.a, X.b) + (1 - X.p) * pair_log_likelihood(
                self.reward_, X.x, X.b, X.a
            )
            return float(np.mean(ll))
        raise ValueError("reward models score pairs or soft datasets")
