"""Input validation helpers and the package's exception types."""

from __future__ import annotations

import numpy as np

ROW_TOL = 1e-12


class DegenerateSamplerError(ValueError):
    """A sampler row cannot produce distinct completions."""


class WrongKindError(ValueError):
    """A dataset of the wrong kind was passed to a loss or trainer."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class InstanceMismatchError(ValueError):
    """A dataset was loaded against an instance with a different digest."""


def check_positive(value, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value


def check_reward(r, shape=None) -> np.ndarray:
    """Return ``r`` as a finite 2-D float array, optionally of a given shape."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError(f"reward table must be 2-D, got shape {r.shape}")
    if shape is not None and r.shape != tuple(shape):
        raise ValueError(f"reward table shape {r.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(r)):
        raise ValueError("reward table contains non-finite entries")
    return r


def check_policy(pi, shape=None, strictly_positive: bool = False) -> np.ndarray:
    """Return ``pi`` as a row-stochastic 2-D float array."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2:
        raise ValueError(f"policy table must be 2-D, got shape {pi.shape}")
    if shape is not None and pi.shape != tuple(shape):
        raise ValueError(f"policy shape {pi.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(pi)) or np.any(pi < 0):
        raise ValueError("policy entries must be finite and nonnegative")
    if strictly_positive and np.any(pi <= 0):
        raise ValueError("policy must be strictly positive")
    if np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("policy rows must sum to 1")
    return pi


def check_index(i, n: int, name: str) -> int:
    if isinstance(i, (bool, np.bool_)) or int(i) != i or not 0 <= int(i) < n:
        raise ValueError(f"{name}={i!r} out of range [0, {n})")
    return int(i)


def check_prompt_weights(w, n_prompts: int) -> np.ndarray:
    if w is None:
        return np.full(n_prompts, 1.0 / n_prompts)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n_prompts,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("prompt weights must be a probability vector over prompts")
    return w
