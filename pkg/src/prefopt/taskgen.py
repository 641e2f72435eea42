"""Synthetic finite worlds and preference datasets drawn from a known reward.

An :class:`Instance` is a set of prompts, each with the same number of
completions, a strictly positive reference policy and a ground-truth reward
table. Datasets come in three kinds:

* ``pairs``    -- sampled ``(x, y_w, y_l)`` comparisons,
* ``rankings`` -- sampled Plackett-Luce rankings of ``K`` completions,
* ``soft``     -- every unordered pair once, with its exact win probability.

Instance files are a single JSON object; dataset files are JSON Lines with a
header line binding them to their instance by digest.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._validation import (
    DegenerateSamplerError,
    InstanceMismatchError,
    check_policy,
    check_reward,
)

MAX_RETRIES = 1000
DEGENERATE_MASS = 1.0 - 1e-12
KINDS = ("pairs", "rankings", "soft")


@dataclass(frozen=True, eq=False)
class Instance:
    pi_ref: np.ndarray
    reward_true: np.ndarray

    def __post_init__(self):
        pi_ref = check_policy(self.pi_ref, strictly_positive=True)
        reward = check_reward(self.reward_true, shape=pi_ref.shape)
        if pi_ref.shape[1] < 2:
            raise ValueError("an instance needs at least two completions per prompt")
        pi_ref.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "pi_ref", pi_ref)
        object.__setattr__(self, "reward_true", reward)

    @property
    def n_prompts(self) -> int:
        return self.pi_ref.shape[0]

    @property
    def completions_per_prompt(self) -> int:
        return self.pi_ref.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pi_ref.shape

    @cached_property
    def digest(self) -> str:
        return _digest(self._payload())

    def _payload(self) -> dict:
        return {
            "n_prompts": self.n_prompts,
            "completions_per_prompt": self.completions_per_prompt,
            "pi_ref": self.pi_ref.tolist(),
            "reward_true": self.reward_true.tolist(),
        }

    def to_json(self) -> str:
        payload = self._payload()
        payload["digest"] = _digest(payload)
        return json.dumps(payload)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return np.array_equal(self.pi_ref, other.pi_ref) and np.array_equal(
            self.reward_true, other.reward_true
        )

    __hash__ = None


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    winner: int
    loser: int


@dataclass(frozen=True)
class Ranking:
    prompt: int
    order: tuple[int, ...]


@dataclass(frozen=True)
class SoftPairRecord:
    prompt: int
    y1: int
    y2: int
    p_y1_wins: float


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Columnar preference records.

    ``x`` always holds prompt ids. For ``pairs`` the columns ``a``/``b`` are
    winner/loser; for ``soft`` they are ``y1 < y2`` and ``p`` holds
    ``P(y1 wins)``; for ``rankings`` ``order`` is an ``(n, K)`` array, best
    first.
    """

    kind: str
    x: np.ndarray
    instance_digest: str
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    p: np.ndarray | None = None
    order: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        for name in ("x", "a", "b", "p", "order"):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val, dtype=np.float64 if name == "p" else np.int64)
                val.setflags(write=False)
                object.__setattr__(self, name, val)
        n = len(self.x)
        if n == 0:
            raise ValueError("a preference dataset needs at least one record")
        if self.kind == "rankings":
            if self.order is None or self.order.ndim != 2 or len(self.order) != n:
                raise ValueError("rankings need an (n, K) order array")
            if self.order.shape[1] < 2:
                raise ValueError("rankings need K >= 2")
            srt = np.sort(self.order, axis=1)
            if np.any(srt[:, 1:] == srt[:, :-1]):
                raise ValueError("rankings must contain distinct completions")
        else:
            if self.a is None or self.b is None or len(self.a) != n or len(self.b) != n:
                raise ValueError(f"{self.kind} records need two completion columns")
            if np.any(self.a == self.b):
                raise ValueError("pair records must reference two distinct completions")
            if self.kind == "soft":
                if self.p is None or len(self.p) != n:
                    raise ValueError("soft records need a probability column")
                if np.any((self.p < 0) | (self.p > 1)):
                    raise ValueError("soft probabilities must lie in [0, 1]")
                if np.any(self.a >= self.b):
                    raise ValueError("soft records must be stored with y1 < y2")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def K(self) -> int | None:
        return None if self.order is None else self.order.shape[1]

    @property
    def records(self) -> list:
        if self.kind == "pairs":
            return [PreferencePair(int(x), int(w), int(l)) for x, w, l in zip(self.x, self.a, self.b)]
        if self.kind == "soft":
            return [
                SoftPairRecord(int(x), int(u), int(v), float(p))
                for x, u, v, p in zip(self.x, self.a, self.b, self.p)
            ]
        return [Ranking(int(x), tuple(int(y) for y in o)) for x, o in zip(self.x, self.order)]

    def check_against(self, inst: Instance) -> None:
        """Reject the dataset if it does not belong to ``inst``."""
        if self.instance_digest != inst.digest:
            raise InstanceMismatchError(
                f"dataset digest {self.instance_digest[:12]} does not match "
                f"instance {inst.digest[:12]}"
            )
        n_p, n_c = inst.shape
        cols = [self.order] if self.kind == "rankings" else [self.a, self.b]
        if np.any((self.x < 0) | (self.x >= n_p)) or any(
            np.any((c < 0) | (c >= n_c)) for c in cols
        ):
            raise ValueError("dataset references ids outside the instance")
        if self.kind == "rankings" and self.K > n_c:
            raise ValueError("ranking length exceeds the completion count")

    def __eq__(self, other):
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        if self.kind != other.kind or self.instance_digest != other.instance_digest:
            return False
        for name in ("x", "a", "b", "p", "order"):
            u, v = getattr(self, name), getattr(other, name)
            if (u is None) != (v is None) or (u is not None and not np.array_equal(u, v)):
                return False
        return True

    __hash__ = None

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": self.kind, "instance_digest": self.instance_digest})]
        if self.kind == "pairs":
            lines += [
                json.dumps({"x": int(x), "yw": int(w), "yl": int(l)})
                for x, w, l in zip(self.x, self.a, self.b)
            ]
        elif self.kind == "rankings":
            lines += [
                json.dumps({"x": int(x), "order": [int(y) for y in o]})
                for x, o in zip(self.x, self.order)
            ]
        else:
            lines += [
                json.dumps({"x": int(x), "y1": int(u), "y2": int(v), "p1": float(p)})
                for x, u, v, p in zip(self.x, self.a, self.b, self.p)
            ]
        return "\n".join(lines) + "\n"


def gen_instance(
    n_prompts: int,
    n_completions: int,
    reward_scale: float = 1.0,
    ref_concentration: float = 1.0,
    seed: int = 0,
) -> Instance:
    """Draw a reference policy from a symmetric Dirichlet and a uniform reward."""
    if int(n_prompts) != n_prompts or n_prompts < 1:
        raise ValueError(f"n_prompts must be >= 1, got {n_prompts!r}")
    if int(n_completions) != n_completions or n_completions < 2:
        raise ValueError(f"n_completions must be >= 2, got {n_completions!r}")
    if not reward_scale >= 0:
        raise ValueError("reward_scale must be nonnegative")
    if not ref_concentration > 0:
        raise ValueError("ref_concentration must be positive")
    rng = np.random.default_rng(seed)
    shape = (int(n_prompts), int(n_completions))
    pi_ref = rng.dirichlet(np.full(shape[1], float(ref_concentration)), size=shape[0])
    # floor away exact zeros the Dirichlet can underflow to at tiny concentration
    pi_ref = np.maximum(pi_ref, np.finfo(float).tiny)
    pi_ref /= pi_ref.sum(axis=1, keepdims=True)
    reward = rng.uniform(-reward_scale, reward_scale, size=shape) if reward_scale > 0 else np.zeros(shape)
    return Instance(pi_ref=pi_ref, reward_true=reward)


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw: ``cdf`` is (n, m), ``u`` is (n,)."""
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def _check_sampler(inst: Instance, sampler) -> np.ndarray:
    return check_policy(sampler, shape=inst.shape)


def sample_pairs(inst: Instance, sampler, n: int, seed: int = 0) -> PreferenceDataset:
    """Sample ``n`` Bradley-Terry labelled comparisons.

    Prompts are uniform; the two completions are i.i.d. from ``sampler`` with
    equal draws rejected and redrawn.
    """
    sampler = _check_sampler(inst, sampler)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.integers(0, inst.n_prompts, size=n)
    cdf = np.cumsum(sampler, axis=1)[x]
    y1 = _categorical(cdf, rng.random(n))
    y2 = _categorical(cdf, rng.random(n))
    same = np.flatnonzero(y1 == y2)
    retries = 0
    while same.size:
        if retries == MAX_RETRIES:
            rows = sorted(set(x[same].tolist()))
            raise DegenerateSamplerError(
                f"could not draw distinct completions for prompts {rows} "
                f"after {MAX_RETRIES} retries"
            )
        y2[same] = _categorical(cdf[same], rng.random(same.size))
        same = same[y1[same] == y2[same]]
        retries += 1
    p1 = expit(inst.reward_true[x, y1] - inst.reward_true[x, y2])
    first_wins = rng.random(n) < p1
    winner = np.where(first_wins, y1, y2)
    loser = np.where(first_wins, y2, y1)
    return PreferenceDataset("pairs", x, inst.digest, a=winner, b=loser)


def _sample_without_replacement(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sequential proportional draws; ``weights`` (n, m), ``u`` (n, K)."""
    w = weights.copy()
    n, K = u.shape
    out = np.empty((n, K), dtype=np.int64)
    rows = np.arange(n)
    for k in range(K):
        mass = w.sum(axis=1)
        if np.any(mass <= 1e-12 * weights.sum(axis=1)):
            raise DegenerateSamplerError("sampler has too little mass to draw distinct completions")
        pick = _categorical(np.cumsum(w, axis=1), u[:, k])
        out[:, k] = pick
        w[rows, pick] = 0.0
    return out


def _plackett_luce_draw(scores: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sequential Plackett-Luce draw of positions from log-weights ``scores``."""
    logw = scores.astype(np.float64, copy=True)
    n, K = u.shape
    out = np.empty((n, K), dtype=np.int64)
    rows = np.arange(n)
    for k in range(K):
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        pick = _categorical(np.cumsum(w, axis=1), u[:, k])
        out[:, k] = pick
        logw[rows, pick] = -np.inf
    return out


def sample_rankings(inst: Instance, sampler, n: int, K: int, seed: int = 0) -> PreferenceDataset:
    """Sample ``n`` Plackett-Luce rankings of ``K`` distinct completions.

    The candidate set is drawn from ``sampler`` without replacement (the same
    law as rejecting repeated draws); the ranking is then drawn sequentially,
    each position picking among the remaining candidates with probability
    proportional to ``exp(reward)``.
    """
    sampler = _check_sampler(inst, sampler)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= K <= inst.completions_per_prompt:
        raise ValueError(f"K must lie in [2, {inst.completions_per_prompt}], got {K}")
    rng = np.random.default_rng(seed)
    x = rng.integers(0, inst.n_prompts, size=n)
    rows = sampler[x]
    if np.any(rows.max(axis=1) >= DEGENERATE_MASS):
        raise DegenerateSamplerError("sampler row puts all mass on one completion")
    cand = _sample_without_replacement(rows, rng.random((n, K)))
    pos = _plackett_luce_draw(inst.reward_true[x[:, None], cand], rng.random((n, K)))
    order = np.take_along_axis(cand, pos, axis=1)
    return PreferenceDataset("rankings", x, inst.digest, order=order)


def enumerate_soft_dataset(inst: Instance) -> PreferenceDataset:
    """Every unordered completion pair of every prompt with its exact win probability."""
    m = inst.completions_per_prompt
    y1, y2 = np.triu_indices(m, k=1)
    x = np.repeat(np.arange(inst.n_prompts), y1.size)
    y1 = np.tile(y1, inst.n_prompts)
    y2 = np.tile(y2, inst.n_prompts)
    p = expit(inst.reward_true[x, y1] - inst.reward_true[x, y2])
    return PreferenceDataset("soft", x, inst.digest, a=y1, b=y2, p=p)


def rankings_to_pairs(data: PreferenceDataset) -> PreferenceDataset:
    """Convert a ``K = 2`` rankings dataset into the equivalent pairs dataset."""
    if data.kind != "rankings" or data.K != 2:
        raise ValueError("only K=2 rankings convert to pairs")
    return PreferenceDataset("pairs", data.x, data.instance_digest, a=data.order[:, 0], b=data.order[:, 1])


def pairs_to_rankings(data: PreferenceDataset) -> PreferenceDataset:
    if data.kind != "pairs":
        raise ValueError("expected a pairs dataset")
    return PreferenceDataset(
        "rankings", data.x, data.instance_digest, order=np.stack([data.a, data.b], axis=1)
    )


# -- file IO -----------------------------------------------------------------


def save_instance(inst: Instance, path) -> None:
    Path(path).write_text(inst.to_json() + "\n")


def instance_from_json(text: str) -> Instance:
    payload = json.loads(text)
    inst = Instance(
        pi_ref=np.array(payload["pi_ref"], dtype=np.float64),
        reward_true=np.array(payload["reward_true"], dtype=np.float64),
    )
    if inst.shape != (payload["n_prompts"], payload["completions_per_prompt"]):
        raise ValueError("instance header disagrees with its tables")
    if "digest" in payload and payload["digest"] != inst.digest:
        raise ValueError("instance digest does not match its contents")
    return inst


def load_instance(path) -> Instance:
    return instance_from_json(Path(path).read_text())


def save_dataset(data: PreferenceDataset, path) -> None:
    Path(path).write_text(data.to_jsonl())


def dataset_from_jsonl(text: str, inst: Instance | None = None) -> PreferenceDataset:
    """Parse JSON Lines dataset text; if ``inst`` is given, verify the binding."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    header = json.loads(lines[0])
    rows = [json.loads(line) for line in lines[1:]]
    kind, digest = header["kind"], header["instance_digest"]
    x = [row["x"] for row in rows]
    if kind == "pairs":
        data = PreferenceDataset(kind, x, digest, a=[r["yw"] for r in rows], b=[r["yl"] for r in rows])
    elif kind == "rankings":
        data = PreferenceDataset(kind, x, digest, order=[r["order"] for r in rows])
    elif kind == "soft":
        data = PreferenceDataset(
            kind, x, digest,
            a=[r["y1"] for r in rows], b=[r["y2"] for r in rows], p=[r["p1"] for r in rows],
        )
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if inst is not None:
        data.check_against(inst)
    return data


def load_dataset(path, inst: Instance | None = None) -> PreferenceDataset:
    return dataset_from_jsonl(Path(path).read_text(), inst)


def binomial_sigma(p: float, m: int) -> float:
    return math.sqrt(p * (1.0 - p) / m)
