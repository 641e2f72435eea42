"""Executable property suite over seeded random instances.

Each property takes a :class:`Case` (instance, temperature, private RNG and
the reward-shift function under test) and returns ``True`` when it holds.
``break_mode='shift'`` swaps in a shift that adds completion-dependent noise,
which must make the shift-invariance properties fail.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import exact, objectives, prefmodel, taskgen
from .train import TrainConfig, rm_then_rl, train, train_reinforce

BETAS = (0.05, 0.1, 1.0, 5.0)
TIGHT = 1e-12


@dataclass
class Case:
    seed: int
    inst: taskgen.Instance
    beta: float
    rng: np.random.Generator
    shift: Callable


def _broken_shift(r, f):
    r = np.asarray(r, dtype=np.float64)
    noise = 1e-3 * np.arange(r.shape[1])[None, :]
    return prefmodel.shift_reward(r, f) + noise


def make_case(seed: int, break_mode: str | None = None) -> Case:
    rng = np.random.default_rng([seed, 0xC0FFEE])
    n_p = int(rng.integers(1, 9))
    n_c = int(rng.integers(2, 9))
    inst = taskgen.gen_instance(n_p, n_c, float(rng.uniform(0.5, 3.0)), 1.0, seed)
    beta = float(BETAS[rng.integers(len(BETAS))])
    shift = _broken_shift if break_mode == "shift" else prefmodel.shift_reward
    return Case(seed, inst, beta, rng, shift)


def _random_shift(case: Case) -> np.ndarray:
    return case.rng.normal(scale=5.0, size=case.inst.n_prompts)


def _tv(p, q) -> float:
    return float(0.5 * np.abs(p - q).sum(axis=1).max())


def _rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def finite_difference(f, theta, h=1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        grad[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad


# -- preference models -------------------------------------------------------


def prop_bt_complement(c: Case) -> bool:
    r = c.inst.reward_true
    for x in range(c.inst.n_prompts):
        for y1, y2 in itertools.combinations(range(c.inst.completions_per_prompt), 2):
            if abs(prefmodel.bt_prob(r, x, y1, y2) + prefmodel.bt_prob(r, x, y2, y1) - 1) > 1e-15:
                return False
    return True


def prop_bt_shift_invariance(c: Case) -> bool:
    r = c.inst.reward_true
    rs = c.shift(r, _random_shift(c))
    for x in range(c.inst.n_prompts):
        for y1, y2 in itertools.permutations(range(c.inst.completions_per_prompt), 2):
            if abs(prefmodel.bt_prob(rs, x, y1, y2) - prefmodel.bt_prob(r, x, y1, y2)) > TIGHT:
                return False
    return True


def prop_pl_shift_invariance(c: Case) -> bool:
    r = c.inst.reward_true
    rs = c.shift(r, _random_shift(c))
    m = c.inst.completions_per_prompt
    for x in range(c.inst.n_prompts):
        k = int(c.rng.integers(2, min(m, 4) + 1))
        order = c.rng.permutation(m)[:k]
        if abs(prefmodel.pl_prob(rs, x, order) - prefmodel.pl_prob(r, x, order)) > TIGHT:
            return False
    return True


def prop_pl_sums_to_one(c: Case) -> bool:
    m = c.inst.completions_per_prompt
    k = min(m, 5)
    x = int(c.rng.integers(c.inst.n_prompts))
    subset = c.rng.permutation(m)[:k]
    total = math.fsum(prefmodel.pl_prob(c.inst.reward_true, x, p) for p in itertools.permutations(subset))
    return abs(total - 1.0) <= TIGHT


def prop_normalize_same_class(c: Case) -> bool:
    r = c.inst.reward_true
    out = prefmodel.normalize_reward(r, c.inst.pi_ref)
    diff = out - r
    spread = float(np.max(diff.max(axis=1) - diff.min(axis=1)))
    mean = float(np.max(np.abs(np.sum(c.inst.pi_ref * out, axis=1))))
    return spread <= TIGHT and mean <= TIGHT


# -- exact optimum and equivalence classes -----------------------------------


def prop_optimum_shift_invariance(c: Case) -> bool:
    r, ref = c.inst.reward_true, c.inst.pi_ref
    a = exact.optimal_policy(r, ref, c.beta)
    b = exact.optimal_policy(c.shift(r, _random_shift(c)), ref, c.beta)
    return float(np.max(np.abs(a - b))) <= TIGHT


def prop_projection_reparameterizes(c: Case) -> bool:
    r, ref = c.inst.reward_true, c.inst.pi_ref
    pi_r = exact.optimal_policy(r, ref, c.beta)
    lhs = exact.project_reward(r, ref, c.beta)
    rhs = c.beta * (np.log(pi_r) - np.log(ref))
    return float(np.max(np.abs(lhs - rhs))) <= 1e-12 * max(1.0, float(np.max(np.abs(lhs))))


def prop_projection_partition(c: Case) -> bool:
    ref = c.inst.pi_ref
    proj = exact.project_reward(c.inst.reward_true, ref, c.beta)
    z = np.exp(exact.log_partitions(proj, ref, c.beta))
    return float(np.max(np.abs(z - 1.0))) <= TIGHT


def prop_projection_idempotent(c: Case) -> bool:
    ref = c.inst.pi_ref
    p1 = exact.project_reward(c.inst.reward_true, ref, c.beta)
    p2 = exact.project_reward(p1, ref, c.beta)
    return float(np.max(np.abs(p2 - p1))) <= TIGHT


def prop_projection_collapse(c: Case) -> bool:
    r, ref = c.inst.reward_true, c.inst.pi_ref
    a = exact.project_reward(r, ref, c.beta)
    b = exact.project_reward(c.shift(r, _random_shift(c)), ref, c.beta)
    return float(np.max(np.abs(a - b))) <= 1e-12 * max(1.0, float(np.max(np.abs(a))))


def prop_projection_unique(c: Case) -> bool:
    """Only the zero offset keeps a projected table on the unit-partition set."""
    ref = c.inst.pi_ref
    proj = exact.project_reward(c.inst.reward_true, ref, c.beta)
    g = c.rng.normal(scale=0.5, size=c.inst.n_prompts)
    moved = prefmodel.shift_reward(proj, g)
    z = np.exp(exact.log_partitions(moved, ref, c.beta))
    violates = np.all(np.abs(z - 1.0) > TIGHT)
    same_rep = np.max(np.abs(exact.project_reward(moved, ref, c.beta) - proj)) <= 1e-12 * max(
        1.0, float(np.max(np.abs(proj)))
    )
    return bool(violates and same_rep)


def prop_gibbs_optimality(c: Case, n_perturb: int = 200) -> bool:
    r, ref = c.inst.reward_true, c.inst.pi_ref
    log_star = exact.optimal_log_policy(r, ref, c.beta)
    best = exact.rl_objective(np.exp(log_star), r, ref, c.beta)
    for _ in range(n_perturb):
        noisy = log_star + c.rng.normal(scale=c.rng.uniform(0.01, 2.0), size=log_star.shape)
        pi = np.exp(noisy - np.logaddexp.reduce(noisy, axis=1, keepdims=True))
        if exact.rl_objective(pi, r, ref, c.beta) > best + TIGHT:
            return False
    return True


def prop_objective_at_optimum(c: Case) -> bool:
    r, ref = c.inst.reward_true, c.inst.pi_ref
    val = exact.rl_objective(exact.optimal_policy(r, ref, c.beta), r, ref, c.beta)
    expect = c.beta * float(np.mean(exact.log_partitions(r, ref, c.beta)))
    return abs(val - expect) <= 1e-10 * max(1.0, abs(expect))


def prop_kl_nonnegative(c: Case) -> bool:
    pi = c.rng.dirichlet(np.ones(c.inst.completions_per_prompt), size=c.inst.n_prompts)
    return exact.kl_to_ref(pi, c.inst.pi_ref) >= -TIGHT


# -- losses ------------------------------------------------------------------


def _datasets(c: Case):
    inst = c.inst
    pairs = taskgen.sample_pairs(inst, inst.pi_ref, 40, c.seed)
    soft = taskgen.enumerate_soft_dataset(inst)
    k = min(3, inst.completions_per_prompt)
    ranks = taskgen.sample_rankings(inst, inst.pi_ref, 30, k, c.seed)
    return pairs, soft, ranks


def prop_gradients(c: Case) -> bool:
    inst = c.inst
    shape, ref, beta = inst.shape, inst.pi_ref, c.beta
    theta = np.log(ref) + c.rng.normal(size=shape)
    pairs, soft, ranks = _datasets(c)
    losses = [
        lambda t, d=d: objectives.dpo_loss(t, ref, beta, d) for d in (pairs, soft)
    ] + [
        lambda t: objectives.pl_dpo_loss(t, ref, beta, ranks),
        lambda t: objectives.rm_nll(t, pairs),
        lambda t: objectives.rm_nll(t, soft),
        lambda t: objectives.sft_nll(t, pairs),
        lambda t: objectives.unlikelihood_loss(t, pairs, 0.5),
    ]
    for f in losses:
        fd = finite_difference(lambda v: f(v.reshape(shape)).loss, theta)
        if _rel_err(f(theta).grad, fd) > 1e-6:
            return False
    return True


def prop_dpo_is_rm_nll(c: Case) -> bool:
    ref, beta = c.inst.pi_ref, c.beta
    theta = np.log(ref) + c.rng.normal(size=c.inst.shape)
    for d in _datasets(c)[:2]:
        a = objectives.dpo_loss(theta, ref, beta, d).loss
        b = objectives.rm_nll(objectives.implicit_reward(theta, ref, beta), d).loss
        if abs(a - b) > 1e-14 * max(1.0, abs(a)):
            return False
    return True


def prop_logit_shift_invariance(c: Case) -> bool:
    ref, beta = c.inst.pi_ref, c.beta
    theta = np.log(ref) + c.rng.normal(size=c.inst.shape)
    moved = theta + c.rng.normal(scale=10.0, size=(c.inst.n_prompts, 1))
    pairs, soft, ranks = _datasets(c)
    fns = [
        lambda t: objectives.dpo_loss(t, ref, beta, pairs).loss,
        lambda t: objectives.dpo_loss(t, ref, beta, soft).loss,
        lambda t: objectives.pl_dpo_loss(t, ref, beta, ranks).loss,
        lambda t: objectives.sft_nll(t, pairs).loss,
        lambda t: objectives.unlikelihood_loss(t, pairs, 0.5).loss,
    ]
    return all(abs(f(theta) - f(moved)) <= TIGHT * max(1.0, abs(f(theta))) for f in fns)


def prop_pl_k2_is_dpo(c: Case) -> bool:
    ref, beta = c.inst.pi_ref, c.beta
    theta = np.log(ref) + c.rng.normal(size=c.inst.shape)
    ranks = taskgen.sample_rankings(c.inst, ref, 30, 2, c.seed)
    a = objectives.pl_dpo_loss(theta, ref, beta, ranks).loss
    b = objectives.dpo_loss(theta, ref, beta, taskgen.rankings_to_pairs(ranks)).loss
    return abs(a - b) <= TIGHT


# -- training ----------------------------------------------------------------


def prop_population_dpo(c: Case) -> bool:
    soft = taskgen.enumerate_soft_dataset(c.inst)
    tr = train(c.inst, soft, TrainConfig(method="dpo", beta=c.beta, steps=500, eval_every=500))
    target = exact.optimal_policy(c.inst.reward_true, c.inst.pi_ref, c.beta)
    return tr.records[0].kl <= TIGHT and _tv(tr.probs, target) <= 1e-3


def prop_method_agreement(c: Case) -> bool:
    soft = taskgen.enumerate_soft_dataset(c.inst)
    cfg = TrainConfig(method="dpo", beta=c.beta, steps=500, eval_every=500)
    dpo = train(c.inst, soft, cfg).probs
    rm = rm_then_rl(c.inst, soft, TrainConfig(method="rm_then_rl", beta=c.beta, steps=500, eval_every=500))
    rf = train_reinforce(
        c.inst, rm.reward.values, TrainConfig(method="reinforce", beta=c.beta, steps=400, eval_every=400)
    ).probs
    return max(_tv(dpo, rm.probs), _tv(dpo, rf), _tv(rm.probs, rf)) <= 2e-3


def prop_dataset_determinism(c: Case) -> bool:
    a = taskgen.sample_pairs(c.inst, c.inst.pi_ref, 50, c.seed)
    b = taskgen.sample_pairs(c.inst, c.inst.pi_ref, 50, c.seed)
    again = taskgen.gen_instance(c.inst.n_prompts, c.inst.completions_per_prompt, 1.0, 1.0, c.seed)
    return a == b and a.to_jsonl() == b.to_jsonl() and again.digest == taskgen.gen_instance(
        c.inst.n_prompts, c.inst.completions_per_prompt, 1.0, 1.0, c.seed
    ).digest


PROPERTIES: dict[str, Callable[[Case], bool]] = {
    "bt_complement": prop_bt_complement,
    "bt_shift_invariance": prop_bt_shift_invariance,
    "pl_shift_invariance": prop_pl_shift_invariance,
    "pl_sums_to_one": prop_pl_sums_to_one,
    "normalize_same_class": prop_normalize_same_class,
    "optimal_policy_shift_invariance": prop_optimum_shift_invariance,
    "projection_reparameterization": prop_projection_reparameterizes,
    "projection_unit_partition": prop_projection_partition,
    "projection_idempotent": prop_projection_idempotent,
    "projection_class_collapse": prop_projection_collapse,
    "projection_uniqueness": prop_projection_unique,
    "gibbs_optimality": prop_gibbs_optimality,
    "objective_at_optimum": prop_objective_at_optimum,
    "kl_nonnegative": prop_kl_nonnegative,
    "gradient_fidelity": prop_gradients,
    "dpo_equals_rm_nll": prop_dpo_is_rm_nll,
    "logit_shift_invariance": prop_logit_shift_invariance,
    "pl_k2_equals_dpo": prop_pl_k2_is_dpo,
    "population_dpo_optimum": prop_population_dpo,
    "method_agreement": prop_method_agreement,
    "determinism": prop_dataset_determinism,
}


@dataclass
class VerifyReport:
    n_instances: int
    passes: dict[str, int]
    failures: list[tuple[str, int]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = [f"{name}: {n}/{self.n_instances}" for name, n in self.passes.items()]
        out += [f"FAIL {name} seed={seed}" for name, seed in self.failures]
        out.append("ALL PASS" if self.ok else f"{len(self.failures)} FAILURE(S)")
        return out


def run_suite(n_instances: int = 50, seed: int = 0, break_mode: str | None = None) -> VerifyReport:
    if break_mode not in (None, "shift"):
        raise ValueError(f"unknown break mode {break_mode!r}")
    passes = {name: 0 for name in PROPERTIES}
    failures = []
    for i in range(n_instances):
        case_seed = seed * 1_000_003 + i
        for name, prop in PROPERTIES.items():
            case = make_case(case_seed, break_mode)
            if prop(case):
                passes[name] += 1
            else:
                failures.append((name, case_seed))
    return VerifyReport(n_instances, passes, failures)
