import math

import numpy as np
import pytest

from conftest import three_sigma, tv, two_point_instance
from prefopt._validation import DivergenceError, WrongKindError
from prefopt.exact import kl_to_ref, optimal_policy, project_reward
from prefopt.objectives import ac_gradient
from prefopt.taskgen import (
    Instance,
    enumerate_soft_dataset,
    gen_instance,
    sample_pairs,
    sample_rankings,
)
from prefopt.train import (
    TrainConfig,
    best_of_n,
    best_of_n_distribution,
    fit_reward_model,
    reinforce_gradient,
    rm_then_rl,
    sample_completion,
    train,
    train_reinforce,
    win_rate,
)

BETAS = (0.05, 0.1, 1.0, 5.0)


def test_config_contract():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, warmup_steps=11)
    with pytest.raises(ValueError):
        TrainConfig(method="ppo")
    with pytest.raises(ValueError):
        TrainConfig(method="dpo", optimizer="natural")


def test_single_step_has_initial_and_final_records(inst):
    trace = train(inst, enumerate_soft_dataset(inst), TrainConfig(steps=1))
    assert [r.step for r in trace.records] == [0, 1]
    assert trace.records[0].kl == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("method", ["dpo", "sft", "preferred_ft", "unlikelihood", "rm_then_rl", "reinforce"])
def test_every_method_starts_at_reference(inst, method):
    data = sample_pairs(inst, inst.pi_ref, 200, 0)
    trace = train(inst, data, TrainConfig(method=method, steps=5, eval_every=1, mode="sampled"))
    steps = [r.step for r in trace.records]
    assert steps == sorted(set(steps))
    # for rm_then_rl the step-0 record is pi*(r_phi = 0), which is pi_ref
    assert abs(trace.records[0].kl) <= 1e-12


def test_pl_dpo_trains_on_rankings(inst):
    data = sample_rankings(inst, inst.pi_ref, 300, 3, 0)
    trace = train(inst, data, TrainConfig(method="pl_dpo", steps=50, mode="sampled"))
    assert trace.records[-1].loss < trace.records[0].loss


def test_method_kind_mismatch(inst):
    ranks = sample_rankings(inst, inst.pi_ref, 20, 3, 0)
    for method in ("dpo", "sft", "rm_then_rl", "unlikelihood"):
        with pytest.raises(WrongKindError):
            train(inst, ranks, TrainConfig(method=method, steps=2))
    with pytest.raises(WrongKindError):
        train(inst, sample_pairs(inst, inst.pi_ref, 20, 0), TrainConfig(method="pl_dpo", steps=2))


def test_dpo_soft_recovers_optimum(inst):
    for beta in BETAS:
        trace = train(inst, enumerate_soft_dataset(inst), TrainConfig(beta=beta, steps=2000))
        assert tv(trace.probs, optimal_policy(inst.reward_true, inst.pi_ref, beta)) <= 1e-3


@pytest.mark.xfail(strict=True, reason="a fixed step of 0.5 is far below the curvature-based step; 5000 steps do not reach 1e-3")
def test_dpo_soft_with_fixed_small_step():
    inst = gen_instance(4, 5, 1.0, 1.0, seed=0)
    trace = train(inst, enumerate_soft_dataset(inst), TrainConfig(beta=0.1, lr=0.5, steps=5000, eval_every=5000))
    assert tv(trace.probs, optimal_policy(inst.reward_true, inst.pi_ref, 0.1)) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_loss_nonincreasing_at_small_lr(seed):
    inst = gen_instance(4, 5, 1.0, 1.0, seed)
    for lr in (0.1, 0.01):
        trace = train(inst, enumerate_soft_dataset(inst), TrainConfig(lr=lr, steps=300, eval_every=1, warmup_steps=20))
        after = [r.loss for r in trace.records if r.step >= 20]
        assert all(b <= a + 1e-15 for a, b in zip(after, after[1:]))


def test_warmup_ramps_the_step(inst):
    soft = enumerate_soft_dataset(inst)
    full = train(inst, soft, TrainConfig(lr=1.0, steps=1))
    ramp = train(inst, soft, TrainConfig(lr=1.0, steps=4, warmup_steps=4, eval_every=1))
    # first warmup step uses a quarter of the rate, so it moves less
    assert 0.0 < ramp.records[1].kl < full.final.kl


def test_training_is_deterministic(inst):
    data = sample_pairs(inst, inst.pi_ref, 500, 3)
    cfg = TrainConfig(method="dpo", steps=100, batch_size=64, seed=9, mode="sampled", eval_every=10)
    a, b = train(inst, data, cfg), train(inst, data, cfg)
    assert a.records == b.records
    assert np.array_equal(a.policy.logits, b.policy.logits)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_reports_step(inst):
    data = sample_pairs(inst, inst.pi_ref, 50, 0)
    with pytest.raises(DivergenceError) as err:
        train(inst, data, TrainConfig(method="unlikelihood", alpha=1.0, lr=1e308, steps=50))
    assert err.value.step >= 0


def test_reward_model_soft_recovers_projection(inst):
    phi = fit_reward_model(inst, enumerate_soft_dataset(inst), TrainConfig(method="rm_then_rl", steps=2000)).values
    for beta in (0.1, 1.0):
        gap = project_reward(phi, inst.pi_ref, beta) - project_reward(inst.reward_true, inst.pi_ref, beta)
        assert np.max(np.abs(gap)) <= 1e-3
    assert np.max(np.abs(np.sum(inst.pi_ref * phi, axis=1))) <= 1e-12


def test_reward_model_zero_instance():
    inst = gen_instance(3, 4, 0.0, 1.0, 2)
    phi = fit_reward_model(inst, enumerate_soft_dataset(inst), TrainConfig(method="rm_then_rl", steps=200)).values
    assert np.max(np.abs(project_reward(phi, inst.pi_ref, 0.1))) <= 1e-6
    pi = rm_then_rl(inst, enumerate_soft_dataset(inst), TrainConfig(method="rm_then_rl", steps=200)).probs
    assert tv(pi, inst.pi_ref) <= 1e-12


@pytest.mark.slow
def test_reward_model_sampled_rate():
    inst = gen_instance(3, 4, 1.0, 1.0, 6)
    data = sample_pairs(inst, inst.pi_ref, 100_000, 7)
    phi = fit_reward_model(inst, data, TrainConfig(method="rm_then_rl", steps=3000, mode="sampled")).values
    gap = project_reward(phi, inst.pi_ref, 1.0) - project_reward(inst.reward_true, inst.pi_ref, 1.0)
    assert np.max(np.abs(gap)) <= 0.05


def test_rm_then_rl_matches_dpo_and_sweeps(inst):
    soft = enumerate_soft_dataset(inst)
    kls = []
    for beta in BETAS:
        rl = rm_then_rl(inst, soft, TrainConfig(method="rm_then_rl", beta=beta, steps=2000))
        dpo = train(inst, soft, TrainConfig(beta=beta, steps=2000))
        assert tv(rl.probs, dpo.probs) <= 2e-3
        kls.append(kl_to_ref(rl.probs, inst.pi_ref))
    assert all(a >= b for a, b in zip(kls, kls[1:]))


@pytest.mark.parametrize("beta", BETAS)
def test_exact_reinforce_converges(beta):
    inst = gen_instance(4, 5, 1.0, 1.0, seed=2)
    trace = train_reinforce(inst, inst.reward_true, TrainConfig(method="reinforce", beta=beta, steps=1000))
    assert tv(trace.probs, optimal_policy(inst.reward_true, inst.pi_ref, beta)) <= 1e-3


def test_baseline_does_not_change_fixed_point(inst):
    cfgs = [TrainConfig(method="reinforce", beta=0.5, steps=600, optimizer="gd", reinforce_baseline=b) for b in (True, False)]
    a, b = (train_reinforce(inst, inst.reward_true, c) for c in cfgs)
    assert np.array_equal(np.argmax(a.probs, axis=1), np.argmax(b.probs, axis=1))


def test_sampled_reinforce_gradient_is_unbiased():
    inst = gen_instance(2, 3, 1.0, 1.0, seed=1)
    rng = np.random.default_rng(0)
    theta = np.log(inst.pi_ref) + rng.normal(scale=0.5, size=inst.shape)
    want = ac_gradient(theta, inst.reward_true, inst.pi_ref, 0.3)
    draws = np.array(
        [reinforce_gradient(theta, inst.reward_true, inst.pi_ref, 0.3, 64, rng) for _ in range(10_000)]
    )
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - want) <= 3 * se + 1e-15)


def test_sampled_reinforce_makes_progress(inst):
    cfg = TrainConfig(method="reinforce", beta=1.0, steps=400, reinforce_samples=64, seed=3)
    trace = train_reinforce(inst, inst.reward_true, cfg)
    assert tv(trace.probs, optimal_policy(inst.reward_true, inst.pi_ref, 1.0)) <= 0.05


def test_sample_completion_temperatures():
    rng = np.random.default_rng(1)
    assert all(sample_completion(np.array([[0.2, 0.5, 0.3]]), 0, 0.0, rng) == 1 for _ in range(20))
    assert sample_completion(np.array([[0.4, 0.2, 0.4]]), 0, 0.0, rng) == 0
    n = 100_000
    row = np.array([[0.25, 0.75]])
    hits = sum(sample_completion(row, 0, 0.5, rng) for _ in range(n))
    assert abs(hits / n - 0.9) <= three_sigma(0.9, n)
    pi = np.array([[0.1, 0.6, 0.3]])
    counts = np.bincount([sample_completion(pi, 0, 1.0, rng) for _ in range(n)], minlength=3)
    for y in range(3):
        assert abs(counts[y] / n - pi[0, y]) <= three_sigma(pi[0, y], n)


def test_best_of_n_single_draw_is_the_policy():
    rng = np.random.default_rng(2)
    pi = np.array([[0.5, 0.3, 0.2]])
    r = np.array([[0.0, 1.0, 2.0]])
    n = 50_000
    counts = np.bincount([best_of_n(pi, r, 0, 1, rng) for _ in range(n)], minlength=3)
    for y in range(3):
        assert abs(counts[y] / n - pi[0, y]) <= three_sigma(pi[0, y], n)


def test_best_of_128_finds_the_top_completion():
    rng = np.random.default_rng(3)
    pi = np.array([[0.5, 0.3, 0.2]])
    r = np.array([[0.0, 1.0, 2.0]])
    n = 2000
    hits = sum(best_of_n(pi, r, 0, 128, rng) == 2 for _ in range(n))
    p = 1.0 - 0.8**128
    assert hits / n >= p - three_sigma(min(p, 1 - 1e-12), n)


def test_best_of_n_ties_against_enumeration():
    rng = np.random.default_rng(4)
    pi = np.array([[0.3, 0.5, 0.2]])
    r = np.zeros((1, 3))
    for N in (1, 2, 4):
        want = best_of_n_distribution(pi[0], r[0], N)
        assert abs(want.sum() - 1.0) <= 1e-12
        n = 60_000
        counts = np.bincount([best_of_n(pi, r, 0, N, rng) for _ in range(n)], minlength=3)
        for y in range(3):
            assert abs(counts[y] / n - want[y]) <= three_sigma(max(want[y], 1e-9), n) + 1e-12
    assert np.allclose(best_of_n_distribution(pi[0], r[0], 1), pi[0], atol=1e-15)


def test_win_rate_properties(inst):
    rng = np.random.default_rng(5)
    n = 40_000
    self_rate = win_rate(inst.pi_ref, inst.pi_ref, inst, 1.0, n, rng)
    assert abs(self_rate - 0.5) <= three_sigma(0.5, n)
    star = optimal_policy(inst.reward_true, inst.pi_ref, 0.05)
    sampled = win_rate(star, inst.pi_ref, inst, 1.0, n, rng)
    exact = win_rate(star, inst.pi_ref, inst, 1.0, n, rng, exact=True)
    assert sampled > 0.5 + three_sigma(0.5, n)
    assert abs(sampled - exact) <= three_sigma(exact, n)
    assert win_rate(star, star, inst, 0.0, 1, rng, exact=True) == 0.5


def test_win_rate_counts_ties_half():
    inst = Instance(np.array([[0.5, 0.5]]), np.zeros((1, 2)))
    assert win_rate(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), inst, 1.0, 100, np.random.default_rng()) == 0.5
    gap = two_point_instance(1.0)
    assert win_rate(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), gap, 0.0, 1, None, exact=True) == 1.0
