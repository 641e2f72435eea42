import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prefopt.prefmodel import bt_prob, normalize_reward, pl_prob, shift_reward

finite = st.floats(-20, 20, allow_nan=False)


def tables(max_prompts=4, max_completions=6):
    shapes = st.tuples(st.integers(1, max_prompts), st.integers(2, max_completions))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_bt_equal_and_log3():
    r = np.array([[0.3, 0.3, math.log(3.0) + 0.3]])
    assert bt_prob(r, 0, 0, 1) == 0.5
    assert abs(bt_prob(r, 0, 2, 0) - 0.75) <= 1e-15


@given(tables())
def test_bt_complement(r):
    for y1, y2 in itertools.combinations(range(r.shape[1]), 2):
        p, q = bt_prob(r, 0, y1, y2), bt_prob(r, 0, y2, y1)
        assert abs(p + q - 1.0) <= 1e-15
        assert 0.0 < p < 1.0


def test_bt_rejects_bad_ids():
    r = np.zeros((2, 3))
    with pytest.raises(ValueError):
        bt_prob(r, 2, 0, 1)
    with pytest.raises(ValueError):
        bt_prob(r, 0, 0, 3)


def test_bt_survives_huge_rewards():
    r = np.array([[1000.0, -1000.0]])
    assert bt_prob(r, 0, 0, 1) == 1.0
    assert bt_prob(r, 0, 1, 0) == 0.0 or bt_prob(r, 0, 1, 0) < 1e-300


@given(tables())
def test_pl_k2_is_bt(r):
    assert abs(pl_prob(r, 0, [0, 1]) - bt_prob(r, 0, 0, 1)) <= 1e-15


def test_pl_uniform_over_three():
    r = np.full((1, 3), 2.5)
    for perm in itertools.permutations(range(3)):
        assert abs(pl_prob(r, 0, perm) - 1 / 6) <= 1e-15


@settings(max_examples=30, deadline=None)
@given(tables(max_prompts=1, max_completions=5))
def test_pl_sums_to_one_over_orderings(r):
    total = math.fsum(pl_prob(r, 0, p) for p in itertools.permutations(range(r.shape[1])))
    assert abs(total - 1.0) <= 1e-12


def test_pl_against_direct_product():
    r = np.array([[0.4, -1.2, 2.0, 0.1]])
    order = [2, 0, 3]
    e = np.exp(r[0, order])
    expect = e[0] / e.sum() * e[1] / e[1:].sum() * e[2] / e[2:].sum()
    assert abs(pl_prob(r, 0, order) - expect) <= 1e-15


def test_pl_rejects_duplicates_and_short_rankings():
    r = np.zeros((1, 4))
    with pytest.raises(ValueError):
        pl_prob(r, 0, [1, 1, 2])
    with pytest.raises(ValueError):
        pl_prob(r, 0, [1])


def test_pl_large_rewards_no_overflow():
    r = np.array([[800.0, 790.0, -800.0]])
    p = pl_prob(r, 0, [0, 1, 2])
    assert abs(p - 1.0 / (1.0 + math.exp(-10.0))) <= 1e-12


def test_zero_shift_is_identity():
    r = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(shift_reward(r, np.zeros(3)), r)


@given(tables(), st.data())
def test_bt_shift_invariance(r, data):
    f = data.draw(arrays(np.float64, r.shape[0], elements=finite))
    rs = shift_reward(r, f)
    for x in range(r.shape[0]):
        for y1, y2 in itertools.permutations(range(r.shape[1]), 2):
            assert abs(bt_prob(rs, x, y1, y2) - bt_prob(r, x, y1, y2)) <= 1e-12


@settings(max_examples=50)
@given(tables(max_completions=8), st.data())
def test_pl_shift_invariance(r, data):
    f = data.draw(arrays(np.float64, r.shape[0], elements=finite))
    k = data.draw(st.integers(2, min(4, r.shape[1])))
    order = data.draw(st.permutations(range(r.shape[1])))[:k]
    x = data.draw(st.integers(0, r.shape[0] - 1))
    assert abs(pl_prob(shift_reward(r, f), x, order) - pl_prob(r, x, order)) <= 1e-12


def test_shift_dimension_mismatch():
    with pytest.raises(ValueError):
        shift_reward(np.zeros((2, 3)), np.zeros(3))


def test_normalize_examples():
    w = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
    centred = np.array([[1.0, 1.0, -1.0], [0.0, 1.5, -1.5]])
    assert np.max(np.abs(normalize_reward(centred, w) - centred)) <= 1e-15
    assert np.all(normalize_reward(np.full((2, 3), 4.2), w) == 0.0)


@given(tables(), st.data())
def test_normalize_zero_mean_same_class(r, data):
    raw = data.draw(arrays(np.float64, r.shape, elements=st.floats(0.01, 1.0)))
    w = raw / raw.sum(axis=1, keepdims=True)
    out = normalize_reward(r, w)
    assert np.max(np.abs(np.sum(w * out, axis=1))) <= 1e-12 * max(1.0, np.max(np.abs(r)))
    diff = out - r
    assert np.max(diff.max(axis=1) - diff.min(axis=1)) <= 1e-12 * max(1.0, np.max(np.abs(r)))


def test_normalize_shape_mismatch():
    with pytest.raises(ValueError):
        normalize_reward(np.zeros((2, 3)), np.full((2, 2), 0.5))
