import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aotmem.task import (SupportTooLarge, TaskDistribution, accuracy, check_assumptions, correct_mask,
                         kl_divergence, make_association_task, make_noisy_lookup_task, make_task, negentropy,
                         ranked_indices, row_negentropies, smooth_task, t_epsilon, task_from_json, task_to_json)


def _prior_task(priors):
    n = len(priors)
    seqs = np.arange(n).reshape(-1, 1)
    return make_task(max(n, 2), 1, seqs, priors, np.eye(max(n, 2))[:n])


def test_association_task_shape():
    t = make_association_task(3, 2, seed=0)
    assert t.T0 == 9
    assert np.allclose(t.prior, 1 / 9)
    assert sorted(map(tuple, t.sequences.tolist())) == list(itertools.product(range(3), repeat=2))
    assert np.array_equal(t.conditionals.argmax(1), t.g)


def test_association_deterministic():
    a, b = make_association_task(4, 2, seed=5), make_association_task(4, 2, seed=5)
    assert task_to_json(a) == task_to_json(b)


def test_association_assumptions():
    r = check_assumptions(make_association_task(4, 2, 0))
    assert (r.assumption1, r.assumption2) == (True, False)


def test_support_cap():
    with pytest.raises(SupportTooLarge):
        make_association_task(10, 6)
    with pytest.raises(ValueError):
        make_association_task(1, 2)


def test_invalid_tasks_rejected():
    seqs = np.array([[0], [1]])
    with pytest.raises(ValueError):
        TaskDistribution(2, 1, seqs, np.array([0.5, 0.6]), np.eye(2))
    with pytest.raises(ValueError):
        TaskDistribution(2, 1, seqs, np.array([0.5, 0.5]), np.array([[0.5, 0.6], [1, 0]]))
    with pytest.raises(ValueError):
        TaskDistribution(2, 1, np.array([[0], [0]]), np.array([0.5, 0.5]), np.eye(2))
    with pytest.raises(ValueError):
        TaskDistribution(2, 1, seqs, np.array([0.5, 0.5]), np.array([[0.9, 0.1], [0.2, 0.8]]), g=np.array([1, 1]))


def test_noisy_lookup_uniform_degenerate():
    t = make_noisy_lookup_task(4, 1, 0.25)
    assert np.allclose(t.conditionals, 0.25)
    assert negentropy(t.conditionals[0]) == pytest.approx(-math.log(4))


def test_noisy_lookup_entropy():
    t = make_noisy_lookup_task(10, 1, 0.95, seed=0)
    ref = 0.95 * math.log(0.95) + 0.05 * math.log(0.05 / 9)
    assert np.allclose(row_negentropies(t), ref, atol=1e-12)
    assert ref == pytest.approx(-0.3084, abs=1e-4)
    r = check_assumptions(t)
    assert (r.assumption1, r.assumption2) == (False, True)


def test_noisy_lookup_off_rows_uniform():
    t = make_noisy_lookup_task(6, 2, 0.7, seed=2)
    off = t.conditionals.copy()
    off[np.arange(t.T0), t.g] = 0
    off /= off.sum(1, keepdims=True)
    expect = np.full_like(off, 1 / 5)
    expect[np.arange(t.T0), t.g] = 0
    assert np.allclose(off, expect)


def test_noisy_lookup_range():
    for p in (0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            make_noisy_lookup_task(4, 1, p)


def test_smooth_one_hot_row():
    t = make_task(4, 1, [[0]], [1.0], [[1.0, 0, 0, 0]])
    s = smooth_task(t, 0.1)
    assert np.allclose(s.conditionals[0], [1.1 / 1.4, 0.1 / 1.4, 0.1 / 1.4, 0.1 / 1.4], atol=1e-12)
    assert np.allclose(s.conditionals[0], [0.7857, 0.0714, 0.0714, 0.0714], atol=1e-4)


def test_smooth_limits_and_fixed_point():
    t = make_association_task(3, 2, 1)
    assert np.allclose(smooth_task(t, 1e-12).conditionals, t.conditionals, atol=1e-11)
    u = make_noisy_lookup_task(3, 1, 1 / 3)
    assert np.allclose(smooth_task(u, 0.3).conditionals, u.conditionals)
    with pytest.raises(ValueError):
        smooth_task(t, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.floats(1e-6, 5.0), st.integers(0, 100))
def test_smooth_preserves_argmax_and_full_support(N, delta, seed):
    t = make_association_task(N, 1, seed)
    s = smooth_task(t, delta)
    assert np.array_equal(s.conditionals.argmax(1), t.conditionals.argmax(1))
    r = check_assumptions(s)
    assert (r.assumption1, r.assumption2) == (False, True)
    assert np.allclose(s.conditionals.sum(1), 1, atol=1e-12)


def test_kl_examples():
    u = make_noisy_lookup_task(3, 1, 1 / 3)
    assert kl_divergence(u, np.full((3, 3), 4.2)) == pytest.approx(0, abs=1e-15)
    t = make_task(3, 1, [[0]], [1.0], [[1.0, 0, 0]])
    assert kl_divergence(t, np.array([[10.0, 0, 0]])) == pytest.approx(math.log(1 + 2 * math.exp(-10)), abs=1e-15)
    assert kl_divergence(t, np.array([[10.0, 0, 0]])) == pytest.approx(9.08e-5, abs=1e-7)
    n = make_noisy_lookup_task(5, 2, 0.6, seed=1)
    assert kl_divergence(n, np.log(n.conditionals)) == pytest.approx(0, abs=1e-12)


def test_kl_callable_and_independent_formula():
    n = smooth_task(make_association_task(3, 2, 2), 0.05)
    logits = np.random.default_rng(0).normal(size=(n.T0, 3))
    ref = 0.0
    for i in range(n.T0):
        q = np.exp(logits[i]) / np.exp(logits[i]).sum()
        ref += n.prior[i] * sum(p * math.log(p / qq) for p, qq in zip(n.conditionals[i], q) if p > 0)
    assert kl_divergence(n, lambda seqs: logits) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-100, 100))
def test_kl_nonneg_and_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    t = make_noisy_lookup_task(4, 2, 0.5, seed=seed)
    logits = rng.normal(scale=3, size=(t.T0, 4))
    kl = kl_divergence(t, logits)
    assert kl >= 0
    assert kl_divergence(t, logits + c) == pytest.approx(kl, abs=1e-9)
    assert accuracy(t, logits + c) == accuracy(t, logits)


def test_accuracy_ties_fail():
    t = make_association_task(3, 2, 0)
    assert accuracy(t, np.zeros((9, 3))) == 0.0
    logits = np.zeros((9, 3))
    logits[np.arange(9), t.g] = 1.0
    assert accuracy(t, logits) == 1.0


def test_accuracy_needs_target():
    t = make_task(3, 1, [[0], [1]], [1, 1], [[0.5, 0.25, 0.25], [0.2, 0.3, 0.5]])
    with pytest.raises(ValueError):
        accuracy(t, np.zeros((2, 3)))


def test_accuracy_random_logits_near_chance():
    # 10k random draws: accuracy is binomial(n, 1/N) / n
    t = make_association_task(10, 4, 0)
    logits = np.random.default_rng(1).normal(size=(t.T0, 10))
    acc = accuracy(t, logits)
    sigma = math.sqrt(0.1 * 0.9 / t.T0)
    assert abs(acc - 0.1) <= 3 * sigma


def test_t_epsilon_examples():
    assert t_epsilon(_prior_task([0.25] * 4), 0) == 4
    assert t_epsilon(_prior_task([0.5, 0.3, 0.15, 0.05]), 0.25) == 2
    assert t_epsilon(_prior_task([0.25] * 4), 0.3) == 3
    with pytest.raises(ValueError):
        t_epsilon(_prior_task([0.25] * 4), 1.0)


def _t_eps_oracle(prior, eps):
    p = sorted(prior, reverse=True)
    from fractions import Fraction
    acc = Fraction(0)
    target = 1 - Fraction(eps)
    for k, x in enumerate(p, 1):
        acc += Fraction(x)
        if acc > target:
            return k
    return len(p)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=12), st.floats(0.0, 0.99))
def test_t_epsilon_matches_exact_oracle(weights, eps):
    # dyadic priors make the float sums exact, so a rational oracle applies
    tot = 2 ** 10
    w = np.array(weights, float)
    w = np.floor(w / w.sum() * tot)
    w[0] += tot - w.sum()
    w = w[w > 0]
    prior = w / tot
    task = _prior_task(list(prior))
    assert t_epsilon(task, eps) == _t_eps_oracle(prior, eps) or eps == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.floats(0, 0.99), st.floats(0, 0.99))
def test_t_epsilon_monotone_and_uniform_cap(N, S, e1, e2):
    t = make_association_task(N, S, 0)
    lo, hi = sorted((e1, e2))
    assert t_epsilon(t, lo) >= t_epsilon(t, hi)
    assert t_epsilon(t, 0) == t.T0
    assert t_epsilon(t, hi) <= math.ceil((1 - hi) * N ** S) + 1


def test_ranked_indices_tie_break():
    t = make_task(3, 2, [[2, 0], [0, 1], [1, 1], [0, 0]], [0.25, 0.25, 0.4, 0.1], np.eye(3)[[0, 1, 2, 0]])
    assert ranked_indices(t).tolist() == [2, 1, 0, 3]


def test_negentropy_examples():
    assert negentropy([0.25] * 4) == pytest.approx(-1.38629, abs=1e-5)
    assert negentropy([0, 1, 0]) == 0.0
    assert negentropy([0.8, 0.1, 0.1]) == pytest.approx(-0.6390, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8).filter(lambda v: sum(v) > 0))
def test_negentropy_range(v):
    p = np.array(v) / sum(v)
    h = negentropy(p)
    assert -math.log(len(p)) - 1e-12 <= h <= 1e-15


def test_correct_mask_strict():
    t = make_association_task(2, 1, 0)
    logits = np.array([[1.0, 1.0], [0.0, 5.0]])
    m = correct_mask(t, logits)
    assert not m[0]


def test_task_json_round_trip():
    t = make_noisy_lookup_task(4, 2, 0.7, seed=3)
    u = task_from_json(task_to_json(t))
    assert np.array_equal(u.sequences, t.sequences)
    assert np.array_equal(u.conditionals, t.conditionals)
    assert np.array_equal(u.prior, t.prior)
    assert np.array_equal(u.g, t.g)
