import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aotmem.bounds import circle_encoder, encoder_lower_bound, SequenceEncoder
from aotmem.construct import (ConstructionConfig, assemble_attention_matrix, build_memorizer,
                              embed_sequences, fit_skip_lambda, make_skip_head, rebase_model, sample_embeddings,
                              sample_rank1_head, skip_head_residual, verify_memorizer)
from aotmem.model import AoTParams, ModelConfig, attention_pattern, forward, init_params
from aotmem.numkernel import svd
from aotmem.task import (accuracy, all_sequences, make_association_task, make_task,
                         ranked_indices, smooth_task, t_epsilon)


def _heads_only_params(N, S, d, d_h, H, rng):
    e, pos = sample_embeddings(N, S, d, rng)
    heads = [sample_rank1_head(d, d_h, rng) for _ in range(H)]
    return AoTParams(ModelConfig(N, S, d, d_h, H, qk_mode="rank1"), e, pos, heads, np.zeros((N, d)))


def test_config_validation():
    with pytest.raises(ValueError):
        ConstructionConfig(eps=1.0)
    with pytest.raises(ValueError):
        ConstructionConfig(d=2, d_h=3)
    with pytest.raises(ValueError):
        ConstructionConfig(gamma_target=0)
    with pytest.raises(ValueError):
        ConstructionConfig(skip_mode="other")


def test_sample_embeddings_contract():
    e, pos = sample_embeddings(7, 3, 4, seed=1)
    assert e.shape == (4, 7) and pos.shape == (4, 3)
    assert np.all((e > 0) & (e < 1)) and np.all((pos > 0) & (pos < 1))
    e2, pos2 = sample_embeddings(7, 3, 4, seed=1)
    assert np.array_equal(e, e2) and np.array_equal(pos, pos2)
    assert svd(np.hstack([e, pos])).numeric_rank == 4


def test_skip_head_single_position_exact():
    e, pos = sample_embeddings(4, 1, 3, 0)
    X = embed_sequences(e, pos, all_sequences(4, 1))
    for lam in (0.1, 1.0, 50.0):
        assert skip_head_residual(make_skip_head(3, lam), X) <= 1e-15


def test_skip_head_doubling_reaches_target():
    e, pos = sample_embeddings(4, 3, 3, 2)
    pos = pos.copy()
    pos[:, -1] *= 4.0
    X = embed_sequences(e, pos, all_sequences(4, 3))
    lam, res, hist = fit_skip_lambda(X, 1e-6)
    assert res <= 1e-6
    # once the residual is below 1e-3 it keeps shrinking
    rs = [r for _, r in hist]
    first = next(i for i, r in enumerate(rs) if r <= 1e-3)
    assert all(b <= a for a, b in zip(rs[first:], rs[first + 1:]))
    with pytest.raises(ValueError):
        make_skip_head(3, 0.0)


def test_skip_only_rank():
    rng = np.random.default_rng(0)
    p = _heads_only_params(3, 2, 2, 2, 0, rng)
    seqs = np.array([[0, 0], [1, 0], [2, 0], [0, 1]])
    M = assemble_attention_matrix(p, seqs)
    assert M.rank == min(len(seqs), 2, len(set(seqs[:, -1])))
    seqs = np.array([[0, 0], [1, 0], [2, 0]])
    assert assemble_attention_matrix(p, seqs).rank == 1


def test_assembled_rank_with_skip():
    seqs = all_sequences(3, 2)[:6]
    ranks = []
    for seed in range(5):
        p = _heads_only_params(3, 2, 2, 2, 2, np.random.default_rng(seed))
        ranks.append(assemble_attention_matrix(p, seqs).rank)
    assert 6 in ranks
    assert max(ranks) == 6


def test_assembled_shape_and_duplicates():
    rng = np.random.default_rng(1)
    seqs = all_sequences(4, 2)[:5]
    a = assemble_attention_matrix(_heads_only_params(4, 2, 3, 2, 2, rng), seqs)
    b = assemble_attention_matrix(_heads_only_params(4, 2, 3, 2, 4, rng), seqs)
    assert (a.matrix.shape[0] - 3) * 2 == b.matrix.shape[0] - 3
    with pytest.raises(ValueError):
        assemble_attention_matrix(_heads_only_params(4, 2, 3, 2, 1, rng), np.array([[0, 1], [0, 1]]))


def test_rank_law_many_seeds():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = _heads_only_params(5, 2, 3, 2, 4, rng)
        seqs = all_sequences(5, 2)[rng.choice(25, 8, replace=False)]
        hits += assemble_attention_matrix(p, seqs, include_skip=False).rank == 8
    assert hits >= 95


def test_n5_memorizer():
    task = make_association_task(5, 2, seed=1)
    params, cert = build_memorizer(task, circle_encoder(task, 20.0), ConstructionConfig(seed=7))
    assert cert.T_target == 25 and cert.H_used == 12
    assert cert.achieved_rank == 25
    assert cert.achieved_accuracy == 1.0
    assert cert.solve_residual <= 1e-8
    assert not cert.fallback
    assert accuracy(task, forward(params, task.sequences)) == 1.0
    assert cert.skip_block_rank == 2


@pytest.mark.parametrize("mode", ["literal_lambda", "heads_only"])
def test_other_skip_modes(mode):
    task = make_association_task(5, 2, seed=2)
    params, cert = build_memorizer(task, circle_encoder(task, 20.0), ConstructionConfig(skip_mode=mode, seed=3))
    assert cert.achieved_accuracy == 1.0
    assert cert.skip_mode == mode
    if mode == "heads_only":
        assert cert.H_used == math.ceil(25 / 2)
    else:
        assert cert.lambda_skip is not None and cert.skip_residual <= 1e-6


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 6), st.integers(1, 2), st.integers(2, 4), st.integers(0, 1000))
def test_memorizer_capacity_identity(N, S, d, seed):
    d_h = min(2, d)
    task = make_association_task(N, S, seed=seed)
    params, cert = build_memorizer(task, circle_encoder(task, 30.0, d=d), ConstructionConfig(d=d, d_h=d_h, seed=seed))
    assert cert.achieved_accuracy == 1.0
    assert cert.solve_residual <= 1e-8
    if S > 1:
        assert task.T0 <= cert.H_used * d_h + cert.skip_block_rank


def test_smoothed_task_kl_close_to_target():
    task = smooth_task(make_association_task(4, 2, seed=0), 0.05)
    lb, enc = encoder_lower_bound(task, 2, restarts=3, steps=1000)
    params, cert = build_memorizer(task, enc, ConstructionConfig(seed=1), lower_bound_ref=lb.lower_bound)
    assert cert.solve_residual <= 1e-8
    assert cert.achieved_kl <= cert.lower_bound_ref + 1e-3
    v = verify_memorizer(params, task, lb.lower_bound)
    assert v.floor_ok and v.prop1_gap >= -1e-3


def _prior_task():
    seqs = all_sequences(4, 2)
    prior = np.random.default_rng(3).dirichlet(np.ones(16))
    g = np.random.default_rng(4).integers(0, 4, 16)
    return make_task(4, 2, seqs, prior, np.eye(4)[g], g=g)


def test_single_position_embeds_targets():
    task = make_association_task(6, 1, seed=0)
    enc = circle_encoder(task, 20.0)
    params, cert = build_memorizer(task, enc, ConstructionConfig(seed=0))
    assert cert.H_used == 0 and cert.skip_mode == "single_position"
    assert np.allclose(forward(params, task.sequences), enc.logits(), atol=1e-12)


def test_eps_split_uses_top_sequences():
    seqs = all_sequences(2, 2)
    task = make_task(2, 2, seqs, [0.5, 0.3, 0.15, 0.05], np.eye(2)[[0, 1, 1, 0]], g=[0, 1, 1, 0])
    assert t_epsilon(task, 0.25) == 2
    params, cert = build_memorizer(task, circle_encoder(task, 20.0), ConstructionConfig(eps=0.25, seed=0))
    assert cert.T_target == 2
    logits = forward(params, task.sequences)
    top = ranked_indices(task)[:2]
    assert np.allclose(logits[top], circle_encoder(task, 20.0).logits()[top], atol=1e-8)


@pytest.mark.parametrize("eps", [0.1, 0.25, 0.5])
def test_eps_error_within_bound(eps):
    task = _prior_task()
    target = circle_encoder(task, 10.0)
    params, cert = build_memorizer(task, target, ConstructionConfig(eps=eps, seed=2))
    T = t_epsilon(task, eps)
    S2 = ranked_indices(task)[T:]
    err = np.linalg.norm(forward(params, task.sequences) - target.logits(), axis=1)
    mass = task.prior[S2].sum()
    assert mass < eps
    assert cert.s2_max_logit_error == pytest.approx(err[S2].max())
    assert err[S2].max() <= cert.target_norm * cert.C_eq14 * (1 + 1e-9)
    assert task.prior[S2] @ err[S2] <= eps * cert.target_norm * cert.C_eq14
    assert cert.C_eq14 >= 1


def test_rebase_preserves_scores_and_logits():
    p = init_params(ModelConfig(5, 3, 3, 2, 2), 0, 0.8)
    B = np.random.default_rng(1).normal(size=(3, 3)) + 3 * np.eye(3)
    q = rebase_model(p, B)
    seqs = np.array([[0, 1, 2], [4, 4, 3]])
    for h_old, h_new in zip(p.heads, q.heads):
        for t in seqs:
            Xo = p.e.T[t] + p.pos.T
            Xn = q.e.T[t] + q.pos.T
            assert np.allclose(h_old.scores(Xo[-1], Xo), h_new.scores(Xn[-1], Xn), atol=1e-9)
            assert np.allclose(attention_pattern(h_old, p, t), attention_pattern(h_new, q, t), atol=1e-12)


def test_verify_random_model_near_chance():
    task = make_association_task(10, 3, seed=0)
    p = init_params(ModelConfig(10, 3, 4, 2, 2), 5, 1.0)
    v = verify_memorizer(p, task, 0.0)
    # shared weights correlate predictions across sequences, so the band is wider than binomial noise
    assert abs(v.accuracy - 0.1) <= 0.1
    with pytest.raises(ValueError):
        verify_memorizer(p, make_association_task(10, 2), 0.0)


def test_target_shape_checked():
    task = make_association_task(4, 2)
    with pytest.raises(ValueError):
        build_memorizer(task, SequenceEncoder(np.zeros((4, 3)), np.zeros((16, 3))), ConstructionConfig(d=2))


def test_certificate_serializable():
    import json
    task = make_association_task(4, 2, seed=0)
    _, cert = build_memorizer(task, circle_encoder(task, 20.0), ConstructionConfig(seed=0))
    d = json.loads(json.dumps(cert.to_dict()))
    assert d["achieved_accuracy"] == 1.0 and d["H_used"] == cert.H_used
