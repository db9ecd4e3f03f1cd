"""Explicit AoT memorizers built by solving for the output matrices.

Given a target sequence encoder ``f(t) = W E(t)``, the builder picks
embeddings and query-key matrices so that the stacked head outputs
``W_V A(t)`` (plus the skip connection ``x(t, S)``) have full column rank on
the ``T_eps`` most likely sequences, then solves one linear system for the
skip-basis ``B`` and all ``W_O^h`` jointly::

    B x(t, S) + sum_h W_O^h W_V^h A^h(t) = E(t)     for t in S1

``B`` is folded back into the literal model by re-basing the embeddings
(``e <- B e``, ``pos <- B pos``) and conjugating each head, which leaves
every attention pattern unchanged. The unembedding is the target's ``W``.
"""
from dataclasses import dataclass, asdict, replace
import math

import numpy as np

from .model import AoTParams, HeadParams, ModelConfig, forward
from .numkernel import DEFAULT_RANK_TOL, lstsq_min_norm, make_rng, numeric_rank, pinv, softmax, spawn, svd
from .task import accuracy, kl_divergence, ranked_indices, t_epsilon

SKIP_MODES = ("exact_basis", "literal_lambda", "heads_only")


class ConstructionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstructionConfig:
    eps: float = 0.0
    d: int = 2
    d_h: int = 2
    skip_mode: str = "exact_basis"
    lambda_skip: float = 1.0       # first value of the doubling search (literal_lambda)
    rho_last: float = 4.0          # multiplier on pos_S (literal_lambda)
    gamma_target: float = 1e-6     # skip-head residual to reach (literal_lambda)
    rank_tol: float = DEFAULT_RANK_TOL
    max_resample: int = 10
    seed: int = 0
    head_candidates: int = 16
    qk_scale: tuple = (3.0, 300.0)
    cond_limit: float = 1e10

    def __post_init__(self):
        if not (0.0 <= self.eps < 1.0):
            raise ValueError("eps must lie in [0, 1)")
        if self.gamma_target <= 0:
            raise ValueError("gamma_target must be positive")
        if self.d_h > self.d:
            raise ValueError("d_h must not exceed d")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")


@dataclass
class ConstructionCertificate:
    H_used: int
    T_target: int
    achieved_rank: int
    skip_residual: float
    solve_residual: float
    C_eq14: float
    achieved_accuracy: float
    achieved_kl: float
    lower_bound_ref: float
    resamples: int
    skip_mode: str = "exact_basis"
    fallback: bool = False
    skip_block_rank: int = 0
    C_remark: float = None
    lambda_skip: float = None
    target_norm: float = 0.0
    s2_max_logit_error: float = 0.0
    s2_weighted_logit_error: float = 0.0
    basis_condition: float = None
    eps: float = 0.0

    def to_dict(self):
        return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in asdict(self).items()}


@dataclass
class AssembledMatrix:
    matrix: np.ndarray
    rank: int
    skip_rows: int


# -- building blocks -----------------------------------------------------------

def sample_embeddings(N, S, d, seed=0):
    """Token and positional embeddings with i.i.d. entries in the open interval (0, 1)."""
    rng = make_rng(seed)
    tiny = np.finfo(float).tiny
    return rng.uniform(tiny, 1.0, size=(d, N)), rng.uniform(tiny, 1.0, size=(d, S))


def embed_sequences(e, pos, sequences):
    return e.T[np.asarray(sequences)] + pos.T


def make_skip_head(d, lambda_skip):
    """Head ``W_QK = lambda I``, ``W_V = W_O = I``; with a dominant ``pos_S`` it tends to ``x(t, S)``."""
    if lambda_skip <= 0:
        raise ValueError("lambda_skip must be positive")
    eye = np.eye(d)
    return HeadParams(W_V=eye.copy(), W_O=eye.copy(), W_QK=lambda_skip * eye)


def head_values(head, X):
    """``W_V A(t)`` for each embedded sequence in ``X`` (T, S, d); shape (T, d_h)."""
    a = softmax(head.scores(X[:, -1, :], X), axis=-1)
    return np.einsum("ts,tsd->td", a, X) @ head.W_V.T


def skip_head_residual(head, X):
    """Largest ``||head(t) - x(t, S)||`` over the sequences in ``X``."""
    out = head_values(head, X) @ head.W_O.T
    return float(np.max(np.linalg.norm(out - X[:, -1, :], axis=1)))


def fit_skip_lambda(X, gamma_target, lambda0=1.0, max_doublings=80):
    """Double ``lambda`` until the skip head is within ``gamma_target`` of ``x(t, S)``.

    Returns ``(lambda, residual, history)``; the residual may miss the target
    when the last position does not dominate every query-key score.
    """
    d = X.shape[-1]
    lam, history = lambda0, []
    for _ in range(max_doublings):
        r = skip_head_residual(make_skip_head(d, lam), X)
        history.append((lam, r))
        if r <= gamma_target:
            break
        lam *= 2.0
    return history[-1][0], history[-1][1], history


def sample_rank1_head(d, d_h, rng, form="e1", scale=(0.5, 20.0)):
    """Random head with a rank-1 query-key matrix and a Gaussian value matrix.

    ``form="e1"`` puts all query-key weight on the first coordinate
    (``W_QK = w e1 e1^T``); ``form="random"`` uses random unit directions.
    The scale ``w`` is log-uniform on ``scale``.
    """
    w = math.exp(rng.uniform(math.log(scale[0]), math.log(scale[1])))
    if form == "e1":
        q = np.zeros(d)
        q[0] = w
        k = np.zeros(d)
        k[0] = 1.0
    elif form == "random":
        q = rng.standard_normal(d)
        k = rng.standard_normal(d)
        q *= w / np.linalg.norm(q)
        k /= np.linalg.norm(k)
    else:
        raise ValueError(f"unknown head form {form!r}")
    W_V = rng.standard_normal((d_h, d)) / math.sqrt(d)
    return HeadParams(W_V=W_V, W_O=np.zeros((d, d_h)), q=q, k=k)


def assemble_attention_matrix(params, sequences, include_skip=True, skip_head=None,
                              rank_tol=DEFAULT_RANK_TOL):
    """Stack ``W_V^h A^h(t)`` over heads (and the skip block) with one column per sequence.

    The skip block is ``x(t, S)`` itself, or the output of ``skip_head`` when
    one is given.
    """
    seqs = np.asarray(sequences)
    if len({tuple(s) for s in seqs.tolist()}) != len(seqs):
        raise ValueError("duplicate sequences")
    X = embed_sequences(params.e, params.pos, seqs)
    blocks = []
    if include_skip:
        blocks.append((X[:, -1, :] if skip_head is None else head_values(skip_head, X) @ skip_head.W_O.T).T)
    for head in params.heads:
        blocks.append(head_values(head, X).T)
    M = np.vstack(blocks) if blocks else np.zeros((0, len(seqs)))
    rank = svd(M, rank_tol).numeric_rank if M.size else 0
    return AssembledMatrix(M, rank, params.config.d if include_skip else 0)


def _row_basis(rows, tol):
    if rows.shape[0] == 0:
        return rows
    res = svd(rows, tol)
    return res.Vt[: res.numeric_rank]


def _greedy_heads(X1, base_rows, H, d_h, rng, candidates, scale, tol):
    """Pick heads one at a time, keeping the candidate that adds the most new row space on S1.

    Each head's ``W_V`` spans the top ``d_h`` new directions of its attention
    output, so its rows are as independent from the rows chosen so far as the
    candidate allows.
    """
    T, _, d = X1.shape
    rows = base_rows
    Q = _row_basis(rows, tol)
    heads = []
    for _ in range(H):
        best = None
        need = max(1, min(d_h, T - Q.shape[0]))
        for _ in range(candidates):
            head = sample_rank1_head(d, d_h, rng, form="random", scale=scale)
            a = softmax(head.scores(X1[:, -1, :], X1), axis=-1)
            A = np.einsum("ts,tsd->td", a, X1).T  # d x T
            R = A - (A @ Q.T) @ Q if Q.shape[0] else A
            U, s, _ = np.linalg.svd(R, full_matrices=False)
            score = s[min(need, len(s)) - 1] / max(np.linalg.norm(A), 1e-300)
            if best is None or score > best[0]:
                best = (score, head, U[:, :d_h].T)
        _, head, W_V = best
        head = HeadParams(W_V=W_V, W_O=np.zeros((d, d_h)), q=head.q, k=head.k)
        heads.append(head)
        rows = np.vstack([rows, head_values(head, X1).T])
        Q = _row_basis(rows, tol)
    return heads


# -- the builder -----------------------------------------------------------------

def _attempt(task, target, cfg, mode, S1, S2, rng):
    N, S, d, d_h = task.N, task.S, cfg.d, cfg.d_h
    T = len(S1)
    e, pos = sample_embeddings(N, S, d, rng)
    if mode == "literal_lambda":
        pos = pos.copy()
        pos[:, -1] *= cfg.rho_last
    X = embed_sequences(e, pos, task.sequences)
    xS = X[:, -1, :]
    Y = target.E.T.copy()  # d x T0
    lam, skip_res = None, 0.0

    if mode == "heads_only":
        skip_rows, skip_rank = np.zeros((0, task.T0)), 0
        H = math.ceil(T / d_h)
        Y -= xS.T
    else:
        skip_rank = numeric_rank(np.linalg.svd(xS[S1], compute_uv=False), cfg.rank_tol)
        H = max(0, math.ceil((T - skip_rank) / d_h))
        if mode == "literal_lambda":
            lam, skip_res, _ = fit_skip_lambda(X, cfg.gamma_target, cfg.lambda_skip)
            if skip_res > cfg.gamma_target:
                return None, f"skip head residual {skip_res:.3g} above target"
            skip_rows = (head_values(make_skip_head(d, lam), X)).T
        else:
            skip_rows = xS.T

    heads = _greedy_heads(X[S1], skip_rows[:, S1], H, d_h, rng, cfg.head_candidates, cfg.qk_scale, cfg.rank_tol)
    M = np.vstack([skip_rows] + [head_values(h, X).T for h in heads])
    rank = numeric_rank(np.linalg.svd(M[:, S1], compute_uv=False), cfg.rank_tol)
    if rank < min(T, M.shape[0]):
        return None, f"rank {rank} < {min(T, M.shape[0])}"

    sol = lstsq_min_norm(M[:, S1].T, Y[:, S1].T, cfg.rank_tol).T  # d x rows
    solve_residual = float(np.max(np.abs(sol @ M[:, S1] - Y[:, S1]))) if T else 0.0

    n_skip = skip_rows.shape[0]
    cond_B = None
    if mode == "heads_only":
        Binv = np.eye(d)
        e2, pos2 = e, pos
    else:
        B = sol[:, :n_skip]
        cond_B = float(np.linalg.cond(B))
        if not np.isfinite(cond_B) or cond_B > cfg.cond_limit:
            return None, f"skip basis condition number {cond_B:.3g}"
        Binv = np.linalg.inv(B)
        e2, pos2 = B @ e, B @ pos
    out_heads = []
    for i, h in enumerate(heads):
        W_O = sol[:, n_skip + i * d_h: n_skip + (i + 1) * d_h]
        out_heads.append(HeadParams(W_V=h.W_V @ Binv, W_O=W_O, q=Binv.T @ h.q, k=Binv.T @ h.k))
    config = ModelConfig(N, S, d, d_h, H, qk_mode="rank1")
    params = AoTParams(config, e2, pos2, out_heads, target.W.copy())

    # constant controlling the error on the sequences left out of the solve
    if len(S2):
        K = pinv(M[:, S1], cfg.rank_tol) @ M[:, S2]
        C_eq14 = math.sqrt(1.0 + svd(K).sigma_max ** 2)
    else:
        C_eq14 = 1.0
    C_remark = None
    full = svd(M, cfg.rank_tol)
    if full.numeric_rank == T and T:
        core = full.Vt[:T][:, S1]
        C_remark = math.sqrt(1.0 + (1.0 / svd(core).singular_values[-1]) ** 2)

    info = dict(H=H, rank=rank, skip_rank=skip_rank, solve_residual=solve_residual, C_eq14=C_eq14,
                C_remark=C_remark, lam=lam, skip_res=skip_res, cond_B=cond_B,
                target_norm=float(np.linalg.norm(target.W @ target.E.T, 2)))
    return params, info


def build_memorizer(task, target, cfg, lower_bound_ref=None):
    """Build an AoT reproducing ``target`` exactly on the ``T_eps`` most likely sequences.

    ``target`` is a ``SequenceEncoder`` whose table rows follow
    ``task.sequences``. Returns ``(AoTParams, ConstructionCertificate)``.
    Rank failures and ill-conditioned skip bases trigger a resample; after
    ``max_resample`` failures the skip connection is left as-is and only the
    heads are solved (``heads_only``), which the certificate flags.
    """
    if target.W.shape != (task.N, cfg.d) or target.E.shape != (task.T0, cfg.d):
        raise ValueError("target encoder does not match the task and embedding dimension")
    T = t_epsilon(task, cfg.eps)
    order = ranked_indices(task)
    S1, S2 = np.sort(order[:T]), np.sort(order[T:])

    if task.S == 1:
        return _single_position(task, target, cfg, T, S2, lower_bound_ref)

    modes = [cfg.skip_mode] if cfg.skip_mode == "heads_only" else [cfg.skip_mode, "heads_only"]
    streams = spawn(cfg.seed, cfg.max_resample * len(modes))
    failures = []
    params = info = None
    for m_i, mode in enumerate(modes):
        for a in range(cfg.max_resample):
            params, info = _attempt(task, target, cfg, mode, S1, S2, streams[m_i * cfg.max_resample + a])
            if params is not None:
                break
            failures.append(info)
        if params is not None:
            break
    if params is None:
        raise ConstructionError(f"construction failed after {len(failures)} attempts: {failures[-1]}")

    logits = forward(params, task.sequences)
    target_logits = target.logits()
    err = np.linalg.norm(logits - target_logits, axis=1)
    if lower_bound_ref is None:
        lower_bound_ref = kl_divergence(task, target_logits)
    try:
        acc = accuracy(task, logits)
    except ValueError:
        acc = None
    cert = ConstructionCertificate(
        H_used=info["H"], T_target=T, achieved_rank=info["rank"], skip_residual=info["skip_res"],
        solve_residual=info["solve_residual"], C_eq14=info["C_eq14"], achieved_accuracy=acc,
        achieved_kl=kl_divergence(task, logits), lower_bound_ref=float(lower_bound_ref),
        resamples=len(failures), skip_mode=mode, fallback=mode != cfg.skip_mode,
        skip_block_rank=info["skip_rank"], C_remark=info["C_remark"], lambda_skip=info["lam"],
        target_norm=info["target_norm"],
        s2_max_logit_error=float(err[S2].max()) if len(S2) else 0.0,
        s2_weighted_logit_error=float(task.prior[S2] @ err[S2]) if len(S2) else 0.0,
        basis_condition=info["cond_B"], eps=cfg.eps,
    )
    return params, cert


def _single_position(task, target, cfg, T, S2, lower_bound_ref):
    """With one position heads are linear in ``x``; embedding each token at its target is exact."""
    e, pos = sample_embeddings(task.N, 1, cfg.d, cfg.seed)
    e[:, task.sequences[:, 0]] = target.E.T
    pos = np.zeros_like(pos)
    params = AoTParams(ModelConfig(task.N, 1, cfg.d, cfg.d_h, 0, qk_mode="rank1"), e, pos, [], target.W.copy())
    logits = forward(params, task.sequences)
    err = np.linalg.norm(logits - target.logits(), axis=1)
    if lower_bound_ref is None:
        lower_bound_ref = kl_divergence(task, target.logits())
    try:
        acc = accuracy(task, logits)
    except ValueError:
        acc = None
    cert = ConstructionCertificate(
        H_used=0, T_target=T, achieved_rank=int(svd(target.E.T).numeric_rank), skip_residual=0.0,
        solve_residual=float(err.max()), C_eq14=1.0, achieved_accuracy=acc,
        achieved_kl=kl_divergence(task, logits), lower_bound_ref=float(lower_bound_ref), resamples=0,
        skip_mode="single_position", skip_block_rank=int(svd(target.E.T).numeric_rank),
        target_norm=float(np.linalg.norm(target.W @ target.E.T, 2)),
        s2_max_logit_error=float(err[S2].max()) if len(S2) else 0.0,
        s2_weighted_logit_error=float(task.prior[S2] @ err[S2]) if len(S2) else 0.0, eps=cfg.eps)
    return params, cert


@dataclass
class Verification:
    accuracy: float
    kl: float
    lower_bound_ref: float
    prop1_gap: float
    floor_ok: bool


def verify_memorizer(params, task, lower_bound_ref, slack=1e-3):
    """Re-measure a model on a task: accuracy, KL and its gap above the encoder floor."""
    if params.config.N != task.N or params.config.S != task.S:
        raise ValueError("model and task disagree on N or S")
    logits = forward(params, task.sequences)
    try:
        acc = accuracy(task, logits)
    except ValueError:
        acc = None
    kl = kl_divergence(task, logits)
    gap = kl - lower_bound_ref
    return Verification(acc, kl, float(lower_bound_ref), gap, gap >= -slack)


def rebase_model(params, B):
    """Change of basis ``x -> B x`` that keeps attention patterns and head values fixed."""
    Binv = np.linalg.inv(B)
    heads = []
    for h in params.heads:
        if h.rank1:
            heads.append(HeadParams(W_V=h.W_V @ Binv, W_O=h.W_O, q=Binv.T @ h.q, k=Binv.T @ h.k))
        else:
            heads.append(HeadParams(W_V=h.W_V @ Binv, W_O=h.W_O, W_QK=Binv.T @ h.W_QK @ Binv))
    return replace(params, e=B @ params.e, pos=B @ params.pos, heads=heads)
