"""Bounds on how well rank-``d`` sequence encoders (and hence AoTs) can fit a task.

A sequence encoder maps each supported sequence to logits ``W E(t)`` with a
shared unembedding ``W`` (``N x d``) and a free per-sequence embedding table
``E`` (``T0 x d``). Any transformer with embedding dimension ``d`` is one, so
the best encoder KL is a floor for every such model.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.optimize import minimize

from .numkernel import NumericalError, make_rng, softmax, spawn
from .task import check_assumptions, kl_divergence, row_negentropies


@dataclass
class SequenceEncoder:
    W: np.ndarray  # (N, d) unembedding, row j is token j
    E: np.ndarray  # (T0, d) embedding of each supported sequence

    @property
    def d(self):
        return self.W.shape[1]

    def logits(self):
        return self.E @ self.W.T

    def __call__(self, tokens=None):
        return self.logits()


@dataclass
class BoundReport:
    lower_bound: float = None
    theorem2_full: float = None
    theorem2_simplified: float = None
    C_jl: float = None
    C_target: float = None
    lambda_table: np.ndarray = None
    optimizer_meta: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                v = [float(x) for x in v]
            out[k] = v
        return out


@dataclass(frozen=True)
class CapacityReport:
    ours: int
    previous: int
    kim_params: float
    huben_params: float
    phi_bound: float


# -- lower bound by optimization --------------------------------------------

def _kl_and_grad(task, W, E):
    f = E @ W.T
    kl = kl_divergence(task, f)
    G = task.prior[:, None] * (softmax(f, axis=1) - task.conditionals)
    return kl, G.T @ E, G @ W


def _full_rank_encoder(task, d):
    """Exact encoder when ``d >= N - 1`` and every conditional has full support."""
    N = task.N
    logp = np.log(task.conditionals)
    centered = logp - logp.mean(axis=1, keepdims=True)
    # orthonormal basis of the sum-zero subspace of R^N
    Q, _ = np.linalg.qr(np.eye(N) - 1.0 / N)
    basis = Q[:, : N - 1]
    W = np.zeros((N, d))
    W[:, : N - 1] = basis
    E = np.zeros((task.T0, d))
    E[:, : N - 1] = centered @ basis
    return SequenceEncoder(W, E)


def encoder_lower_bound(task, d, restarts=5, steps=2000, lr=0.05, seed=0, polish_iters=5000,
                        logit_cap=30.0):
    """Estimate ``inf_f KL(pi, f)`` over rank-``d`` sequence encoders.

    Each restart runs ``steps`` Adam iterations on the exact gradient, then an
    L-BFGS polish. The best restart wins; the value is an upper estimate of the
    infimum. Without full support the parameters are boxed to
    ``[-logit_cap, logit_cap]`` so the optimizer cannot run off to infinity.

    Returns ``(BoundReport, SequenceEncoder)``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    full_support = check_assumptions(task).assumption2
    if d >= task.N - 1 and full_support:
        enc = _full_rank_encoder(task, d)
        kl = kl_divergence(task, enc.logits())
        return BoundReport(lower_bound=kl, optimizer_meta={"method": "closed_form"}), enc

    N, T0 = task.N, task.T0
    nW = N * d

    def unpack(x):
        return x[:nW].reshape(N, d), x[nW:].reshape(T0, d)

    def objective(x):
        W, E = unpack(x)
        kl, gW, gE = _kl_and_grad(task, W, E)
        return kl, np.concatenate([gW.ravel(), gE.ravel()])

    bounds = None if full_support else [(-logit_cap, logit_cap)] * (nW + T0 * d)
    best, best_x, runs = None, None, []
    for i, rng in enumerate(spawn(seed, restarts)):
        x = 0.5 * rng.standard_normal(nW + T0 * d)
        m, v = np.zeros_like(x), np.zeros_like(x)
        ok = True
        for step in range(1, steps + 1):
            val, g = objective(x)
            if not np.isfinite(val):
                ok = False
                break
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - lr * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
            if bounds is not None:
                np.clip(x, -logit_cap, logit_cap, out=x)
        if not ok:
            runs.append({"restart": i, "status": "non-finite"})
            continue
        res = minimize(objective, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": polish_iters, "ftol": 1e-16, "gtol": 1e-12})
        val, g = objective(res.x)
        if not np.isfinite(val):
            runs.append({"restart": i, "status": "non-finite"})
            continue
        runs.append({"restart": i, "status": "ok", "value": float(val), "iterations": steps + int(res.nit),
                     "grad_norm": float(np.linalg.norm(g))})
        if best is None or val < best:
            best, best_x = val, res.x
    if best is None:
        raise NumericalError("every restart of the encoder optimization diverged")
    W, E = unpack(best_x)
    meta = {"method": "adam+lbfgs", "restarts": restarts, "steps": steps, "lr": lr, "runs": runs,
            "final_grad_norm": min(r["grad_norm"] for r in runs if r["status"] == "ok")}
    return BoundReport(lower_bound=float(best), optimizer_meta=meta), SequenceEncoder(W, E)


# -- circle encoder (association tasks, d = 2) ---------------------------------

def circle_unembedding(N, d=2):
    ang = 2 * np.pi * np.arange(N) / N
    W = np.zeros((N, d))
    W[:, 0], W[:, 1] = np.cos(ang), np.sin(ang)
    return W


def circle_encoder(task, lam, d=2):
    """Tokens on the unit circle, ``E(t) = lam * W[g(t)]``.

    With ``d > 2`` the circle sits in the first two coordinates.
    """
    if d < 2:
        raise ValueError("the circle encoder needs d >= 2")
    if task.g is None:
        raise ValueError("circle_encoder needs a lookup table g")
    W = circle_unembedding(task.N, d)
    return SequenceEncoder(W, lam * W[task.g])


def circle_kl_closed_form(task, lam):
    """Prior average of ``log(1 + sum_{j != g} exp(-lam (1 - cos(2 pi (j - g) / N))))``."""
    j = np.arange(task.N)
    diff = j[None, :] - task.g[:, None]
    terms = np.exp(-lam * (1 - np.cos(2 * np.pi * diff / task.N)))
    terms[np.arange(task.T0), task.g] = 0.0
    return float(task.prior @ np.log1p(terms.sum(axis=1)))


# -- Johnson-Lindenstrauss unembedding ------------------------------------------

def jl_constant(N, d):
    return math.sqrt(32 * math.log(N + 1) / d)


def gram_deviation(W):
    """``max |W W^T - I|`` entrywise, with W holding one token vector per row."""
    G = W @ W.T
    return float(np.max(np.abs(G - np.eye(len(G)))))


def jl_unembedding(N, d, seed=0, max_tries=100, shortcut=True):
    """Nearly orthonormal token vectors: rows of ``+-1/sqrt(d)`` signs.

    Resamples until the Gram deviation meets ``sqrt(32 log(N+1) / d)``.
    With ``shortcut`` and ``N <= d`` distinct basis vectors are returned
    instead (``C = 0``). Returns ``(W, C_achieved)`` with ``W`` of shape ``(N, d)``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if N <= d and shortcut:
        return np.eye(d)[:N].copy(), 0.0
    target = jl_constant(N, d)
    rng = make_rng(seed)
    best = math.inf
    for _ in range(max_tries):
        W = rng.choice([-1.0, 1.0], size=(N, d)) / math.sqrt(d)
        c = gram_deviation(W)
        best = min(best, c)
        if c <= target:
            return W, c
    raise NumericalError(f"no sign matrix met C <= {target:.4g} in {max_tries} tries (best {best:.4g})")


# -- lambda equation ---------------------------------------------------------------

def lambda_rhs(lam, W, g):
    """``log sum_j exp(lam (W_j - W_g) . W_g)``."""
    c = (W - W[g]) @ W[g]
    z = lam * c
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()))


def lambda_cap(entropy, N, C):
    """``log((N - 1) / (e^entropy - 1)) / (1 - 2C)``, the closed-form ceiling on lambda."""
    if C >= 0.5:
        return math.inf
    return math.log((N - 1) / math.expm1(entropy)) / (1 - 2 * C)


def solve_lambda(conditional, W, g, tol=1e-10, C=None):
    """Solve ``entropy(conditional) = lambda_rhs(lam, W, g)`` for ``lam >= 0`` by bisection.

    The right-hand side decreases from ``log N`` at 0 towards 0, so the root is
    unique. A one-hot conditional has no finite root and is rejected.
    """
    conditional = np.asarray(conditional, dtype=float)
    N = len(conditional)
    entropy = -float(np.sum(conditional * np.log(np.where(conditional > 0, conditional, 1.0))))
    if entropy <= 0.0:
        raise NumericalError("zero-entropy conditional: lambda is infinite (smooth the task first)")
    c = (W - W[g]) @ W[g]
    c[g] = -np.inf
    if not np.max(c) < 0:
        raise NumericalError("unembedding is too far from orthonormal: some (W_j - W_g).W_g >= 0")
    if C is None:
        C = gram_deviation(W)
    if entropy >= math.log(N) - tol:
        return 0.0
    cap = lambda_cap(entropy, N, C)
    hi = cap + 1.0 if math.isfinite(cap) else 1.0
    while lambda_rhs(hi, W, g) > entropy:
        hi *= 2.0
    lo = 0.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        r = lambda_rhs(mid, W, g) - entropy
        if abs(r) <= tol:
            lo = hi = mid
            break
        if r > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    lam = 0.5 * (lo + hi)
    if cap < lam <= cap + 1e-8 * max(1.0, cap) and abs(lambda_rhs(cap, W, g) - entropy) <= tol:
        # at C = 0 the cap is the exact root; bisection noise can land just past it
        lam = cap
    if abs(lambda_rhs(lam, W, g) - entropy) > tol:
        raise NumericalError("bisection stalled before reaching the residual tolerance")
    if lam > cap:
        raise NumericalError(f"lambda={lam} exceeds its closed-form cap {cap}")
    return lam


# -- Theorem 2 style upper bound -----------------------------------------------------

def _lookup_stats(task):
    if task.g is None:
        raise ValueError("the lookup-table bound needs g")
    T0, N = task.T0, task.N
    p_g = task.conditionals[np.arange(T0), task.g]
    entropy = -row_negentropies(task)
    off = task.conditionals.copy()
    off[np.arange(T0), task.g] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        tilde = np.where((1 - p_g)[:, None] > 0, off / (1 - p_g)[:, None], 0.0)
    unif = np.full((T0, N), 1.0 / (N - 1))
    unif[np.arange(T0), task.g] = 0.0
    d_tv = 0.5 * np.abs(tilde - unif).sum(axis=1)
    return p_g, entropy, d_tv


def lookup_bound_values(task, C):
    """Full and simplified lookup-table bounds evaluated at a given constant ``C < 1/2``."""
    if C >= 0.5:
        raise ValueError("the bound is vacuous for C >= 1/2")
    N = task.N
    p_g, entropy, d_tv = _lookup_stats(task)
    if np.any(entropy <= 0):
        raise ValueError("zero-entropy rows make the bound infinite; smooth the task first")
    log_term = np.log((N - 1) / np.expm1(entropy))
    full = float(task.prior @ ((1 - p_g) * (1 + 2 * C + C * d_tv) / (1 - 2 * C) * log_term))
    mean_entropy = float(task.prior @ entropy)
    simplified = float(task.prior @ (1 - p_g)) * math.log((N - 1) / math.expm1(mean_entropy)) \
        * (1 + 4 * C) / (1 - 2 * C)
    return full, simplified


def lookup_encoder(task, W, tol=1e-10, C=None):
    """Encoder ``E(t) = lambda(t) W[g(t)]`` with each lambda solved from the row entropy."""
    if C is None:
        C = gram_deviation(W)
    lams = np.array([solve_lambda(task.conditionals[i], W, task.g[i], tol=tol, C=C)
                     for i in range(task.T0)])
    return SequenceEncoder(W, lams[:, None] * W[task.g]), lams


def theorem2_bound(task, d, seed=0, max_tries=100, tol=1e-10, shortcut=True):
    """Lookup-table upper bound on the best rank-``d`` encoder KL.

    The bound is evaluated with the Gram deviation actually achieved by the
    sampled unembedding (``C_jl``), which is never larger than the
    ``sqrt(32 log(N+1)/d)`` target. Returns ``(BoundReport, SequenceEncoder)``.
    """
    W, C = jl_unembedding(task.N, d, seed=seed, max_tries=max_tries, shortcut=shortcut)
    if C >= 0.5:
        raise ValueError(f"achieved C={C:.4g} >= 1/2: the bound is vacuous")
    if np.any(row_negentropies(task) >= 0):
        raise ValueError("zero-entropy rows make the bound infinite; smooth the task first")
    enc, lams = lookup_encoder(task, W, tol=tol, C=C)
    full, simplified = lookup_bound_values(task, C)
    report = BoundReport(theorem2_full=full, theorem2_simplified=simplified, C_jl=C,
                         C_target=jl_constant(task.N, d), lambda_table=lams)
    return report, enc


# -- capacity formulas ------------------------------------------------------------

def phi(X, N, T0):
    """Accuracy implied by storing ``X`` of ``T0`` associations (the rest at chance)."""
    return 1.0 / N + (1.0 - 1.0 / N) * np.asarray(X, dtype=float) / T0


def phi_inverse(acc, N, T0):
    return (np.asarray(acc, dtype=float) - 1.0 / N) * T0 / (1.0 - 1.0 / N)


def capacity_formulas(H, d_h, d, N, S, T0):
    if T0 <= 0:
        raise ValueError("T0 must be positive")
    ours = H * d_h + d
    return CapacityReport(
        ours=ours,
        previous=H * (d_h - 1) + 1,
        kim_params=S + N + math.sqrt(T0 * math.log(T0)) if T0 > 1 else float(S + N),
        huben_params=float((d + S) * (S + N + T0)),
        phi_bound=float(min(1.0, phi(ours, N, T0))),
    )


# -- centered logit difference -------------------------------------------------

@dataclass
class LogitGapReport:
    table: np.ndarray     # (T0, N)
    mean_square: float    # prior- and pi-weighted mean of table**2


def centered_logit_gap(logits, task):
    """``Z[t, y] = f(t)_y - log pi(y|t) - E_{y ~ pi_t}[f(t)_y - log pi(y|t)]``."""
    if callable(logits):
        logits = logits(task.sequences)
    logits = np.asarray(logits, dtype=float)
    if np.any(task.conditionals <= 0):
        raise ValueError("the centered logit gap needs conditionals with full support")
    diff = logits - np.log(task.conditionals)
    Z = diff - np.sum(task.conditionals * diff, axis=1, keepdims=True)
    ms = float(task.prior @ np.sum(task.conditionals * Z ** 2, axis=1))
    return LogitGapReport(Z, ms)
