"""Training and sweep harness for the scaling-law experiments.

Parameters are handled as a dict of stacked arrays during training::

    e (d, N)  pos (d, S)  W_QK (H, d, d)  W_V (H, d_h, d)  W_O (H, d, d_h)
    W_U (N, d)  [W_1 (w, d)  W_2 (d, w)]

Gradients are derived by hand (reverse mode through the attention softmax,
the optional GELU MLP and the output softmax) and checked against central
finite differences.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import csv
import math
import os
import time

import numpy as np
from scipy.special import ndtr

from .bounds import phi, phi_inverse
from .model import AoTParams, HeadParams, MLPParams, ModelConfig, init_params, param_count
from .numkernel import log_softmax, make_rng, polyfit_ls, softmax
from .task import accuracy, kl_divergence, make_association_task

SWEEP_COLUMNS = ("figure_id", "seed", "N", "S", "d", "d_h", "H", "variant", "params",
                 "final_accuracy", "final_kl", "wall_seconds")
HEAD_KEYS = ("W_QK", "W_V", "W_O")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batches_per_epoch: int = 1000
    batch_size: int = 1024
    epochs: int = 10
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: tuple = (0, 1)
    init_scale: float = 0.02
    zero_heads: bool = False   # zero and freeze every head: the 0-head baseline

    def __post_init__(self):
        if min(self.batches_per_epoch, self.batch_size, self.epochs) < 1 or self.lr <= 0:
            raise ValueError("counts must be positive and lr > 0")

    @classmethod
    def reduced(cls, **kw):
        """Desk-scale budget used by default in sweeps."""
        return cls(**{"epochs": 3, **kw})


@dataclass
class TrainResult:
    loss_curve: list
    accuracy_curve: list
    kl_curve: list
    final_accuracy: float
    final_kl: float
    steps: int
    wall_seconds: float


# -- parameter packing ---------------------------------------------------------

def to_arrays(params):
    c = params.config
    out = {"e": params.e.copy(), "pos": params.pos.copy(), "W_U": params.W_U.copy()}
    out["W_QK"] = np.array([h.qk_matrix for h in params.heads]).reshape(c.H, c.d, c.d)
    out["W_V"] = np.array([h.W_V for h in params.heads]).reshape(c.H, c.d_h, c.d)
    out["W_O"] = np.array([h.W_O for h in params.heads]).reshape(c.H, c.d, c.d_h)
    if params.mlp is not None:
        out["W_1"], out["W_2"] = params.mlp.W_1.copy(), params.mlp.W_2.copy()
    return out


def from_arrays(config, arrays):
    config = replace(config, qk_mode="full")
    heads = [HeadParams(W_V=arrays["W_V"][h].copy(), W_O=arrays["W_O"][h].copy(), W_QK=arrays["W_QK"][h].copy())
             for h in range(config.H)]
    mlp = MLPParams(arrays["W_1"].copy(), arrays["W_2"].copy()) if "W_1" in arrays else None
    return AoTParams(config, arrays["e"].copy(), arrays["pos"].copy(), heads, arrays["W_U"].copy(), mlp)


# -- forward / backward ----------------------------------------------------------

def _forward(P, tokens):
    # batched matmuls throughout; einsum without BLAS is several times slower here
    W_QK, W_V, W_O = P["W_QK"], P["W_V"], P["W_O"]
    H, d_h, d = W_V.shape
    X = P["e"].T[tokens] + P["pos"].T                                   # (B, S, d)
    B = X.shape[0]
    xS = X[:, -1, :]
    U = (xS @ W_QK.transpose(1, 0, 2).reshape(d, H * d)).reshape(B, H, d)
    a = softmax(U @ X.transpose(0, 2, 1), axis=-1)                      # (B, H, S)
    A = a @ X                                                           # (B, H, d)
    V = (A.transpose(1, 0, 2) @ W_V.transpose(0, 2, 1)).transpose(1, 0, 2)  # (B, H, d_h)
    z = xS + V.reshape(B, H * d_h) @ W_O.transpose(0, 2, 1).reshape(H * d_h, d)
    cache = dict(X=X, U=U, a=a, A=A, V=V, z=z)
    if "W_1" in P:
        u = z @ P["W_1"].T
        gel = u * ndtr(u)
        y = z + gel @ P["W_2"].T
        cache.update(u=u, gel=gel)
    else:
        y = z
    cache["y"] = y
    return y @ P["W_U"].T, cache


def batch_logits(P, tokens):
    return _forward(P, np.asarray(tokens))[0]


def _loss_and_grads(P, tokens, targets, weights=None):
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    B = len(tokens)
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, float) / np.sum(weights)
    logits, c = _forward(P, tokens)
    logp = log_softmax(logits, axis=1)
    loss = float(-(w @ logp[np.arange(B), targets]))

    W_QK, W_V, W_O = P["W_QK"], P["W_V"], P["W_O"]
    H, d_h, d = W_V.shape
    dlog = np.exp(logp)
    dlog[np.arange(B), targets] -= 1.0
    dlog *= w[:, None]
    g = {"W_U": dlog.T @ c["y"]}
    dy = dlog @ P["W_U"]
    if "W_1" in P:
        g["W_2"] = dy.T @ c["gel"]
        u = c["u"]
        du = (dy @ P["W_2"]) * (ndtr(u) + u * np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi))
        g["W_1"] = du.T @ c["z"]
        dz = dy + du @ P["W_1"]
    else:
        dz = dy
    X, U, a, A, V = c["X"], c["U"], c["a"], c["A"], c["V"]
    g["W_O"] = (dz.T @ V.reshape(B, H * d_h)).reshape(d, H, d_h).transpose(1, 0, 2)
    dV = (dz @ W_O.transpose(1, 0, 2).reshape(d, H * d_h)).reshape(B, H, d_h)
    g["W_V"] = dV.transpose(1, 2, 0) @ A.transpose(1, 0, 2)
    dA = (dV.transpose(1, 0, 2) @ W_V).transpose(1, 0, 2)               # (B, H, d)
    da = dA @ X.transpose(0, 2, 1)
    dX = a.transpose(0, 2, 1) @ dA
    draw = a * (da - np.sum(a * da, axis=-1, keepdims=True))            # softmax Jacobian
    dU = draw @ X
    dX += draw.transpose(0, 2, 1) @ U
    xS = X[:, -1, :]
    g["W_QK"] = (xS.T @ dU.reshape(B, H * d)).reshape(d, H, d).transpose(1, 0, 2)
    dX[:, -1, :] += dz + dU.reshape(B, H * d) @ W_QK.transpose(0, 2, 1).reshape(H * d, d)
    de = np.zeros_like(P["e"].T)
    np.add.at(de, tokens.ravel(), dX.reshape(-1, d))
    g["e"] = de.T
    g["pos"] = dX.sum(axis=0).T
    return loss, g


def _unpack_batch(batch):
    if isinstance(batch, tuple) and len(batch) in (2, 3) and np.ndim(batch[0]) == 2:
        return batch if len(batch) == 3 else (batch[0], batch[1], None)
    tokens = np.array([t for t, _ in batch])
    targets = np.array([y for _, y in batch])
    return tokens, targets, None


def loss_and_grads(params, batch):
    """Mean cross-entropy of a batch and its exact gradient.

    ``params`` is an ``AoTParams`` or an array dict; ``batch`` is a list of
    ``(tokens, target)`` pairs or a tuple ``(tokens (B, S), targets (B,)[, weights])``.
    Gradients come back in array-dict form.
    """
    P = to_arrays(params) if isinstance(params, AoTParams) else params
    tokens, targets, weights = _unpack_batch(batch)
    if len(tokens) == 0:
        raise ValueError("empty batch")
    loss, g = _loss_and_grads(P, tokens, targets, weights)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss")
    return loss, g


def finite_diff_check(params, batch, h=1e-4, n_coords=200, seed=0, floor=1e-6):
    """Largest relative error between analytic and central-difference gradients.

    The numeric derivative uses the five-point central stencil, so truncation
    error is O(h**4) and roundoff dominates at ``h = 1e-4``.

    Coordinates are sampled from every tensor in proportion to its size (at
    least one each, at least ``n_coords`` overall). The relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    P = to_arrays(params) if isinstance(params, AoTParams) else {k: v.copy() for k, v in params.items()}
    tokens, targets, weights = _unpack_batch(batch)
    _, g = _loss_and_grads(P, tokens, targets, weights)
    rng = make_rng(seed)
    keys = [k for k in P if P[k].size]
    total = sum(P[k].size for k in keys)
    worst = 0.0
    for k in keys:
        n = min(P[k].size, max(1, math.ceil(n_coords * P[k].size / total)))
        flat = P[k].reshape(-1)
        for i in rng.choice(P[k].size, size=n, replace=False):
            old = flat[i]
            f = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = old + step
                f.append(_loss_and_grads(P, tokens, targets, weights)[0])
            flat[i] = old
            num = (8 * (f[1] - f[2]) - (f[0] - f[3])) / (12 * h)   # differences first: equal values give exactly 0
            ana = g[k].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(P):
    return AdamState({k: np.zeros_like(v) for k, v in P.items()}, {k: np.zeros_like(v) for k, v in P.items()}, 0)


def adam_step(P, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.t + 1
    newP, m, v = {}, {}, {}
    for k, p in P.items():
        if k in frozen or k not in grads:
            newP[k], m[k], v[k] = p, state.m[k], state.v[k]
            continue
        gk = grads[k]
        m[k] = beta1 * state.m[k] + (1 - beta1) * gk
        v[k] = beta2 * state.v[k] + (1 - beta2) * gk * gk
        mhat = m[k] / (1 - beta1 ** t)
        vhat = v[k] / (1 - beta2 ** t)
        newP[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return newP, AdamState(m, v, t)


# -- training ----------------------------------------------------------------------

def sample_batch(task, size, rng, cum=None):
    """Draw ``size`` (sequence, next-token) pairs and merge duplicates into weights.

    Returns ``(tokens, targets, weights)``; the weighted loss equals the plain
    mean over the drawn pairs.
    """
    idx = rng.choice(task.T0, size=size, p=task.prior)
    if cum is None:
        cum = np.cumsum(task.conditionals, axis=1)
    u = rng.random(size)
    tgt = np.minimum((cum[idx] < u[:, None]).sum(axis=1), task.N - 1)
    key, counts = np.unique(idx * task.N + tgt, return_counts=True)
    return task.sequences[key // task.N], key % task.N, counts.astype(float)


def evaluate(P, task):
    logits = batch_logits(P, task.sequences)
    return accuracy(task, logits), kl_divergence(task, logits)


def train_model(config, task, train_cfg=None, seed=None, init=None):
    """Train one model with Adam on batches drawn from the task; returns ``(AoTParams, TrainResult)``.

    Accuracy and KL are measured exactly over the whole support after every epoch.
    """
    train_cfg = train_cfg or TrainConfig()
    if config.N != task.N or config.S != task.S:
        raise ValueError("model and task disagree on N or S")
    seed = train_cfg.seeds[0] if seed is None else seed
    rng_init, rng_data = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = init if init is not None else init_params(replace(config, qk_mode="full"), rng_init, train_cfg.init_scale)
    P = to_arrays(params)
    frozen = ()
    if train_cfg.zero_heads:
        P["W_O"] = np.zeros_like(P["W_O"])
        frozen = HEAD_KEYS
    state = adam_init(P)
    cum = np.cumsum(task.conditionals, axis=1)
    limit = 10 * math.log(task.N)
    over = 0
    losses, accs, kls = [], [], []
    t0 = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        for _ in range(train_cfg.batches_per_epoch):
            tokens, targets, weights = sample_batch(task, train_cfg.batch_size, rng_data, cum)
            loss, g = _loss_and_grads(P, tokens, targets, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.t}")
            over = over + 1 if loss > limit else 0
            if over >= 50:
                raise TrainingDiverged(f"loss {loss:.3g} above 10 log N for 50 steps (epoch {epoch})")
            P, state = adam_step(P, g, state, train_cfg.lr, train_cfg.adam_beta1, train_cfg.adam_beta2,
                                 train_cfg.adam_eps, frozen)
            epoch_loss += loss
        losses.append(epoch_loss / train_cfg.batches_per_epoch)
        acc, kl = evaluate(P, task)
        accs.append(acc)
        kls.append(kl)
    wall = time.perf_counter() - t0
    result = TrainResult(losses, accs, kls, accs[-1], kls[-1], state.t, wall)
    return from_arrays(replace(config, qk_mode="full"), P), result


def train_averaged(config, task, train_cfg=None):
    """Train once per seed in ``train_cfg.seeds``; returns the mean final accuracy and the runs."""
    train_cfg = train_cfg or TrainConfig()
    runs = [train_model(config, task, train_cfg, seed=s)[1] for s in train_cfg.seeds]
    return float(np.mean([r.final_accuracy for r in runs])), runs


# -- sweeps ------------------------------------------------------------------------

@dataclass
class SweepRecord:
    figure_id: str
    seed: int
    N: int
    S: int
    d: int
    d_h: int
    H: int
    variant: str
    params: int
    final_accuracy: float
    final_kl: float
    wall_seconds: float
    mlp_width: int = 0
    error: str = ""

    def row(self):
        return [getattr(self, c) for c in SWEEP_COLUMNS]

    @property
    def key(self):
        return (self.figure_id, int(self.seed), int(self.N), int(self.S), int(self.d), int(self.d_h),
                int(self.H), self.variant, int(self.mlp_width))


@dataclass
class SweepSpec:
    figure_id: str
    configs: list               # dicts with N, S, d, d_h, H and optionally variant, mlp_width
    train_cfg: TrainConfig = field(default_factory=TrainConfig.reduced)
    csv_path: str = None
    parallelism: int = 1


def mlp_width_for_budget(d, H):
    """MLP width giving the one-head MLP model the raw parameter count of an H-head AoT (d_h = d)."""
    return max(1, round(3 * (H - 1) * d / 2))


def figure_sweep(figure_id, full=False, csv_path=None, seeds=(0, 1), parallelism=1):
    """Grid for each scaling-law figure; ``full`` restores the 10 x 1000 x 1024 budget."""
    cfgs = []
    if figure_id == "fig1a":
        cfgs = [dict(N=50, S=2, d=10, d_h=10, H=H) for H in (1, 5, 10, 15, 20)]
    elif figure_id == "fig1b":
        cfgs = [dict(N=50, S=2, d=10, d_h=dh, H=20) for dh in range(1, 11)]
    elif figure_id == "fig2a":
        # head dimension capped at d: a wider head adds no rank
        cfgs = [dict(N=50, S=2, d=d, d_h=min(10, d), H=20) for d in (2, 4, 6, 8, 10, 15, 20, 30)]
    elif figure_id == "fig2b":
        cfgs = [dict(N=50, S=2, d=d, d_h=d, H=H) for d in (2, 4, 6, 8, 10) for H in (1, 5, 10, 15, 20)]
    elif figure_id == "fig3":
        d = 10
        for H in (2, 4, 8, 12, 16):
            cfgs.append(dict(N=50, S=2, d=d, d_h=d, H=H))
            cfgs.append(dict(N=50, S=2, d=d, d_h=d, H=1, variant="mlp_based", mlp_width=mlp_width_for_budget(d, H)))
    elif figure_id == "fig4":
        cfgs = [dict(N=10, S=2, d=2, d_h=5, H=H) for H in range(1, 21)]
    else:
        raise ValueError(f"unknown figure {figure_id!r}")
    tc = TrainConfig(seeds=tuple(seeds)) if full or figure_id == "fig4" else TrainConfig.reduced(seeds=tuple(seeds))
    return SweepSpec(figure_id, cfgs, tc, csv_path, parallelism)


def _run_one(job):
    figure_id, cfg, seed, train_cfg = job
    rec = SweepRecord(figure_id, seed, cfg["N"], cfg["S"], cfg["d"], cfg["d_h"], cfg["H"], cfg.get("variant", "aot"),
                      0, float("nan"), float("nan"), 0.0, cfg.get("mlp_width", 0))
    try:
        config = ModelConfig(cfg["N"], cfg["S"], cfg["d"], cfg["d_h"], cfg["H"], rec.variant, rec.mlp_width)
        rec.params = param_count(config, "raw")
        task = make_association_task(config.N, config.S, seed=seed)
        _, res = train_model(config, task, train_cfg, seed=seed)
        rec.final_accuracy, rec.final_kl, rec.wall_seconds = res.final_accuracy, res.final_kl, res.wall_seconds
    except Exception as exc:  # recorded per row; the sweep carries on
        rec.error = f"{type(exc).__name__}: {exc}"
    return rec


def _mlp_width_from_params(N, S, d, d_h, params):
    # raw count grows by 2d per unit of width
    base = param_count(ModelConfig(N, S, d, d_h, 1, "mlp_based", 1), "raw")
    return 1 + (params - base) // (2 * d)


def read_sweep_csv(path):
    recs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = SweepRecord(
                row["figure_id"], int(row["seed"]), int(row["N"]), int(row["S"]), int(row["d"]), int(row["d_h"]),
                int(row["H"]), row["variant"], int(row["params"]), float(row["final_accuracy"]),
                float(row["final_kl"]), float(row["wall_seconds"]))
            if rec.variant == "mlp_based":
                rec.mlp_width = _mlp_width_from_params(rec.N, rec.S, rec.d, rec.d_h, rec.params)
            recs.append(rec)
    return recs


def _config_key(figure_id, seed, cfg):
    return (figure_id, seed, cfg["N"], cfg["S"], cfg["d"], cfg["d_h"], cfg["H"], cfg.get("variant", "aot"),
            cfg.get("mlp_width", 0))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def run_sweep(spec):
    """Train every (config, seed) pair; rows already in ``spec.csv_path`` are skipped.

    Rows are appended to the CSV as they finish. Failed runs are returned with
    their ``error`` set and are not written.
    """
    done = {}
    if spec.csv_path and os.path.exists(spec.csv_path) and os.path.getsize(spec.csv_path) > 0:
        done = {r.key: r for r in read_sweep_csv(spec.csv_path)}
    jobs, records = [], {}
    for cfg in spec.configs:
        for seed in spec.train_cfg.seeds:
            key = _config_key(spec.figure_id, seed, cfg)
            if key in done:
                records[key] = done[key]
            else:
                jobs.append((spec.figure_id, cfg, seed, spec.train_cfg))

    writer = fh = None
    if spec.csv_path:
        new_file = not os.path.exists(spec.csv_path) or os.path.getsize(spec.csv_path) == 0
        fh = open(spec.csv_path, "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(SWEEP_COLUMNS)
    workers = max(1, min(spec.parallelism, int(os.environ.get("AOTMEM_THREADS", spec.parallelism))))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = pool.map(_run_one, jobs)
                for rec in results:
                    records[rec.key] = rec
                    if writer and not rec.error:
                        writer.writerow([_fmt(v) for v in rec.row()])
                        fh.flush()
        else:
            for job in jobs:
                rec = _run_one(job)
                records[rec.key] = rec
                if writer and not rec.error:
                    writer.writerow([_fmt(v) for v in rec.row()])
                    fh.flush()
    finally:
        if fh:
            fh.close()
    order = []
    for cfg in spec.configs:
        for seed in spec.train_cfg.seeds:
            order.append(records[_config_key(spec.figure_id, seed, cfg)])
    return order


# -- scaling-law fits -----------------------------------------------------------------

def group_means(records, x_column, y_column="final_accuracy", where=None):
    """Mean of ``y_column`` per distinct ``x_column`` value (seeds averaged)."""
    groups = {}
    for r in records:
        if where and not where(r):
            continue
        if getattr(r, "error", ""):
            continue
        groups.setdefault(float(getattr(r, x_column)), []).append(float(getattr(r, y_column)))
    xs = np.array(sorted(groups))
    return xs, np.array([np.mean(groups[x]) for x in xs])


def fit_scaling_law(records, form="linear", x_column="H", capacity_units=False, where=None, max_fraction=None):
    """Fit grouped mean accuracy against ``x_column``.

    With ``capacity_units`` the accuracy is first mapped to a count of stored
    associations, ``X = (acc - 1/N) T0 / (1 - 1/N)``. ``max_fraction`` drops
    saturated groups whose count exceeds that fraction of ``T0``.
    """
    recs = [r for r in records if not getattr(r, "error", "") and (where is None or where(r))]
    xs, ys = group_means(recs, x_column)
    if capacity_units:
        N, S = recs[0].N, recs[0].S
        T0 = N ** S
        ys = phi_inverse(ys, N, T0)
        if max_fraction is not None:
            keep = ys <= max_fraction * T0
            xs, ys = xs[keep], ys[keep]
    if len(xs) < 3:
        raise ValueError(f"need at least 3 groups to fit, have {len(xs)}")
    return polyfit_ls(xs, ys, form)


def synthetic_records(slope, Hs, N=10, S=2, d=2, d_h=5, figure_id="synthetic"):
    """Records whose accuracy is exactly ``phi(slope * H)``; used to check fit round trips."""
    T0 = N ** S
    return [SweepRecord(figure_id, 0, N, S, d, d_h, H, "aot", 0, float(phi(slope * H, N, T0)), 0.0, 0.0)
            for H in Hs]
