"""Task distributions over token sequences and the metrics used to score models.

A task is a finite support of length-``S`` sequences with prior weights, plus
one conditional next-token distribution per sequence. Everything is stored
densely, so metrics are exact sums over the support.
"""
from dataclasses import dataclass
import itertools
import json
import math

import numpy as np

from .numkernel import log_softmax, make_rng

SUPPORT_CAP = 100_000
PROB_ATOL = 1e-12


class SupportTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class TaskDistribution:
    N: int
    S: int
    sequences: np.ndarray     # (T0, S) int
    prior: np.ndarray         # (T0,)
    conditionals: np.ndarray  # (T0, N)
    g: np.ndarray = None      # (T0,) lookup targets, optional

    def __post_init__(self):
        seqs = np.asarray(self.sequences)
        T0 = seqs.shape[0]
        if seqs.ndim != 2 or seqs.shape[1] != self.S:
            raise ValueError(f"sequences must have shape (T0, {self.S})")
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.N):
            raise ValueError("token id out of range")
        if len({tuple(s) for s in seqs.tolist()}) != T0:
            raise ValueError("duplicate sequences in support")
        prior = np.asarray(self.prior, dtype=float)
        cond = np.asarray(self.conditionals, dtype=float)
        if prior.shape != (T0,) or np.any(prior <= 0):
            raise ValueError("prior must be positive with one entry per sequence")
        if abs(prior.sum() - 1.0) > PROB_ATOL * max(1, T0):
            raise ValueError(f"prior sums to {prior.sum()!r}, not 1")
        if cond.shape != (T0, self.N) or np.any(cond < 0):
            raise ValueError("conditionals must be nonnegative with shape (T0, N)")
        if np.any(np.abs(cond.sum(axis=1) - 1.0) > PROB_ATOL * self.N):
            raise ValueError("each conditional row must sum to 1")
        if self.g is not None:
            g = np.asarray(self.g)
            if g.shape != (T0,):
                raise ValueError("lookup g needs one target per sequence")
            if np.any(cond[np.arange(T0), g] < cond.max(axis=1) - PROB_ATOL):
                raise ValueError("lookup target must carry the largest conditional probability")

    @property
    def T0(self):
        return self.sequences.shape[0]

    def index_of(self, t):
        key = tuple(int(x) for x in t)
        for i, s in enumerate(self.sequences.tolist()):
            if tuple(s) == key:
                return i
        raise KeyError(key)

    def targets(self):
        """Target token per sequence: the lookup ``g`` or the one-hot argmax."""
        if self.g is not None:
            return np.asarray(self.g)
        if check_assumptions(self).assumption1:
            return self.conditionals.argmax(axis=1)
        raise ValueError("task has no lookup table and its conditionals are not one-hot")


@dataclass(frozen=True)
class AssumptionReport:
    assumption1: bool
    assumption2: bool
    min_conditional: float
    max_entropy: float


def all_sequences(N, S, cap=SUPPORT_CAP):
    if N ** S > cap:
        raise SupportTooLarge(f"N^S = {N ** S} exceeds the support cap {cap}")
    return np.array(list(itertools.product(range(N), repeat=S)), dtype=np.int64).reshape(-1, S)


def make_association_task(N, S, seed=0, cap=SUPPORT_CAP):
    """Uniform prior over all ``N**S`` sequences, one random next token each."""
    if N < 2 or S < 1:
        raise ValueError("need N >= 2 and S >= 1")
    seqs = all_sequences(N, S, cap)
    rng = make_rng(seed)
    g = rng.integers(0, N, size=len(seqs))
    cond = np.zeros((len(seqs), N))
    cond[np.arange(len(seqs)), g] = 1.0
    return TaskDistribution(N, S, seqs, np.full(len(seqs), 1.0 / len(seqs)), cond, g)


def make_noisy_lookup_task(N, S, p_correct, seed=0, cap=SUPPORT_CAP):
    """Lookup table with symmetric noise: ``p_correct`` on ``g(t)``, the rest spread evenly.

    ``p_correct = 1/N`` is accepted as the degenerate uniform case.
    """
    if not (1.0 / N <= p_correct < 1.0):
        raise ValueError(f"p_correct must lie in [1/N, 1), got {p_correct}")
    seqs = all_sequences(N, S, cap)
    rng = make_rng(seed)
    g = rng.integers(0, N, size=len(seqs))
    cond = np.full((len(seqs), N), (1.0 - p_correct) / (N - 1))
    cond[np.arange(len(seqs)), g] = p_correct
    return TaskDistribution(N, S, seqs, np.full(len(seqs), 1.0 / len(seqs)), cond, g)


def make_task(N, S, sequences, prior, conditionals, g=None):
    """Build a task from explicit arrays; the prior is renormalized."""
    prior = np.asarray(prior, dtype=float)
    return TaskDistribution(N, S, np.asarray(sequences, dtype=np.int64).reshape(-1, S),
                            prior / prior.sum(), np.asarray(conditionals, dtype=float),
                            None if g is None else np.asarray(g, dtype=np.int64))


def smooth_task(task, delta):
    """Map every conditional row to ``(pi + delta) / (1 + N delta)``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    cond = (task.conditionals + delta) / (1.0 + task.N * delta)
    cond /= cond.sum(axis=1, keepdims=True)
    g = task.g if task.g is not None else None
    if g is None and check_assumptions(task).assumption1:
        g = task.conditionals.argmax(axis=1)
    return TaskDistribution(task.N, task.S, task.sequences, task.prior, cond, g)


def negentropy(p):
    """``sum p log p`` with ``0 log 0 = 0``; lies in ``[-log N, 0]``."""
    p = np.asarray(p, dtype=float)
    safe = np.where(p > 0, p, 1.0)
    return float(np.sum(p * np.log(safe)))


def row_negentropies(task):
    c = task.conditionals
    return np.sum(c * np.log(np.where(c > 0, c, 1.0)), axis=1)


def check_assumptions(task):
    c = task.conditionals
    one_hot = bool(np.all((np.isclose(c, 0.0, atol=PROB_ATOL) | np.isclose(c, 1.0, atol=PROB_ATOL))))
    mn = float(c.min())
    return AssumptionReport(
        assumption1=one_hot,
        assumption2=mn > 0.0,
        min_conditional=mn,
        max_entropy=float(-row_negentropies(task).min()),
    )


def resolve_logits(task, logits):
    """Accept either a (T0, N) array or a callable on the (T0, S) sequence batch."""
    if callable(logits):
        logits = logits(task.sequences)
    logits = np.asarray(logits, dtype=float)
    if logits.shape != (task.T0, task.N):
        raise ValueError(f"logits have shape {logits.shape}, expected {(task.T0, task.N)}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite on the support")
    return logits


def per_sequence_kl(task, logits):
    logits = resolve_logits(task, logits)
    c = task.conditionals
    logq = log_softmax(logits, axis=1)
    logp = np.log(np.where(c > 0, c, 1.0))
    return np.sum(np.where(c > 0, c * (logp - logq), 0.0), axis=1)


def kl_divergence(task, logits):
    """Prior-averaged ``KL(pi_t || softmax(logits(t)))``."""
    return float(task.prior @ per_sequence_kl(task, logits))


def correct_mask(task, logits):
    """True where the target logit is the unique strict maximum (ties fail)."""
    logits = resolve_logits(task, logits)
    tgt = task.targets()
    tl = logits[np.arange(task.T0), tgt]
    others = logits.copy()
    others[np.arange(task.T0), tgt] = -np.inf
    return tl > others.max(axis=1)


def accuracy(task, logits):
    mask = correct_mask(task, logits)
    # exact 1.0 when every sequence is correct
    return math.fsum(task.prior[mask]) / math.fsum(task.prior)


def ranked_indices(task):
    """Support indices by decreasing prior, ties broken by lexicographic token order."""
    keys = [task.sequences[:, j] for j in reversed(range(task.S))]
    return np.lexsort(keys + [-task.prior])


def t_epsilon(task, eps):
    """Smallest number of sequences whose cumulative prior exceeds ``1 - eps``.

    Computed through the remaining tail mass (tail < eps), which avoids the
    rounding of a running sum close to 1; ``eps = 0`` gives the support size.
    """
    if not (0.0 <= eps < 1.0):
        raise ValueError("eps must lie in [0, 1)")
    p = task.prior[ranked_indices(task)]
    tail = np.concatenate([np.cumsum(p[::-1])[::-1][1:], [0.0]])
    return int(np.argmax(tail < eps) + 1) if eps > 0 else task.T0


# -- serialization ---------------------------------------------------------

def task_to_dict(task):
    return {
        "N": task.N,
        "S": task.S,
        "support": [{"tokens": [int(x) for x in s], "prior": float(p)}
                    for s, p in zip(task.sequences, task.prior)],
        "conditionals": [[float(x) for x in row] for row in task.conditionals],
        "g": None if task.g is None else [int(x) for x in task.g],
    }


def task_from_dict(obj):
    seqs = [s["tokens"] for s in obj["support"]]
    prior = [s["prior"] for s in obj["support"]]
    g = obj.get("g")
    return TaskDistribution(int(obj["N"]), int(obj["S"]), np.asarray(seqs, dtype=np.int64).reshape(-1, obj["S"]),
                            np.asarray(prior, dtype=float), np.asarray(obj["conditionals"], dtype=float),
                            None if g is None else np.asarray(g, dtype=np.int64))


def task_to_json(task, indent=None):
    return json.dumps(task_to_dict(task), indent=indent)


def task_from_json(text):
    return task_from_dict(json.loads(text))
