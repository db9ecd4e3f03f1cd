"""One-layer attention-only transformer (AoT) and its MLP-augmented variant.

The model reads a length-``S`` token sequence and returns next-token logits
at the last position only::

    x_s    = e[:, t_s] + pos[:, s]
    a^h    = softmax_s( x_S^T W_QK^h x_s )
    logits = W_U (x_S + sum_h W_O^h W_V^h sum_s a^h_s x_s)

The ``mlp_based`` variant has a single head (``d_h = d``) followed by a
residual GELU MLP: ``logits = W_U (z + W_2 gelu(W_1 z))``.

Weight layout follows column vectors: ``e`` is ``d x N``, ``pos`` is
``d x S``, ``W_U`` is ``N x d``.
"""
from dataclasses import dataclass, replace
import json

import numpy as np
from scipy.special import ndtr

from .numkernel import make_rng, softmax

VARIANTS = ("aot", "mlp_based")
QK_MODES = ("full", "rank1")
PARAM_FORMULAS = ("theorem1", "remark2", "raw")


@dataclass(frozen=True)
class ModelConfig:
    N: int
    S: int
    d: int
    d_h: int
    H: int
    variant: str = "aot"
    mlp_width: int = 0
    qk_mode: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.qk_mode not in QK_MODES:
            raise ValueError(f"qk_mode must be one of {QK_MODES}")
        if self.N < 2 or self.S < 1 or self.d < 1 or self.d_h < 1:
            raise ValueError("need N >= 2, S >= 1, d >= 1, d_h >= 1")
        # d_h > d is allowed (OV then has rank at most d); the construction requires d_h <= d
        if self.H < 0:
            raise ValueError("H must be nonnegative")
        if self.variant == "mlp_based":
            if self.H != 1:
                raise ValueError("the mlp_based variant has exactly one head")
            if self.mlp_width < 1:
                raise ValueError("the mlp_based variant needs mlp_width >= 1")

    def to_dict(self):
        return dict(N=self.N, S=self.S, d=self.d, d_h=self.d_h, H=self.H, variant=self.variant,
                    mlp_width=self.mlp_width, qk_mode=self.qk_mode)


@dataclass
class HeadParams:
    """One attention head. Either ``W_QK`` is given, or the rank-1 factors ``q, k``."""
    W_V: np.ndarray
    W_O: np.ndarray
    W_QK: np.ndarray = None
    q: np.ndarray = None
    k: np.ndarray = None

    def __post_init__(self):
        if self.W_QK is None and (self.q is None or self.k is None):
            raise ValueError("a head needs W_QK or both rank-1 factors q and k")

    @property
    def rank1(self):
        return self.W_QK is None

    @property
    def qk_matrix(self):
        if self.W_QK is not None:
            return self.W_QK
        return np.outer(self.q, self.k)

    def scores(self, query, keys):
        """Raw attention scores of ``query`` (..., d) against ``keys`` (..., S, d)."""
        if self.rank1:
            return (query @ self.q)[..., None] * (keys @ self.k)
        return np.einsum("...i,ij,...sj->...s", query, self.W_QK, keys)


@dataclass
class MLPParams:
    W_1: np.ndarray  # w x d
    W_2: np.ndarray  # d x w


@dataclass
class AoTParams:
    config: ModelConfig
    e: np.ndarray
    pos: np.ndarray
    heads: list
    W_U: np.ndarray
    mlp: MLPParams = None

    def __post_init__(self):
        validate_params(self)


def validate_params(p):
    c = p.config
    _check_shape("e", p.e, (c.d, c.N))
    _check_shape("pos", p.pos, (c.d, c.S))
    _check_shape("W_U", p.W_U, (c.N, c.d))
    if len(p.heads) != c.H:
        raise ValueError(f"config says H={c.H} but {len(p.heads)} heads were given")
    for i, h in enumerate(p.heads):
        if h.W_QK is not None:
            _check_shape(f"heads[{i}].W_QK", h.W_QK, (c.d, c.d))
        else:
            _check_shape(f"heads[{i}].q", h.q, (c.d,))
            _check_shape(f"heads[{i}].k", h.k, (c.d,))
        _check_shape(f"heads[{i}].W_V", h.W_V, (c.d_h, c.d))
        _check_shape(f"heads[{i}].W_O", h.W_O, (c.d, c.d_h))
    if c.variant == "mlp_based":
        if p.mlp is None:
            raise ValueError("mlp_based model is missing its MLP weights")
        _check_shape("mlp.W_1", p.mlp.W_1, (c.mlp_width, c.d))
        _check_shape("mlp.W_2", p.mlp.W_2, (c.d, c.mlp_width))


def _check_shape(name, arr, shape):
    if np.shape(arr) != tuple(shape):
        raise ValueError(f"{name} has shape {np.shape(arr)}, expected {tuple(shape)}")


def check_tokens(tokens, N, S):
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != S:
        raise ValueError(f"sequences must have length S={S}, got {tokens.shape[-1]}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= N):
        raise ValueError(f"token id out of range [0, {N})")
    return tokens


def embed(params, tokens):
    """Position-wise inputs ``x_s = e(t_s) + pos_s``; shape (..., S, d)."""
    tokens = check_tokens(tokens, params.config.N, params.config.S)
    return params.e.T[tokens] + params.pos.T


def attention_pattern(head, params, t):
    """Softmax attention of the last position over all positions of ``t``."""
    X = embed(params, t)
    return softmax(head.scores(X[..., -1, :], X), axis=-1)


def residual_stream(params, tokens):
    """Vector fed to the unembedding (before any MLP): skip plus all head outputs."""
    X = embed(params, tokens)
    z = X[..., -1, :].copy()
    for head in params.heads:
        a = softmax(head.scores(X[..., -1, :], X), axis=-1)
        A = np.einsum("...s,...sd->...d", a, X)
        z += A @ head.W_V.T @ head.W_O.T
    return z


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * ndtr(x)


def aot_forward(params, t):
    if params.config.variant != "aot":
        raise ValueError("aot_forward needs an aot-variant model")
    return residual_stream(params, t) @ params.W_U.T


def mlp_forward(params, t):
    if params.config.variant != "mlp_based" or params.mlp is None:
        raise ValueError("mlp_forward needs an mlp_based model with MLP weights")
    z = residual_stream(params, t)
    y = z + gelu(z @ params.mlp.W_1.T) @ params.mlp.W_2.T
    return y @ params.W_U.T


def forward(params, tokens):
    """Logits for one sequence (S,) or a batch (B, S), dispatching on the variant."""
    if params.config.variant == "aot":
        return aot_forward(params, tokens)
    return mlp_forward(params, tokens)


def logits_fn(params):
    return lambda tokens: forward(params, tokens)


def param_count(config, formula="raw"):
    """Parameter count of a configuration.

    ``theorem1`` is ``d(S + 2N + 4 d_h H)``, ``remark2`` uses rank-1
    query-key factors, ``d(S + 2N + 2(d_h + 1)H)``. ``raw`` tallies the
    entries actually stored by this implementation.
    """
    c = config
    if formula == "theorem1":
        return c.d * (c.S + 2 * c.N + 4 * c.d_h * c.H)
    if formula == "remark2":
        return c.d * (c.S + 2 * c.N + 2 * (c.d_h + 1) * c.H)
    if formula != "raw":
        raise ValueError(f"unknown formula {formula!r}")
    qk = 2 * c.d if c.qk_mode == "rank1" else c.d * c.d
    n = c.d * c.N + c.d * c.S + c.N * c.d + c.H * (qk + 2 * c.d_h * c.d)
    if c.variant == "mlp_based":
        n += 2 * c.mlp_width * c.d
    return n


def corollary1_param_count(T0, N, S):
    """``2(S + 2N + 4(T0 - 2))`` parameters for the d = 2 memorizer."""
    return 2 * (S + 2 * N + 4 * (T0 - 2))


def init_params(config, seed=0, init_scale=0.02):
    """I.i.d. normal(0, init_scale^2) weights for every tensor."""
    rng = make_rng(seed)
    c = config

    def draw(*shape):
        return init_scale * rng.standard_normal(shape)

    e, pos, W_U = draw(c.d, c.N), draw(c.d, c.S), draw(c.N, c.d)
    heads = []
    for _ in range(c.H):
        if c.qk_mode == "rank1":
            q, k = draw(c.d), draw(c.d)
            heads.append(HeadParams(W_V=draw(c.d_h, c.d), W_O=draw(c.d, c.d_h), q=q, k=k))
        else:
            heads.append(HeadParams(W_V=draw(c.d_h, c.d), W_O=draw(c.d, c.d_h), W_QK=draw(c.d, c.d)))
    mlp = None
    if c.variant == "mlp_based":
        mlp = MLPParams(W_1=draw(c.mlp_width, c.d), W_2=draw(c.d, c.mlp_width))
    return AoTParams(c, e, pos, heads, W_U, mlp)


def with_heads(params, heads, config=None):
    config = config or replace(params.config, H=len(heads))
    return AoTParams(config, params.e, params.pos, list(heads), params.W_U, params.mlp)


# -- serialization ---------------------------------------------------------

def _enc(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _dec(obj):
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def params_to_dict(params):
    heads = []
    for h in params.heads:
        entry = {"W_V": _enc(h.W_V), "W_O": _enc(h.W_O)}
        if h.rank1:
            entry["q"], entry["k"] = _enc(h.q), _enc(h.k)
        else:
            entry["W_QK"] = _enc(h.W_QK)
        heads.append(entry)
    out = {
        "config": params.config.to_dict(),
        "e": _enc(params.e),
        "pos": _enc(params.pos),
        "heads": heads,
        "W_U": _enc(params.W_U),
    }
    if params.mlp is not None:
        out["mlp"] = {"W_1": _enc(params.mlp.W_1), "W_2": _enc(params.mlp.W_2)}
    return out


def params_from_dict(obj):
    config = ModelConfig(**obj["config"])
    heads = []
    for h in obj["heads"]:
        heads.append(HeadParams(
            W_V=_dec(h["W_V"]), W_O=_dec(h["W_O"]),
            W_QK=_dec(h["W_QK"]) if "W_QK" in h else None,
            q=_dec(h["q"]) if "q" in h else None,
            k=_dec(h["k"]) if "k" in h else None,
        ))
    mlp = None
    if "mlp" in obj:
        mlp = MLPParams(_dec(obj["mlp"]["W_1"]), _dec(obj["mlp"]["W_2"]))
    return AoTParams(config, _dec(obj["e"]), _dec(obj["pos"]), heads, _dec(obj["W_U"]), mlp)


def params_to_json(params, indent=None):
    # float repr is the shortest string that round-trips exactly
    return json.dumps(params_to_dict(params), indent=indent)


def params_from_json(text):
    return params_from_dict(json.loads(text))
