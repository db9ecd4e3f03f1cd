"""Dense numerical kernel: SVD with numeric rank, minimum-norm least squares,
stable softmax, small polynomial fits and seeded random streams.

Everything works on float64 numpy arrays.
"""
from dataclasses import dataclass

import numpy as np

DEFAULT_RANK_TOL = 1e-8


class NumericalError(RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray
    numeric_rank: int
    tol: float

    @property
    def sigma_max(self):
        return float(self.singular_values[0]) if self.singular_values.size else 0.0

    def reconstruct(self):
        return (self.U * self.singular_values) @ self.Vt


@dataclass(frozen=True)
class FitResult:
    """Least-squares fit of ``ys`` against a fixed design in ``xs``.

    ``coefficients`` follow the order of ``powers``: for ``affine_quadratic``
    that is ``[b, a]`` in ``a*x**2 + b``.
    """
    form: str
    powers: tuple
    coefficients: np.ndarray
    residual_norm: float
    r_squared: float

    def predict(self, xs):
        xs = np.asarray(xs, dtype=float)
        return sum(c * xs ** p for c, p in zip(self.coefficients, self.powers))

    def to_dict(self):
        return {
            "form": self.form,
            "powers": list(self.powers),
            "coefficients": [float(c) for c in self.coefficients],
            "residual_norm": float(self.residual_norm),
            "r_squared": float(self.r_squared),
        }


FIT_FORMS = {
    "linear": (0, 1),
    "quadratic_in_x": (0, 1, 2),
    "cubic": (0, 1, 2, 3),
    "affine_quadratic": (0, 2),
}


def as_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def numeric_rank(singular_values, tol=DEFAULT_RANK_TOL):
    """Count singular values above ``tol * sigma_max``."""
    s = np.asarray(singular_values)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def svd(m, tol=DEFAULT_RANK_TOL):
    """Thin SVD with the numeric rank taken relative to the largest singular value."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if 0 in m.shape:
        k = 0
        return SvdResult(np.zeros((m.shape[0], k)), np.zeros(k), np.zeros((k, m.shape[1])), 0, tol)
    try:
        U, s, Vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    return SvdResult(U, s, Vt, numeric_rank(s, tol), tol)


def pinv(m, tol=DEFAULT_RANK_TOL):
    res = svd(m, tol)
    r = res.numeric_rank
    return (res.Vt[:r].T / res.singular_values[:r]) @ res.U[:, :r].T


def lstsq_min_norm(A, B, tol=DEFAULT_RANK_TOL):
    """Minimum Frobenius-norm minimizer of ``||A X - B||_F``.

    Singular values below ``tol * sigma_max`` are treated as zero. ``B`` may be
    a vector, in which case a vector is returned.
    """
    A = as_matrix(A)
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"row mismatch: A has {A.shape[0]} rows, B has {B.shape[0]}")
    res = svd(A, tol)
    r = res.numeric_rank
    coef = res.U[:, :r].T @ B
    coef = coef / (res.singular_values[:r, None] if coef.ndim > 1 else res.singular_values[:r])
    return res.Vt[:r].T @ coef


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def logsumexp(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    return v - np.expand_dims(logsumexp(v, axis=axis), axis)


def polyfit_ls(xs, ys, model_form="linear"):
    """Least-squares fit of one of the forms in ``FIT_FORMS``."""
    if model_form not in FIT_FORMS:
        raise ValueError(f"unknown model form {model_form!r}; choose from {sorted(FIT_FORMS)}")
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise ValueError("xs and ys differ in length")
    powers = FIT_FORMS[model_form]
    if xs.size < len(powers):
        raise ValueError(f"{model_form} needs at least {len(powers)} points, got {xs.size}")
    if np.ptp(xs) == 0.0:
        raise NumericalError("degenerate design: all xs are equal")
    X = np.stack([xs ** p for p in powers], axis=1)
    res = svd(X, 1e-12)
    if res.numeric_rank < len(powers):
        raise NumericalError("degenerate design matrix")
    coef = lstsq_min_norm(X, ys, 1e-12)
    resid = ys - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    return FitResult(model_form, powers, coef, float(np.sqrt(ss_res)), float(r2))


def make_rng(seed):
    """Generator from an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn(seed, n):
    """``n`` independent child generators derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]
