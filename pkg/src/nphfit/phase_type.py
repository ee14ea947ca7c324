"""Phase-type representations PH(alpha, T)."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .matrix_core import MAX_ORDER, decay_shift, exp_many

SUM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PhaseTypeRep:
    """Initial distribution ``alpha`` and sub-intensity matrix ``T``.

    Build instances through :func:`validate` (or the constructors below); the
    exit vector is always derived from ``T``.
    """

    alpha: np.ndarray
    T: np.ndarray

    @property
    def p(self):
        return self.alpha.shape[0]

    @property
    def exit(self):
        return -self.T.sum(axis=1)

    def mean(self):
        return float(self.alpha @ np.linalg.solve(-self.T, np.ones(self.p)))

    def __eq__(self, other):
        if not isinstance(other, PhaseTypeRep):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.T, other.T)

    __hash__ = None


def validate(alpha, T):
    """Check the phase-type invariants and return a frozen representation.

    Raises
    ------
    ValidationError
        Naming the first violated invariant.
    """
    alpha = np.array(alpha, dtype=float).reshape(-1)
    T = np.array(T, dtype=float)
    if T.ndim == 0:
        T = T.reshape(1, 1)
    p = alpha.shape[0]
    if p < 1:
        raise ValidationError("alpha must have at least one entry")
    if p > MAX_ORDER:
        raise ValidationError(f"order {p} exceeds cap {MAX_ORDER}")
    if T.shape != (p, p):
        raise ValidationError(f"dimension mismatch: alpha has {p} entries, T has shape {T.shape}")
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(T))):
        raise ValidationError("non-finite entries")
    if np.any(alpha < 0):
        raise ValidationError("alpha has negative entries")
    if abs(alpha.sum() - 1.0) > SUM_TOL:
        raise ValidationError(f"alpha sums to {alpha.sum():.15g}, not 1")
    off = T[~np.eye(p, dtype=bool)]
    if np.any(off < 0):
        raise ValidationError("T has negative off-diagonal entries")
    if np.any(np.diag(T) >= 0):
        raise ValidationError("T has nonnegative diagonal entries")
    rows = T.sum(axis=1)
    if np.any(rows > SUM_TOL):
        raise ValidationError(f"T has a positive row sum ({rows.max():.3g})")
    # rounding may leave tiny positive row sums within tolerance
    exit_vec = -rows
    if not np.any(exit_vec > 0):
        raise ValidationError("exit vector has no strictly positive entry")
    alpha.setflags(write=False)
    T.setflags(write=False)
    return PhaseTypeRep(alpha, T)


def _exp_blocks(rep, xs):
    xs = np.asarray(xs, dtype=float)
    shift = decay_shift(rep.T)
    return exp_many(rep.T, xs.reshape(-1), shift), shift


def ph_density(rep, y):
    """Density ``alpha exp(T y) t``; vectorized over ``y``."""
    y_arr = np.asarray(y, dtype=float)
    E, shift = _exp_blocks(rep, y_arr)
    vals = np.einsum("k,nkl,l->n", rep.alpha, E, rep.exit) * np.exp(-shift * y_arr.reshape(-1))
    vals = np.maximum(vals, 0.0)
    return vals.reshape(y_arr.shape) if y_arr.ndim else float(vals[0])


def ph_survival(rep, y):
    """Survival ``alpha exp(T y) e``; vectorized over ``y``."""
    y_arr = np.asarray(y, dtype=float)
    E, shift = _exp_blocks(rep, y_arr)
    vals = np.einsum("k,nkl->n", rep.alpha, E)
    vals = np.clip(vals * np.exp(-shift * y_arr.reshape(-1)), 0.0, 1.0)
    return vals.reshape(y_arr.shape) if y_arr.ndim else float(vals[0])


def erlang(q, lam):
    """Erlang(q, lam) in its canonical bidiagonal representation."""
    q = int(q)
    if q < 1 or not lam > 0:
        raise ValidationError("erlang needs q >= 1 and lam > 0")
    alpha = np.zeros(q)
    alpha[0] = 1.0
    T = -lam * np.eye(q) + lam * np.eye(q, k=1)
    return validate(alpha, T)


def random_init(p, seed, mean_scale=1.0):
    """Random dense representation rescaled to mean ``mean_scale``.

    Deterministic in ``seed``.
    """
    p = int(p)
    if p < 1 or not mean_scale > 0:
        raise ValidationError("random_init needs p >= 1 and mean_scale > 0")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(size=p)
    alpha /= alpha.sum()
    T = rng.uniform(size=(p, p))
    np.fill_diagonal(T, 0.0)
    exit_rate = rng.uniform(size=p)
    np.fill_diagonal(T, -(T.sum(axis=1) + exit_rate))
    mean = alpha @ np.linalg.solve(-T, np.ones(p))
    T = T * (mean / mean_scale)
    return validate(alpha, T)
