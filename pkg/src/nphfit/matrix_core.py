"""Dense small-matrix exponentials and the Van Loan block integral.

``mat_exp`` is the plain scaling-and-squaring Padé method of Higham (2005).
``exp_and_integral`` exponentiates the block matrix ``[[T, v w], [0, T]]`` so
that one call yields both ``exp(T y)`` and the convolution integral

    J(y) = int_0^y exp(T (y - u)) v w exp(T u) du.

``block_exp_many`` is the batched variant used by the E-steps: one base block,
many scalar arguments, optionally shifted by a multiple of the identity so that
``exp((A + shift I) x)`` stays representable for very large ``x``.
"""

import math

import numpy as np

from . import _kernels
from .errors import InvalidInputError, NumericOverflowError

MAX_ORDER = 64

_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}

_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: tuple(_kernels.PADE[4]),
}


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise InvalidInputError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if A.shape[0] > MAX_ORDER:
        raise InvalidInputError(f"{name} has order {A.shape[0]} > cap {MAX_ORDER}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


def mat_exp(A):
    """Matrix exponential by scaling and squaring with Padé approximants.

    Parameters
    ----------
    A : array_like, shape (n, n)
        Finite square matrix, ``n <= 64``.

    Returns
    -------
    ndarray, shape (n, n)

    Raises
    ------
    InvalidInputError
        Non-square, oversized or non-finite input.
    NumericOverflowError
        The result is not finite.
    """
    A = _as_square(A)
    n = A.shape[0]
    ident = np.eye(n)
    norm = np.abs(A).sum(axis=0).max()
    if norm == 0.0:
        return ident

    A2 = A @ A
    for m in (3, 5, 7, 9):
        if norm <= _THETA[m]:
            b = _PADE[m]
            U = b[1] * ident
            V = b[0] * ident
            Ak = ident
            for k in range(1, m // 2 + 1):
                Ak = Ak @ A2
                U = U + b[2 * k + 1] * Ak
                V = V + b[2 * k] * Ak
            U = A @ U
            return _finish(U, V, 0)

    s = max(0, int(math.ceil(math.log2(norm / _THETA[13]))))
    if s:
        A = A / 2.0 ** s
        A2 = A2 / 4.0 ** s
    A4 = A2 @ A2
    A6 = A4 @ A2
    b = _PADE[13]
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
             + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
         + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    return _finish(U, V, s)


def _finish(U, V, s):
    with np.errstate(over="ignore", invalid="ignore"):
        R = np.linalg.solve(V - U, V + U)
        for _ in range(s):
            R = R @ R
    if not np.all(np.isfinite(R)):
        raise NumericOverflowError("matrix exponential overflowed")
    return R


def _vanloan_block(T, v, w):
    T = _as_square(T, "T")
    p = T.shape[0]
    if 2 * p > MAX_ORDER:
        raise InvalidInputError(f"Van Loan block of order {2 * p} exceeds cap {MAX_ORDER}")
    v = np.asarray(v, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if v.shape[0] != p or w.shape[0] != p:
        raise InvalidInputError(
            f"dimension mismatch: T is {p}x{p}, v has {v.shape[0]}, w has {w.shape[0]}")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise InvalidInputError("v and w must be finite")
    block = np.zeros((2 * p, 2 * p))
    block[:p, :p] = T
    block[p:, p:] = T
    block[:p, p:] = np.outer(v, w)
    return block


def exp_and_integral(T, v, w, y):
    """Return ``(exp(T y), J(y))`` from a single 2p x 2p exponential.

    ``J(y) = int_0^y exp(T (y-u)) v w exp(T u) du`` where ``v`` is a column
    and ``w`` a row vector.
    """
    y = float(y)
    if not (y >= 0.0) or not math.isfinite(y):
        raise InvalidInputError(f"y must be finite and nonnegative, got {y}")
    block = _vanloan_block(T, v, w)
    p = block.shape[0] // 2
    R = mat_exp(block * y)
    return R[:p, :p].copy(), R[:p, p:].copy()


def block_exp_many(T, v, w, xs, shift=0.0):
    """Batched Van Loan exponentials of ``(A + shift I) x`` for many ``x``.

    Parameters
    ----------
    T : ndarray (p, p)
    v, w : ndarray (p,)
        Column and row factors of the corner block.
    xs : ndarray (N,)
        Nonnegative scalar multipliers.
    shift : float
        Added to the diagonal before exponentiating; the caller rescales by
        ``exp(-shift * x)``.

    Returns
    -------
    E, J : ndarray (N, p, p)
        Diagonal and corner blocks of ``exp((A + shift I) x)``.
    """
    block = _vanloan_block(T, v, w)
    p = block.shape[0] // 2
    xs = np.ascontiguousarray(xs, dtype=float).reshape(-1)
    if xs.size and (not np.all(np.isfinite(xs)) or xs.min() < 0):
        raise InvalidInputError("arguments must be finite and nonnegative")
    block = block + shift * np.eye(2 * p)
    nu = np.abs(block).sum(axis=0).max()
    E = np.empty((xs.size, p, p))
    J = np.empty((xs.size, p, p))
    if nu == 0.0:
        E[:] = np.eye(p)
        J[:] = 0.0
        return E, J
    scaled = block / nu
    PT = np.empty((14, p, p))
    PC = np.empty((14, p, p))
    P = np.eye(2 * p)
    for k in range(14):
        PT[k] = P[:p, :p]
        PC[k] = P[:p, p:]
        P = P @ scaled
    _kernels.block_exp_batch(PT, PC, float(nu), xs, E, J)
    return E, J


def exp_many(T, xs, shift=0.0):
    """Batched ``exp((T + shift I) x)`` for many nonnegative ``x``."""
    T = _as_square(T, "T")
    p = T.shape[0]
    xs = np.ascontiguousarray(xs, dtype=float).reshape(-1)
    if xs.size and (not np.all(np.isfinite(xs)) or xs.min() < 0):
        raise InvalidInputError("arguments must be finite and nonnegative")
    A = T + shift * np.eye(p)
    nu = np.abs(A).sum(axis=0).max()
    E = np.empty((xs.size, p, p))
    if nu == 0.0:
        E[:] = np.eye(p)
        return E
    scaled = A / nu
    PT = np.empty((14, p, p))
    P = np.eye(p)
    for k in range(14):
        PT[k] = P
        P = P @ scaled
    _kernels.exp_batch(PT, float(nu), xs, E)
    return E


def decay_shift(T):
    """Nonnegative shift ``-max Re eig(T)`` used to keep ``exp`` representable.

    ``exp(T x) = exp(-shift x) exp((T + shift I) x)`` and the second factor
    does not decay exponentially, so log densities stay finite for huge ``x``.
    """
    eig = np.linalg.eigvals(np.asarray(T, dtype=float))
    return max(0.0, -float(np.max(eig.real)))
