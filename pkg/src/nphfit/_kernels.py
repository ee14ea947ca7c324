"""Compiled inner loops.

Everything here operates on plain float64 arrays; argument checking lives in
the calling modules.
"""

import math

import numpy as np
from numba import config, njit, prange

# the bundled TBB is often too old; prefer OpenMP, then the builtin pool
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# Pade coefficients b_k for degrees 3, 5, 7, 9, 13 (rows padded with zeros)
PADE = np.zeros((5, 14))
PADE[0, :4] = [120.0, 60.0, 12.0, 1.0]
PADE[1, :6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0]
PADE[2, :8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0]
PADE[3, :10] = [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
                2162160.0, 110880.0, 3960.0, 90.0, 1.0]
PADE[4, :] = [
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
]
# largest 1-norm for which each degree meets double-precision backward error
PADE_THETA = np.array([1.495585217958292e-2, 2.539398330063230e-1,
                       9.504178996162932e-1, 2.097847961257068, 5.371920351148152])
PADE_DEGREE = np.array([3, 5, 7, 9, 13])
THETA13 = 5.371920351148152
SCRATCH_CHUNK = 256  # pairs per scratch allocation in the batched kernels
# below this 1-norm a truncated Taylor series (no linear solve) is used
TAYLOR_MAX = 2.539398330063230e-1
UNIT_ROUNDOFF = 2.0 ** -53


@njit(cache=True)
def _pade_setup(nu, x, coef):
    """Fill ``coef[k] = b_k c^k``; return (degree, squarings)."""
    ax = nu * abs(x)
    row = 4
    for r in range(4):
        if ax <= PADE_THETA[r]:
            row = r
            break
    s = 0
    if row == 4 and ax > THETA13:
        s = int(math.ceil(math.log2(ax / THETA13)))
    c = nu * x / (2.0 ** s)
    m = PADE_DEGREE[row]
    ck = 1.0
    for k in range(m + 1):
        coef[k] = PADE[row, k] * ck
        ck *= c
    return m, s


@njit(cache=True)
def _taylor_setup(nu, x, coef):
    """Fill ``coef[k] = c^k / k!`` up to the degree whose remainder bound
    ``ax^(m+1) / (m+1)! * exp(ax)`` drops below the unit roundoff; return m."""
    c = nu * x
    ax = abs(c)
    coef[0] = 1.0
    term = 1.0
    bound = math.exp(ax)
    m = 0
    while m < 13:
        m += 1
        term *= c / m
        coef[m] = term
        if abs(term) * ax / (m + 1) * bound <= UNIT_ROUNDOFF:
            break
    return m


@njit(cache=True)
def _lu_factor(a, piv):
    # in-place partial-pivot LU of a small square matrix
    n = a.shape[0]
    for k in range(n):
        best = k
        big = abs(a[k, k])
        for r in range(k + 1, n):
            v = abs(a[r, k])
            if v > big:
                big = v
                best = r
        piv[k] = best
        if best != k:
            for c in range(n):
                tmp = a[k, c]
                a[k, c] = a[best, c]
                a[best, c] = tmp
        d = a[k, k]
        for r in range(k + 1, n):
            a[r, k] /= d
            f = a[r, k]
            if f != 0.0:
                for c in range(k + 1, n):
                    a[r, c] -= f * a[k, c]


@njit(cache=True)
def _lu_solve(lu, piv, b):
    # solves lu x = b in place, b is (n, m)
    n = lu.shape[0]
    m = b.shape[1]
    for k in range(n):
        if piv[k] != k:
            for c in range(m):
                tmp = b[k, c]
                b[k, c] = b[piv[k], c]
                b[piv[k], c] = tmp
    for k in range(n):
        for r in range(k + 1, n):
            f = lu[r, k]
            if f != 0.0:
                for c in range(m):
                    b[r, c] -= f * b[k, c]
    for k in range(n - 1, -1, -1):
        d = lu[k, k]
        for c in range(m):
            b[k, c] /= d
        for r in range(k):
            f = lu[r, k]
            if f != 0.0:
                for c in range(m):
                    b[r, c] -= f * b[k, c]


@njit(cache=True)
def _matmul_into(a, b, out):
    n = a.shape[0]
    m = b.shape[1]
    kk = a.shape[1]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc


@njit(cache=True)
def _block_exp_one(PT, PC, nu, x, coef, E, J, UT, UC, VT, VC, tmp, piv):
    p = E.shape[0]
    if nu * abs(x) <= TAYLOR_MAX:
        m = _taylor_setup(nu, x, coef)
        for i in range(p):
            for j in range(p):
                et = 0.0
                jc = 0.0
                for k in range(m + 1):
                    et += coef[k] * PT[k, i, j]
                    jc += coef[k] * PC[k, i, j]
                E[i, j] = et
                J[i, j] = jc
        return
    m, s = _pade_setup(nu, x, coef)
    for i in range(p):
        for j in range(p):
            ut = 0.0
            uc = 0.0
            vt = 0.0
            vc = 0.0
            for k in range(0, m + 1, 2):
                vt += coef[k] * PT[k, i, j]
                vc += coef[k] * PC[k, i, j]
                ut += coef[k + 1] * PT[k + 1, i, j]
                uc += coef[k + 1] * PC[k + 1, i, j]
            UT[i, j] = ut
            UC[i, j] = uc
            VT[i, j] = vt
            VC[i, j] = vc
    # (V - U) X = (V + U) with both sides block upper triangular
    for i in range(p):
        for j in range(p):
            E[i, j] = VT[i, j] + UT[i, j]
            tmp[i, j] = VC[i, j] - UC[i, j]
            VT[i, j] = VT[i, j] - UT[i, j]
    _lu_factor(VT, piv)
    _lu_solve(VT, piv, E)
    _matmul_into(tmp, E, UT)
    for i in range(p):
        for j in range(p):
            J[i, j] = VC[i, j] + UC[i, j] - UT[i, j]
    _lu_solve(VT, piv, J)
    for _ in range(s):
        _matmul_into(E, J, UT)
        _matmul_into(J, E, UC)
        _matmul_into(E, E, tmp)
        for i in range(p):
            for j in range(p):
                J[i, j] = UT[i, j] + UC[i, j]
                E[i, j] = tmp[i, j]


@njit(cache=True, parallel=True)
def block_exp_batch(PT, PC, nu, xs, E_out, J_out):
    """``exp(A x)`` for every ``x`` in ``xs``: Taylor for small arguments,
    Padé scaling and squaring otherwise.

    ``A`` is a 2p x 2p block upper triangular matrix ``[[T, C], [0, T]]``
    supplied through the powers of ``A / nu``: ``PT[k]`` holds the diagonal
    block of ``(A / nu)**k`` and ``PC[k]`` the corner block.
    """
    n = xs.shape[0]
    p = PT.shape[1]
    n_chunks = (n + SCRATCH_CHUNK - 1) // SCRATCH_CHUNK
    for ch in prange(n_chunks):
        coef = np.zeros(14)
        UT = np.empty((p, p))
        UC = np.empty((p, p))
        VT = np.empty((p, p))
        VC = np.empty((p, p))
        tmp = np.empty((p, p))
        piv = np.empty(p, dtype=np.int64)
        for idx in range(ch * SCRATCH_CHUNK, min(n, (ch + 1) * SCRATCH_CHUNK)):
            _block_exp_one(PT, PC, nu, xs[idx], coef, E_out[idx], J_out[idx],
                           UT, UC, VT, VC, tmp, piv)


@njit(cache=True)
def _exp_one(PT, nu, x, coef, E, U, V, piv):
    p = E.shape[0]
    if nu * abs(x) <= TAYLOR_MAX:
        m = _taylor_setup(nu, x, coef)
        for i in range(p):
            for j in range(p):
                e = 0.0
                for k in range(m + 1):
                    e += coef[k] * PT[k, i, j]
                E[i, j] = e
        return
    m, s = _pade_setup(nu, x, coef)
    for i in range(p):
        for j in range(p):
            u = 0.0
            v = 0.0
            for k in range(0, m + 1, 2):
                v += coef[k] * PT[k, i, j]
                u += coef[k + 1] * PT[k + 1, i, j]
            E[i, j] = v + u
            V[i, j] = v - u
    _lu_factor(V, piv)
    _lu_solve(V, piv, E)
    for _ in range(s):
        _matmul_into(E, E, U)
        for i in range(p):
            for j in range(p):
                E[i, j] = U[i, j]


@njit(cache=True, parallel=True)
def exp_batch(PT, nu, xs, E_out):
    """``exp(A x)`` for every ``x`` (Taylor or Padé); ``PT[k]`` holds ``(A / nu)**k``."""
    n = xs.shape[0]
    p = PT.shape[1]
    n_chunks = (n + SCRATCH_CHUNK - 1) // SCRATCH_CHUNK
    for ch in prange(n_chunks):
        coef = np.zeros(14)
        U = np.empty((p, p))
        V = np.empty((p, p))
        piv = np.empty(p, dtype=np.int64)
        for idx in range(ch * SCRATCH_CHUNK, min(n, (ch + 1) * SCRATCH_CHUNK)):
            _exp_one(PT, nu, xs[idx], coef, E_out[idx], U, V, piv)


@njit(cache=True)
def disc_weibull_objective(log_lam, log_p, c, levels, w):
    """sum_k w_k log pi_{levels_k} for the discretized Weibull family.

    Level ``i`` holds ``S(e^{i c}) - S(e^{(i+1) c})``, and level 1 also the
    mass below ``e^c``; ``S(x) = exp(-(lam x)^p)``.
    """
    p = math.exp(log_p)
    acc = 0.0
    for k in range(levels.shape[0]):
        i = levels[k]
        ls = -math.exp(p * (log_lam + i * c))
        lsn = -math.exp(p * (log_lam + (i + 1) * c))
        if i == 1:
            v = math.log(-math.expm1(lsn))
        elif ls == -np.inf:
            v = -np.inf
        else:
            v = ls + math.log(-math.expm1(lsn - ls))
        acc += w[k] * v
    return acc


@njit(cache=True, parallel=True)
def erlang_log_density(y, log_a, inv_s, lam, q):
    """log f(y_j) for a mixture of Erlang(q, lam / s_i) laws.

    ``log_a[i]`` is ``log pi_i - q log s_i``; the constant and ``y``-dependent
    Erlang factors are added here.
    """
    n = y.shape[0]
    I = log_a.shape[0]
    out = np.empty(n)
    const = q * math.log(lam) - math.lgamma(q)
    for j in prange(n):
        yl = lam * y[j]
        m = -np.inf
        for i in range(I):
            v = log_a[i] - yl * inv_s[i]
            if v > m:
                m = v
        if m == -np.inf:
            out[j] = -np.inf
            continue
        acc = 0.0
        for i in range(I):
            acc += math.exp(log_a[i] - yl * inv_s[i] - m)
        out[j] = m + math.log(acc) + const + (q - 1) * math.log(y[j])
    return out


@njit(cache=True, parallel=True)
def erlang_level_sums(y, w, log_a, inv_s, lam, q, log_f):
    """Posterior level counts and posterior-weighted data sums per level."""
    n = y.shape[0]
    I = log_a.shape[0]
    L = np.zeros(I)
    Z = np.zeros(I)
    const = q * math.log(lam) - math.lgamma(q)
    shift = np.empty(n)
    for j in range(n):
        shift[j] = const + (q - 1) * math.log(y[j]) - log_f[j]
    for i in prange(I):
        acc_l = 0.0
        acc_z = 0.0
        for j in range(n):
            r = w[j] * math.exp(log_a[i] - lam * y[j] * inv_s[i] + shift[j])
            acc_l += r
            acc_z += r * y[j]
        L[i] = acc_l
        Z[i] = acc_z
    return L, Z


@njit(cache=True, parallel=True)
def erlang_estep(y, w, log_a, inv_s, lam, q, n_chunks):
    """One pass over the data for the Erlang-mixture E-step.

    Returns ``log f(y_j)``, the posterior level counts ``L_i`` and the
    posterior-weighted data sums ``Z_i``.  Partial sums are kept per chunk
    and reduced in chunk order, so results do not depend on thread count.
    """
    n = y.shape[0]
    I = log_a.shape[0]
    const = q * math.log(lam) - math.lgamma(q)
    log_f = np.empty(n)
    Lp = np.zeros((n_chunks, I))
    Zp = np.zeros((n_chunks, I))
    size = (n + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        buf = np.empty(I)
        stop = min(n, (c + 1) * size)
        for j in range(c * size, stop):
            yl = lam * y[j]
            m = -np.inf
            for i in range(I):
                v = log_a[i] - yl * inv_s[i]
                buf[i] = v
                if v > m:
                    m = v
            if m == -np.inf:
                log_f[j] = -np.inf
                continue
            acc = 0.0
            for i in range(I):
                e = math.exp(buf[i] - m)
                buf[i] = e
                acc += e
            log_f[j] = m + math.log(acc) + const + (q - 1) * math.log(y[j])
            scale = w[j] / acc
            yj = y[j]
            for i in range(I):
                r = buf[i] * scale
                Lp[c, i] += r
                Zp[c, i] += r * yj
    L = np.zeros(I)
    Z = np.zeros(I)
    for c in range(n_chunks):
        for i in range(I):
            L[i] += Lp[c, i]
            Z[i] += Zp[c, i]
    return log_f, L, Z
