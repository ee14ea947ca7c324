"""EM statistics for left-, right- and interval-censored observations.

For an observation known only to lie in ``(s, t]`` and a level with
unit-scale arguments ``a = s / s_i``, ``b = t / s_i``, the conditional
expectations reduce to three ingredients:

* ``D = exp(T a) - exp(T b)`` (``exp(T b) = 0`` when ``t = inf``),
* ``G = alpha (-T)^{-1} D``, the expected time spent in each state while the
  absorption time crosses the interval,
* ``DJ = J(b) - J(a)`` with ``J`` the Van Loan corner block for the column
  of ones and ``alpha``.

Occupation times then use ``G_k - DJ_kk``, transitions ``t_kl (G_k - DJ_lk)``
and exits ``t_k G_k``; every level term is divided by ``P(s < Y <= t)``.
"""

import numpy as np
from scipy.special import logsumexp

from .em_fit import (EmConfig, SufficientStats, _as_dataset, _general_steps, _restarts,
                     e_step)
from .errors import InvalidInputError, ZeroProbabilityIntervalError
from .matrix_core import block_exp_many
from .nph_model import NphModel, _chunks
from .observations import CensoredObservation, Dataset  # noqa: F401  (re-export)
from .phase_type import random_init

PROB_FLOOR = 1e-300


def e_step_censored(model, data, n_levels=None):
    """Conditional expectations of the sufficient statistics for censored data.

    Parameters
    ----------
    model : NphModel
    data : Dataset or iterable of CensoredObservation
        Only the censored part is used.
    n_levels : int, optional

    Returns
    -------
    SufficientStats
        ``loglik`` is the weighted sum of log interval probabilities.

    Raises
    ------
    ZeroProbabilityIntervalError
        An interval has model probability below 1e-300.
    """
    data = _as_dataset(data).censored_part().collapse_duplicates()
    ph = model.ph
    p = ph.p
    table = model.levels(n_levels)
    I = table.size
    stats = SufficientStats.zeros(I, p)
    if data.n_censored == 0:
        return stats
    alpha, t, T = ph.alpha, ph.exit, ph.T
    ones = np.ones(p)
    shift = model.shift
    inv_s = table.inv_s
    s_lev = np.exp(table.log_s)
    a0 = np.linalg.solve(-T.T, alpha)  # alpha (-T)^{-1}
    g_sum = np.zeros(p)
    g_sum_u = np.zeros(p)
    dj_sum = np.zeros((p, p))
    dj_diag_u = np.zeros(p)
    loglik = 0.0
    for sl in _chunks(data.n_censored, 2 * I):
        lo, hi, w = data.lower[sl], data.upper[sl], data.cw[sl]
        finite = np.isfinite(hi)
        Xs = lo[:, None] * inv_s[None, :]
        Xt = np.where(finite, hi, 0.0)[:, None] * inv_s[None, :]
        shape = Xs.shape
        Es, Js = block_exp_many(T, ones, alpha, Xs.reshape(-1), shift)
        Et, Jt = block_exp_many(T, ones, alpha, Xt.reshape(-1), shift)
        # everything is expressed relative to the common factor exp(-shift a)
        r = np.where(finite[:, None], np.exp(-shift * (Xt - Xs)), 0.0).reshape(-1)
        D = Es - r[:, None, None] * Et
        DJ = r[:, None, None] * Jt - Js
        u = D @ ones
        lraw = u @ alpha
        with np.errstate(divide="ignore"):
            log_l = np.log(np.maximum(lraw, 0.0)).reshape(shape)
        log_base = table.log_pi[None, :] - shift * Xs
        log_p = logsumexp(log_base + log_l, axis=1)
        bad = ~(log_p > np.log(PROB_FLOOR))
        if bad.any():
            k = np.flatnonzero(bad)[0]
            raise ZeroProbabilityIntervalError(
                f"interval ({lo[k]!r}, {hi[k]!r}] has probability below {PROB_FLOOR:g}")
        loglik += float(np.dot(w, log_p))
        c = (w[:, None] * np.exp(log_base - log_p[:, None])).reshape(-1)
        G = D.transpose(0, 2, 1) @ a0
        with np.errstate(invalid="ignore", over="ignore"):
            cs = np.where(c > 0, c * np.tile(s_lev, lo.size), 0.0)
        stats.L += (c * lraw).reshape(shape).sum(axis=0)
        stats.B += (c[:, None] * u).reshape(shape + (p,)).sum(axis=0) * alpha[None, :]
        g_sum += c @ G
        g_sum_u += cs @ G
        dj_sum += np.einsum("n,nkl->kl", c, DJ)
        dj_diag_u += cs @ np.einsum("nkk->nk", DJ)
    stats.Z_scaled = g_sum - np.diag(dj_sum)
    stats.Z = g_sum_u - dj_diag_u
    stats.N_trans = T * (g_sum[:, None] - dj_sum.T)
    np.fill_diagonal(stats.N_trans, 0.0)
    stats.N_exit = t * g_sum
    stats.M = float(data.cw.sum())
    stats.loglik = loglik
    return stats


def fit_censored(data, fam, p, config=EmConfig()):
    """EM fit to a dataset mixing exact and censored observations.

    Statistics from the exact and censored parts are summed each iteration;
    with no censored observations this reproduces ``em_fit.fit`` exactly.
    """
    data = _as_dataset(data)
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    p = int(p)
    data = data.collapse_duplicates()
    exact, cens = data.exact_part(), data.censored_part()

    def make_model(fam0, scale, rng):
        seed = int(rng.integers(2 ** 63))
        return NphModel(fam0, random_init(p, seed, scale), config.trunc_eps)

    def estep(model, levels):
        stats = e_step(model, exact, levels)
        if cens.n_censored:
            stats = stats + e_step_censored(model, cens, levels)
        return stats

    return _restarts(data, fam, config, make_model, estep, _general_steps(p))
