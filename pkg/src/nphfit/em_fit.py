"""EM fitting of NPH models to exact (weighted) observations.

The E-step evaluates, for every (observation, level) pair, one Van Loan
exponential of ``[[T, t alpha], [0, T]] * y / s_i``; its diagonal block gives
``exp(T y / s_i)`` and the corner block the occupation/transition integral.
All exponentials are taken with a spectral shift, ``exp(T x) =
exp(-shift x) exp((T + shift I) x)``, so that posterior weights stay
representable for observations far in the tail.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .errors import (DegenerateWeightsError, FitFailureError, InvalidInputError,
                     NumericError, NumericOverflowError, StateStarvationError,
                     ValidationError)
from .matrix_core import block_exp_many
from .nph_model import NphModel, _chunks
from .observations import Dataset, WeightedObservation  # noqa: F401  (re-export)
from .phase_type import erlang, random_init, validate

log = logging.getLogger(__name__)

ERLANG_CHUNKS = 16
RECOVERABLE = (StateStarvationError, NumericError, NumericOverflowError,
               DegenerateWeightsError, ValidationError)


@dataclass(frozen=True)
class EmConfig:
    """Settings shared by every EM driver.

    Attributes
    ----------
    rel_tol : float
        Stop once ``|l_n - l_{n-1}| / |l_n|`` falls below this.
    max_iters : int
    restarts : int
        Independent runs from randomized starting points; the best is kept.
    seed : int
        Root seed; each restart gets its own spawned stream.
    trunc_eps : float
        Scaling-mass truncation of the level series.
    fix_theta : tuple or None
        Hold the scaling parameter at this value.
    jitter : float
        Spread of the starting scaling parameter across restarts.
    """

    rel_tol: float = 1e-8
    max_iters: int = 5000
    restarts: int = 10
    seed: int = 0
    trunc_eps: float = 1e-12
    fix_theta: tuple | None = None
    jitter: float = 0.25

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise InvalidInputError("rel_tol must be > 0")
        if int(self.max_iters) < 1 or int(self.restarts) < 1:
            raise InvalidInputError("max_iters and restarts must be >= 1")
        if not 0 < self.trunc_eps < 1:
            raise InvalidInputError("trunc_eps must lie in (0, 1)")
        if self.fix_theta is not None:
            object.__setattr__(self, "fix_theta", tuple(np.atleast_1d(self.fix_theta).astype(float)))


@dataclass
class SufficientStats:
    """Conditional expectations of the complete-data statistics.

    ``L`` has one entry per level, ``B`` one row per level.  ``Z_scaled`` is
    the occupation time summed over levels with level ``i`` divided by
    ``s_i``; ``Z`` is the unscaled total.
    """

    L: np.ndarray
    B: np.ndarray
    Z_scaled: np.ndarray
    Z: np.ndarray
    N_trans: np.ndarray
    N_exit: np.ndarray
    M: float
    loglik: float = 0.0

    @property
    def L_logweights(self):
        return self.L

    @classmethod
    def zeros(cls, n_levels, p):
        return cls(np.zeros(n_levels), np.zeros((n_levels, p)), np.zeros(p), np.zeros(p),
                   np.zeros((p, p)), np.zeros(p), 0.0, 0.0)

    def __add__(self, other):
        n = max(self.L.size, other.L.size)
        pad = lambda a: np.pad(a, [(0, n - a.shape[0])] + [(0, 0)] * (a.ndim - 1))
        return SufficientStats(pad(self.L) + pad(other.L), pad(self.B) + pad(other.B),
                               self.Z_scaled + other.Z_scaled, self.Z + other.Z,
                               self.N_trans + other.N_trans, self.N_exit + other.N_exit,
                               self.M + other.M, self.loglik + other.loglik)


@dataclass
class FitResult:
    """Outcome of an EM fit.

    ``loglik_trace[k]`` is the log-likelihood of the parameters in force at
    iteration ``k``; the last entry belongs to ``model``.
    """

    model: NphModel
    loglik_trace: list
    iterations: int
    converged: bool
    theta_trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def loglik(self):
        return self.loglik_trace[-1]


# ---------------------------------------------------------------------------
# E-step

def _as_dataset(data):
    if isinstance(data, Dataset):
        return data
    return Dataset.from_observations(list(data))


def e_step(model, data, n_levels=None):
    """Conditional expectations of the sufficient statistics given exact data.

    Parameters
    ----------
    model : NphModel
    data : Dataset or iterable of WeightedObservation
        Only the exact part is used.
    n_levels : int, optional
        Number of levels to sum over (default: the model's truncation index).

    Returns
    -------
    SufficientStats
        ``loglik`` holds the weighted log-likelihood of the exact data.

    Raises
    ------
    NumericError
        An observation has zero density even after rescaling.

    Notes
    -----
    Repeated values are merged into weights first, so a value listed ``k``
    times and the same value with weight ``k`` give identical statistics.
    """
    data = _as_dataset(data).exact_part().collapse_duplicates()
    ph = model.ph
    p = ph.p
    table = model.levels(n_levels)
    I = table.size
    stats = SufficientStats.zeros(I, p)
    if data.n_exact == 0:
        return stats
    if p == 1:
        return _exponential_e_step(model, data, table)
    alpha, t, T = ph.alpha, ph.exit, ph.T
    shift = model.shift
    inv_s = table.inv_s
    s = np.exp(table.log_s)
    base = table.log_pi - table.log_s
    J_sum = np.zeros((p, p))
    aE_sum = np.zeros(p)
    Jdiag_unscaled = np.zeros(p)
    loglik = 0.0
    for sl in _chunks(data.n_exact, I):
        y, w = data.y[sl], data.w[sl]
        X = y[:, None] * inv_s[None, :]
        E, J = block_exp_many(T, t, alpha, X.reshape(-1), shift)
        Et = E @ t
        a = Et @ alpha
        with np.errstate(divide="ignore"):
            log_a = np.log(np.maximum(a, 0.0)).reshape(X.shape)
        log_c = base[None, :] - shift * X
        log_f = logsumexp(log_c + log_a, axis=1)
        bad = ~np.isfinite(log_f)
        if bad.any():
            raise NumericError(f"zero density at observation y={y[bad][0]!r}")
        loglik += float(np.dot(w, log_f))
        c = (w[:, None] * np.exp(log_c - log_f[:, None])).reshape(-1)
        post = c * a
        stats.L += post.reshape(X.shape).sum(axis=0)
        stats.B += (c[:, None] * Et).reshape(X.shape + (p,)).sum(axis=0) * alpha[None, :]
        J_sum += np.einsum("n,nkl->kl", c, J)
        aE_sum += np.einsum("n,k,nkl->l", c, alpha, E)
        Jd = np.einsum("nkk->nk", J)
        with np.errstate(invalid="ignore", over="ignore"):
            cs = np.where(c > 0, c * np.tile(s, y.size), 0.0)
        Jdiag_unscaled += np.einsum("n,nk->k", cs, Jd)
    stats.Z_scaled = np.diag(J_sum).copy()
    stats.Z = Jdiag_unscaled
    stats.N_trans = T * J_sum.T
    np.fill_diagonal(stats.N_trans, 0.0)
    stats.N_exit = t * aE_sum
    stats.M = float(data.w.sum())
    stats.loglik = loglik
    return stats


def _exponential_e_step(model, data, table):
    """Exact statistics for p = 1 from posterior level weights alone.

    With one phase every path is fully described by its level and its
    absorption time, so ``Z`` at level ``i`` is the posterior-weighted data
    sum and each observation contributes one start and one exit.
    """
    lam = -float(model.ph.T[0, 0])
    log_a = table.log_pi - table.log_s
    log_f, L, Zy = _kernels.erlang_estep(data.y, data.w, log_a, table.inv_s, lam, 1,
                                         ERLANG_CHUNKS)
    bad = ~np.isfinite(log_f)
    if bad.any():
        raise NumericError(f"zero density at observation y={data.y[bad][0]!r}")
    M = float(data.w.sum())
    return SufficientStats(L=L, B=L[:, None].copy(), Z_scaled=np.array([float(np.dot(Zy, table.inv_s))]),
                           Z=np.array([float(Zy.sum())]), N_trans=np.zeros((1, 1)),
                           N_exit=np.array([M]), M=M, loglik=float(np.dot(data.w, log_f)))


# ---------------------------------------------------------------------------
# M-step

def m_step(stats, fam, p=None):
    """Closed-form phase-type update plus the scaling family's own update.

    Returns
    -------
    (ScalingFamily, PhaseTypeRep)

    Raises
    ------
    StateStarvationError
        A state has zero expected occupation time.
    """
    p = stats.Z_scaled.size if p is None else p
    if stats.Z_scaled.size != p:
        raise InvalidInputError("statistics do not match the requested order")
    if not stats.M > 0:
        raise DegenerateWeightsError("total data weight is zero")
    starving = np.flatnonzero(~(stats.Z_scaled > 0))
    if starving.size:
        raise StateStarvationError(
            f"state(s) {starving.tolist()} are never visited; use fewer phases or another restart")
    B_tot = stats.B.sum(axis=0)
    alpha = np.maximum(B_tot, 0.0) / max(B_tot.sum(), np.finfo(float).tiny)
    T = np.maximum(stats.N_trans, 0.0) / stats.Z_scaled[:, None]
    np.fill_diagonal(T, 0.0)
    exit_rate = np.maximum(stats.N_exit, 0.0) / stats.Z_scaled
    np.fill_diagonal(T, -(T.sum(axis=1) + exit_rate))
    new_theta = fam.m_step(stats.L)
    return fam.with_theta(new_theta), validate(alpha, T)


# ---------------------------------------------------------------------------
# driver

def weighted_median(values, weights):
    order = np.argsort(values)
    cw = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cw, 0.5 * cw[-1])])


def _representatives(data):
    vals = [data.y]
    wts = [data.w]
    if data.n_censored:
        lo, hi = data.lower, data.upper
        rep = np.where(np.isfinite(hi), 0.5 * (lo + np.where(np.isfinite(hi), hi, 0.0)), lo)
        rep = np.where(rep > 0, rep, np.where(np.isfinite(hi), hi, 1.0))
        vals.append(rep)
        wts.append(data.cw)
    return np.concatenate(vals), np.concatenate(wts)


def _median_level_scale(fam):
    level = int(fam.level_from_tail(np.array([0.5]))[0])
    return float(fam.support(level))


def _start_family(fam, config, rng, restart):
    if config.fix_theta is not None:
        return replace(fam.with_theta(config.fix_theta), theta_fixed=True)
    if fam.theta_fixed or restart == 0:
        return fam
    for _ in range(20):
        try:
            return fam.jittered(rng, config.jitter)
        except Exception:  # jitter left the parameter domain; redraw
            continue
    return fam


def run_em(model, estep, mstep, config, n_levels=None):
    """Iterate ``estep`` / ``mstep`` from ``model`` until convergence.

    ``estep(model, n_levels)`` returns statistics carrying ``loglik`` and
    ``mstep(stats, model)`` returns the next model.  The level count is
    ratcheted upward so the objective never loses terms between iterations.

    Returns
    -------
    FitResult
    """
    trace, thetas = [], []
    capped = False
    converged = False
    it = 0
    levels = max(n_levels or 0, model.n_levels)
    while True:
        levels = max(levels, model.n_levels)
        capped = capped or model.truncation_capped
        stats = estep(model, levels)
        ll = stats.loglik
        if not math.isfinite(ll):
            raise NumericError("log-likelihood is not finite")
        trace.append(ll)
        thetas.append(model.scaling.theta)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.rel_tol * max(abs(ll), 1e-300):
            converged = True
            break
        if it >= config.max_iters:
            break
        model = mstep(stats, model)
        it += 1
    return FitResult(model, trace, it, converged, thetas,
                     {"truncation_capped": capped, "n_levels": levels})


def _restarts(data, fam, config, make_model, estep, mstep):
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    vals, wts = _representatives(data)
    if vals.size == 0:
        raise InvalidInputError("dataset is empty")
    data_median = weighted_median(vals, wts)
    best, runs, failures = None, [], []
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        try:
            fam0 = _start_family(fam, config, rng, r)
            scale = data_median / _median_level_scale(fam0)
            model = make_model(fam0, scale, rng)
            res = run_em(model, estep, mstep, config)
        except RECOVERABLE as exc:
            failures.append({"restart": r, "error": f"{type(exc).__name__}: {exc}"})
            log.info("restart %d failed: %s", r, exc)
            continue
        runs.append({"restart": r, "loglik": res.loglik, "iterations": res.iterations,
                     "converged": res.converged})
        if best is None or res.loglik > best[1].loglik:
            best = (r, res)
    if best is None:
        raise FitFailureError("every restart failed", diagnostics=failures)
    r, res = best
    res.diagnostics.update(best_restart=r, restarts=runs, failures=failures)
    if res.diagnostics["truncation_capped"]:
        log.warning("level truncation hit the cap of %d levels", fam.i_max)
    return res


def _general_steps(p):
    def mstep(stats, model):
        fam, ph = m_step(stats, model.scaling, p)
        return model.with_params(fam, ph)
    return mstep


def fit(data, fam, p, config=EmConfig()):
    """Fit an NPH model with ``p`` phases to exact observations by EM.

    Parameters
    ----------
    data : Dataset
        Must contain at least one exact observation; censored entries are
        not allowed here (see ``censoring.fit_censored``).
    fam : ScalingFamily
        Family and starting parameter; ``theta_fixed`` is honoured.
    p : int
    config : EmConfig

    Returns
    -------
    FitResult
        The restart with the highest final log-likelihood.
    """
    data = _as_dataset(data)
    if data.n_exact == 0:
        raise InvalidInputError("fit needs at least one exact observation")
    if data.n_censored:
        raise InvalidInputError("dataset has censored observations; use fit_censored")
    p = int(p)
    data = data.collapse_duplicates()

    def make_model(fam0, scale, rng):
        seed = int(rng.integers(2 ** 63))
        return NphModel(fam0, random_init(p, seed, scale), config.trunc_eps)

    estep = lambda model, levels: e_step(model, data, levels)
    return _restarts(data, fam, config, make_model, estep, _general_steps(p))


# ---------------------------------------------------------------------------
# Erlang-mixture fast path

@dataclass
class ErlangStats:
    L: np.ndarray
    Zy: np.ndarray
    M: float
    loglik: float


def erlang_e_step(model, data, n_levels=None):
    """Posterior level counts and posterior-weighted data sums per level."""
    data = data.exact_part().collapse_duplicates()
    q, lam = model.erlang
    table = model.levels(n_levels)
    log_a = table.log_pi - q * table.log_s
    log_f, L, Zy = _kernels.erlang_estep(data.y, data.w, log_a, table.inv_s, lam, q, ERLANG_CHUNKS)
    bad = ~np.isfinite(log_f)
    if bad.any():
        raise NumericError(f"zero density at observation y={data.y[bad][0]!r}")
    return ErlangStats(L, Zy, float(data.w.sum()), float(np.dot(data.w, log_f)))


def fit_erlang_mixture(data, fam, q, config=EmConfig()):
    """EM for a scale mixture of Erlang(q, lam) laws without matrix exponentials.

    The rate update is ``lam = q M / sum_i Z_i / s_i`` with ``Z_i`` the
    posterior-weighted data sum at level ``i``.
    """
    data = _as_dataset(data)
    if data.n_exact == 0 or data.n_censored:
        raise InvalidInputError("the Erlang fast path needs exact observations only")
    q = int(q)
    data = data.collapse_duplicates()

    def make_model(fam0, scale, rng):
        # mean of Erlang(q, lam) is q / lam; start at the data scale
        lam = q / scale * math.exp(0.25 * rng.standard_normal())
        return NphModel(fam0, erlang(q, lam), config.trunc_eps)

    def mstep(stats, model):
        I = stats.L.size
        inv_s = model.levels(I).inv_s
        denom = float(np.dot(stats.Zy, inv_s))
        if not denom > 0:
            raise StateStarvationError("posterior occupation is zero")
        lam = q * stats.M / denom
        fam = model.scaling.with_theta(model.scaling.m_step(stats.L))
        return model.with_params(fam, erlang(q, lam))

    estep = lambda model, levels: erlang_e_step(model, data, levels)
    return _restarts(data, fam, config, make_model, estep, mstep)
