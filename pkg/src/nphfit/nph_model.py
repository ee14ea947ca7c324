"""Scale mixtures of a phase-type law over a discrete scaling distribution.

Level ``i`` of the mixture is PH(alpha, T / s_i) with weight pi_i.  The level
series is cut at the mass-based truncation index of the scaling family.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _kernels
from .errors import InvalidInputError
from .matrix_core import decay_shift, exp_many
from .phase_type import PhaseTypeRep
from .scaling import ScalingFamily

log = logging.getLogger(__name__)

PAIR_CHUNK = 50_000  # (observation, level) pairs per batched exponential call


@dataclass(frozen=True)
class LevelTable:
    """log pi_i and log s_i for the levels kept after truncation."""

    log_pi: np.ndarray
    log_s: np.ndarray
    capped: bool = False

    @property
    def size(self):
        return self.log_pi.size

    @property
    def inv_s(self):
        return np.exp(-self.log_s)


def erlang_form(rep):
    """``(q, lam)`` if ``rep`` is exactly the canonical Erlang representation."""
    q = rep.p
    if rep.alpha[0] != 1.0:
        return None
    lam = -rep.T[0, 0]
    expected = -lam * np.eye(q) + lam * np.eye(q, k=1)
    if np.array_equal(rep.T, expected):
        return q, float(lam)
    return None


def _chunks(n, per_row):
    step = max(1, PAIR_CHUNK // max(per_row, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


@dataclass(frozen=True, eq=False)
class NphModel:
    """An NPH distribution: scaling family (with theta) and PH representation.

    Parameters
    ----------
    scaling : ScalingFamily
    ph : PhaseTypeRep
    trunc_eps : float
        Level series is truncated once the remaining scaling mass is below
        this value.
    """

    scaling: ScalingFamily
    ph: PhaseTypeRep
    trunc_eps: float = 1e-12

    def __post_init__(self):
        if not isinstance(self.scaling, ScalingFamily):
            raise InvalidInputError("scaling must be a ScalingFamily")
        if not isinstance(self.ph, PhaseTypeRep):
            raise InvalidInputError("ph must be a PhaseTypeRep")
        if not 0.0 < self.trunc_eps < 1.0:
            raise InvalidInputError("trunc_eps must lie in (0, 1)")

    def __eq__(self, other):
        if not isinstance(other, NphModel):
            return NotImplemented
        return (self.scaling == other.scaling and self.ph == other.ph
                and self.trunc_eps == other.trunc_eps)

    __hash__ = None

    def with_params(self, scaling=None, ph=None):
        return NphModel(scaling or self.scaling, ph or self.ph, self.trunc_eps)

    # level bookkeeping ----------------------------------------------------
    @cached_property
    def _truncation(self):
        return self.scaling.truncation(self.trunc_eps)

    @property
    def n_levels(self):
        return self._truncation[0]

    @property
    def truncation_capped(self):
        return self._truncation[1]

    def levels(self, n_levels=None):
        """Level table up to ``n_levels`` (default: the truncation index)."""
        if n_levels is None:
            return self._default_levels
        return self._make_levels(int(n_levels))

    @cached_property
    def _default_levels(self):
        return self._make_levels(self.n_levels)

    def _make_levels(self, I):
        i = np.arange(1, I + 1)
        return LevelTable(self.scaling.log_pmf(i), self.scaling.log_support(i),
                          capped=self.truncation_capped and I <= self.n_levels)

    @cached_property
    def shift(self):
        return decay_shift(self.ph.T)

    @cached_property
    def erlang(self):
        return erlang_form(self.ph)

    # evaluation -----------------------------------------------------------
    def _log_ph_terms(self, x, vec):
        """log(alpha exp(T x) vec) for an array of arguments, any shape."""
        shape = x.shape
        flat = x.reshape(-1)
        out = np.empty(flat.size)
        for sl in _chunks(flat.size, 1):
            E = exp_many(self.ph.T, flat[sl], self.shift)
            vals = np.einsum("k,nkl,l->n", self.ph.alpha, E, vec)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[sl] = np.where(vals > 0, np.log(np.maximum(vals, 1e-320)), -np.inf)
        out -= self.shift * flat
        return out.reshape(shape)

    def log_density(self, y, n_levels=None):
        """Natural log of the density, vectorized over ``y``."""
        y_arr = np.asarray(y, dtype=float)
        flat = np.ascontiguousarray(y_arr.reshape(-1))
        if np.any(~(flat >= 0)):
            raise InvalidInputError("density needs y >= 0")
        table = self.levels(n_levels)
        if self.erlang is not None:
            out = self._erlang_log_density(flat, table)
        else:
            out = np.empty(flat.size)
            inv_s = table.inv_s
            for sl in _chunks(flat.size, table.size):
                X = flat[sl, None] * inv_s[None, :]
                terms = self._log_ph_terms(X, self.ph.exit) + (table.log_pi - table.log_s)[None, :]
                out[sl] = logsumexp(terms, axis=1)
        return out.reshape(y_arr.shape) if y_arr.ndim else float(out[0])

    def _erlang_log_density(self, flat, table):
        q, lam = self.erlang
        out = np.empty(flat.size)
        pos = flat > 0
        log_a = table.log_pi - q * table.log_s
        out[pos] = _kernels.erlang_log_density(flat[pos], log_a, table.inv_s, lam, q)
        if q == 1:
            out[~pos] = np.log(lam) + logsumexp(table.log_pi - table.log_s)
        else:
            out[~pos] = -np.inf
        return out

    def density(self, y, n_levels=None):
        return np.exp(self.log_density(y, n_levels))

    def _log_survival_terms(self, x):
        """log(alpha exp(T x) e) per level argument, any shape."""
        if self.erlang is not None:
            q, lam = self.erlang
            z = lam * x
            with np.errstate(divide="ignore"):
                lz = np.log(z)
            k = np.arange(q)
            parts = np.zeros(z.shape + (q,))
            if q > 1:
                # z = 0 leaves only the k = 0 term
                with np.errstate(invalid="ignore"):
                    parts[..., 1:] = np.where(z[..., None] > 0, k[1:] * lz[..., None], -np.inf)
            parts -= gammaln(k + 1)
            return logsumexp(parts, axis=-1) - z
        return self._log_ph_terms(x, np.ones(self.ph.p))

    def log_survival(self, y, n_levels=None):
        y_arr = np.asarray(y, dtype=float)
        flat = y_arr.reshape(-1)
        if np.any(~(flat >= 0)):
            raise InvalidInputError("survival needs y >= 0")
        table = self.levels(n_levels)
        out = np.empty(flat.size)
        for sl in _chunks(flat.size, table.size):
            X = flat[sl, None] * table.inv_s[None, :]
            out[sl] = logsumexp(self._log_survival_terms(X) + table.log_pi[None, :], axis=1)
        out = np.minimum(out, 0.0)
        return out.reshape(y_arr.shape) if y_arr.ndim else float(out[0])

    def survival(self, y, n_levels=None):
        return np.exp(self.log_survival(y, n_levels))

    def log_interval_prob(self, lower, upper, n_levels=None):
        """log P(lower < Y <= upper), level by level to avoid cancellation."""
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        table = self.levels(n_levels)
        out = np.empty(lower.size)
        for sl in _chunks(lower.size, 2 * table.size):
            a = self._log_survival_terms(lower[sl, None] * table.inv_s[None, :])
            fin = np.isfinite(upper[sl])
            Xu = np.where(fin, upper[sl], 0.0)[:, None] * table.inv_s[None, :]
            b = np.where(fin[:, None], self._log_survival_terms(Xu), -np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                diff = a + np.log(-np.expm1(np.minimum(b - a, 0.0)))
            diff = np.where(np.isneginf(b), a, diff)
            diff = np.where(np.isneginf(a), -np.inf, diff)
            out[sl] = logsumexp(diff + table.log_pi[None, :], axis=1)
        return out

    def log_likelihood(self, data, n_levels=None):
        """Weighted log-likelihood of exact and censored observations.

        Returns ``-inf`` (and logs the offending points) if any observation
        has zero model probability.
        """
        total = 0.0
        bad = []
        if data.n_exact:
            lf = self.log_density(data.y, n_levels)
            bad += [f"y={float(v)!r}" for v in data.y[~np.isfinite(lf)][:10]]
            total += float(np.dot(data.w, lf)) if not bad else 0.0
        if data.n_censored:
            lp = self.log_interval_prob(data.lower, data.upper, n_levels)
            miss = ~np.isfinite(lp)
            bad += [f"({float(a)!r}, {float(b)!r}]" for a, b in zip(data.lower[miss][:10], data.upper[miss][:10])]
            total += float(np.dot(data.cw, lp)) if not miss.any() else 0.0
        if bad:
            log.warning("zero model probability at: %s", ", ".join(bad))
            return -np.inf
        return total

    # simulation -----------------------------------------------------------
    def simulate(self, n, seed):
        """Draw ``n`` values: a level by inversion, then the PH absorption time."""
        n = int(n)
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        rng = np.random.default_rng(seed)
        tails = self.scaling.tail_masses(self.n_levels)
        v = 1.0 - rng.random(n)
        levels = self.scaling.level_from_tail(v, tails)
        tau = simulate_ph(self.ph, n, rng)
        return tau * np.exp(self.scaling.log_support(levels))


def simulate_ph(rep, n, rng):
    """Absorption times of ``n`` independent jump chains of PH(alpha, T)."""
    p = rep.p
    T = np.asarray(rep.T)
    rates = -np.diag(T)
    jump = T / rates[:, None]
    np.fill_diagonal(jump, 0.0)
    cum = np.cumsum(np.column_stack([jump, rep.exit / rates]), axis=1)
    cum[:, -1] = 1.0
    alpha_cum = np.cumsum(rep.alpha)
    alpha_cum[-1] = 1.0
    state = np.minimum(np.searchsorted(alpha_cum, rng.random(n), side="right"), p - 1)
    time = np.zeros(n)
    active = np.arange(n)
    while active.size:
        s = state[active]
        time[active] += rng.exponential(size=active.size) / rates[s]
        u = rng.random(active.size)
        nxt = (u[:, None] >= cum[s]).sum(axis=1)
        state[active] = np.minimum(nxt, p)
        active = active[nxt < p]
    return time


def model_quantile(model, u, tol=1e-10, max_iter=400):
    """Quantiles by bisection on the survival function, vectorized over ``u``.

    Solves ``survival(y) = 1 - u``; stops once the bracket is narrower than
    ``tol`` relative to its upper end.
    """
    u = np.asarray(u, dtype=float)
    flat = u.reshape(-1)
    if np.any(~((flat >= 0) & (flat < 1))):
        raise InvalidInputError("quantile levels must lie in [0, 1)")
    target = np.log1p(-flat)
    lo = np.zeros(flat.size)
    hi = np.ones(flat.size)
    for _ in range(2000):
        above = model.log_survival(hi) > target
        if not above.any():
            break
        lo[above] = hi[above]
        hi[above] *= 2.0
    for _ in range(max_iter):
        active = (hi - lo) > tol * np.maximum(hi, 1e-300)
        if not active.any():
            break
        mid = 0.5 * (lo[active] + hi[active])
        go_right = model.log_survival(mid) > target[active]
        idx = np.flatnonzero(active)
        lo[idx[go_right]] = mid[go_right]
        hi[idx[~go_right]] = mid[~go_right]
    out = 0.5 * (lo + hi)
    out[flat == 0] = 0.0
    return out.reshape(u.shape) if u.ndim else float(out[0])
