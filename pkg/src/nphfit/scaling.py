"""Discrete scaling distributions pi(theta) on supports {s_i}, i = 1, 2, ...

Each family exposes its support, log-pmf, exact tail mass beyond a level, a
mass-based truncation index and the M-step maximizer of

    theta -> sum_i w_i log pi_i(theta).

Levels are 1-based throughout.
"""

import math
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_ndtr, ndtr

from . import _kernels
from .errors import DegenerateWeightsError, InvalidInputError, ParameterDomainError

I_MAX_DEFAULT = 10_000
WEIGHT_FLOOR = 1e-300

# Zeta sums: direct terms below _EM_START, Euler-Maclaurin remainder above.
_EM_START = 1000
_LOGN = np.log(np.arange(1, _EM_START, dtype=float))
ZETA_BRACKET = (1.0 + 1e-6, 50.0)


def _power_log_sum(theta, start, d):
    """sum_{n >= start} (log n)^d n^(-theta) for d in {0, 1, 2}."""
    start = int(start)
    total = 0.0
    if start < _EM_START:
        logs = _LOGN[start - 1:]
        terms = np.exp(-theta * logs)
        if d:
            terms = terms * logs ** d
        total = float(terms.sum())
        start = _EM_START
    a = theta - 1.0
    L = math.log(start)
    Na = math.exp(-a * L)
    if d == 0:
        integral = Na / a
    elif d == 1:
        integral = Na * (L / a + 1.0 / a ** 2)
    else:
        integral = Na * (L * L / a + 2.0 * L / a ** 2 + 2.0 / a ** 3)
    f = L ** d * math.exp(-theta * L)
    fprime = math.exp(-(theta + 1.0) * L) * ((d * L ** (d - 1) if d else 0.0) - theta * L ** d)
    return total + integral + 0.5 * f - fprime / 12.0


def zeta(theta):
    """Riemann zeta for real theta > 1."""
    return _power_log_sum(theta, 1, 0)


def zeta_log_derivative(theta):
    """zeta'(theta) / zeta(theta) and its derivative in theta."""
    s0 = _power_log_sum(theta, 1, 0)
    s1 = _power_log_sum(theta, 1, 1)
    s2 = _power_log_sum(theta, 1, 2)
    r = -s1 / s0
    return r, (s2 * s0 - s1 * s1) / (s0 * s0)


def _line_max(f, x0, f0, direction, h0, tol=1e-10):
    """Bracket, then maximize ``t -> f(x0 + t d)`` by bounded Brent search.

    Returns the start point unchanged unless the search strictly improves.
    """
    g = lambda t: f(x0 + t * direction)
    h = h0
    fp = g(h)
    if fp > f0:
        lo, mid, fmid = 0.0, h, fp
        while True:
            h *= 2.0
            fnext = g(mid + h)
            if not fnext > fmid or h > 1e3:
                hi = mid + h
                break
            lo, mid, fmid = mid, mid + h, fnext
    else:
        fm = g(-h)
        if fm > f0:
            hi, mid, fmid = 0.0, -h, fm
            while True:
                h *= 2.0
                fnext = g(mid - h)
                if not fnext > fmid or h > 1e3:
                    lo = mid - h
                    break
                hi, mid, fmid = mid, mid - h, fnext
        else:
            lo, hi = -h, h
    res = minimize_scalar(lambda t: -g(t), bounds=(lo, hi), method="bounded",
                          options={"xatol": tol})
    t, ft = res.x, -res.fun
    if not ft > f0:
        return x0, f0
    return x0 + t * direction, ft


@dataclass(frozen=True)
class ScalingFamily:
    """Base class; subclasses fix the support geometry and the pmf."""

    theta: tuple
    theta_fixed: bool = False
    i_max: int = I_MAX_DEFAULT

    kind: ClassVar[str] = ""
    n_params: ClassVar[int] = 1

    def __post_init__(self):
        theta = tuple(float(v) for v in np.atleast_1d(self.theta))
        if len(theta) != self.n_params:
            raise ParameterDomainError(
                f"{self.kind} expects {self.n_params} parameter(s), got {len(theta)}")
        object.__setattr__(self, "theta", theta)
        if int(self.i_max) < 1:
            raise InvalidInputError("i_max must be >= 1")
        self._check_theta(theta)

    # subclass hooks -------------------------------------------------------
    def _check_theta(self, theta):
        raise NotImplementedError

    def log_support(self, i):
        raise NotImplementedError

    def log_pmf(self, i, theta=None):
        """log pi_i under ``theta`` (default: the family's own)."""
        raise NotImplementedError

    def tail_mass(self, n):
        """Probability mass strictly beyond level ``n`` (n >= 0)."""
        raise NotImplementedError

    def m_step(self, w):
        raise NotImplementedError

    @classmethod
    def default_theta(cls):
        raise NotImplementedError

    def spec(self):
        raise NotImplementedError

    # shared behaviour -----------------------------------------------------
    def with_theta(self, theta):
        return replace(self, theta=tuple(np.atleast_1d(theta)))

    def support(self, i):
        i = np.asarray(i)
        if np.any(i < 1):
            raise InvalidInputError("levels are 1-based")
        out = np.exp(self.log_support(i))
        return out if out.ndim else float(out)

    def pmf(self, i):
        i = np.asarray(i)
        if np.any(i < 1):
            raise InvalidInputError("levels are 1-based")
        out = np.exp(self.log_pmf(i))
        return out if out.ndim else float(out)

    def tail_masses(self, I):
        """Array of ``tail_mass(n)`` for n = 0..I."""
        return np.array([self.tail_mass(n) for n in range(I + 1)])

    def truncation(self, eps):
        """Smallest I with mass(levels <= I) >= 1 - eps, capped at ``i_max``.

        Returns ``(I, capped)``.
        """
        if not 0.0 < eps < 1.0:
            raise InvalidInputError("eps must lie in (0, 1)")
        if self.tail_mass(1) <= eps:
            return 1, False
        if self.tail_mass(self.i_max) > eps:
            return int(self.i_max), True
        lo, hi = 1, int(self.i_max)  # tail(lo) > eps >= tail(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.tail_mass(mid) <= eps:
                hi = mid
            else:
                lo = mid
        return hi, False

    def truncation_index(self, eps):
        return self.truncation(eps)[0]

    def objective(self, w, theta=None):
        """sum_i w_i log pi_i(theta) over the levels covered by ``w``."""
        w = np.asarray(w, dtype=float)
        levels = np.flatnonzero(w >= WEIGHT_FLOOR) + 1
        if levels.size == 0:
            return 0.0
        return float(np.dot(w[levels - 1], self.log_pmf(levels, theta)))

    def level_from_tail(self, v, table=None):
        """Smallest level i with tail_mass(i) <= v, for v in (0, 1]."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if table is None:
            table = self.tail_masses(min(self.i_max, 64))
        I = table.size - 1
        # table is nonincreasing; first index where table <= v
        out = np.searchsorted(-table, -v, side="left").astype(np.int64)
        out = np.maximum(out, 1)
        for k in np.flatnonzero(out > I):
            out[k] = self._bisect_level(v[k], I)
        return out

    def _bisect_level(self, v, lo):
        hi = max(2 * lo, 2)
        while self.tail_mass(hi) > v:
            lo = hi
            hi *= 2
            if hi > 2 ** 62:
                return hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.tail_mass(mid) <= v:
                hi = mid
            else:
                lo = mid
        return hi

    def to_free(self, theta=None):
        """Unconstrained coordinates of ``theta`` (used for restart jitter)."""
        return np.log(np.asarray(self.theta if theta is None else theta, dtype=float))

    def from_free(self, u):
        return tuple(float(v) for v in np.exp(u))

    def jittered(self, rng, scale=0.25):
        """Copy with theta perturbed by Gaussian noise in free coordinates."""
        u = self.to_free() + scale * rng.standard_normal(self.n_params)
        return self.with_theta(self.from_free(u))

    def _clean_weights(self, w):
        w = np.array(w, dtype=float).reshape(-1)
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("level weights must be finite, nonnegative and nonempty")
        w[w < WEIGHT_FLOOR] = 0.0
        if w.sum() <= 0:
            raise DegenerateWeightsError("level weights sum to zero")
        return w


@dataclass(frozen=True)
class GeometricPareto(ScalingFamily):
    """Pareto(theta) discretized on s_i = exp((i-1) c): a geometric law."""

    c: float = 1.0
    kind: ClassVar[str] = "geom-pareto"

    def _check_theta(self, theta):
        if not self.c > 0:
            raise ParameterDomainError("geom-pareto needs c > 0")
        if not theta[0] > 0:
            raise ParameterDomainError(f"geom-pareto needs theta > 0, got {theta[0]}")

    @classmethod
    def default_theta(cls):
        return (1.5,)

    def spec(self):
        return f"geom-pareto:c={self.c!r}"

    def log_support(self, i):
        return (np.asarray(i, dtype=float) - 1.0) * self.c

    def log_pmf(self, i, theta=None):
        rate = (self.theta if theta is None else theta)[0] * self.c
        return -(np.asarray(i, dtype=float) - 1.0) * rate + math.log(-math.expm1(-rate))

    def tail_mass(self, n):
        return math.exp(-self.theta[0] * self.c * n)

    def tail_masses(self, I):
        return np.exp(-self.theta[0] * self.c * np.arange(I + 1))

    def m_step(self, w):
        if self.theta_fixed:
            return self.theta
        w = self._clean_weights(w)
        i = np.arange(1, w.size + 1)
        ratio = w.sum() / float(np.dot(i, w))
        if ratio >= 1.0:
            raise DegenerateWeightsError(
                "all level weight sits on level 1; the data look lighter-tailed "
                "than this family allows, try a lighter-tail scaling family")
        return (-math.log1p(-ratio) / self.c,)


@dataclass(frozen=True)
class Zeta(ScalingFamily):
    """Riemann-zeta (discrete Pareto) law on s_i = i."""

    kind: ClassVar[str] = "zeta"

    def _check_theta(self, theta):
        if not theta[0] > 1:
            raise ParameterDomainError(f"zeta needs theta > 1, got {theta[0]}")

    @classmethod
    def default_theta(cls):
        return (3.0,)

    def spec(self):
        return "zeta"

    def to_free(self, theta=None):
        th = self.theta if theta is None else theta
        return np.log(np.asarray(th, dtype=float) - 1.0)

    def from_free(self, u):
        return (float(min(1.0 + math.exp(u[0]), ZETA_BRACKET[1])),)

    def log_support(self, i):
        return np.log(np.asarray(i, dtype=float))

    def log_pmf(self, i, theta=None):
        th = (self.theta if theta is None else theta)[0]
        return -th * np.log(np.asarray(i, dtype=float)) - math.log(zeta(th))

    def tail_mass(self, n):
        th = self.theta[0]
        return _power_log_sum(th, n + 1, 0) / zeta(th)

    def tail_masses(self, I):
        th = self.theta[0]
        z = zeta(th)
        terms = np.exp(-th * np.log(np.arange(1, I + 1, dtype=float)))
        beyond = _power_log_sum(th, I + 1, 0)
        # tails[n] = sum_{i > n}, accumulated from the far end
        rev = np.cumsum(terms[::-1])[::-1]
        return np.append(rev + beyond, beyond) / z

    def m_step(self, w):
        if self.theta_fixed:
            return self.theta
        w = self._clean_weights(w)
        target = float(np.dot(w, np.log(np.arange(1, w.size + 1)))) / w.sum()
        return (solve_zeta_mle(target, self.theta[0]),)


def solve_zeta_mle(mean_log, start=2.0, tol=1e-10):
    """Root of zeta'(t)/zeta(t) = -mean_log by safeguarded Newton.

    Newton steps leaving the current bracket fall back to bisection; the
    result is clamped to ``ZETA_BRACKET``.
    """
    lo, hi = ZETA_BRACKET
    g = lambda t: zeta_log_derivative(t)[0] + mean_log
    if g(lo) >= 0:
        return lo
    if g(hi) <= 0:
        return hi
    t = min(max(start, lo), hi)
    for _ in range(200):
        r, dr = zeta_log_derivative(t)
        val = r + mean_log
        if val > 0:
            hi = t
        else:
            lo = t
        step = val / dr if dr > 0 else np.inf
        cand = t - step
        if not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        if abs(cand - t) < tol:
            return cand
        t = cand
    return t


class _TwoParamSearch:
    """Cyclic line maximization in transformed coordinates.

    Each sweep searches along every coordinate axis, then along the sweep's
    net displacement, which follows the curved ridges these objectives have.
    """

    min_sweeps = 2
    max_sweeps = 500
    tol = 1e-8

    def _maximize(self, fam, w, to_u, from_u):
        levels = np.flatnonzero(w >= WEIGHT_FLOOR) + 1
        f = fam._objective(levels, w[levels - 1], from_u)
        u = np.array(to_u(fam.theta), dtype=float)
        fu = f(u)
        if not np.isfinite(fu):
            u, fu = self._grid_start(f, u)
        h = np.full(u.size, 0.05)
        axes = np.eye(u.size)
        for sweep in range(self.max_sweeps):
            start = u.copy()
            for k in range(u.size):
                u_new, fu = _line_max(f, u, fu, axes[k], h[k])
                h[k] = max(abs(u_new[k] - u[k]), 1e-4)
                u = u_new
            move = u - start
            if np.any(move != 0):
                norm = np.linalg.norm(move)
                u, fu = _line_max(f, u, fu, move / norm, max(norm, 1e-4))
            theta_old = np.array(from_u(start))
            theta_new = np.array(from_u(u))
            if sweep + 1 >= self.min_sweeps and np.max(np.abs(theta_new - theta_old)) < self.tol:
                break
        return tuple(float(v) for v in from_u(u))

    def _objective(self, levels, wl, from_u):
        # expected complete-data log-likelihood in free coordinates
        return lambda u: float(np.dot(wl, self.log_pmf(levels, from_u(u))))

    @staticmethod
    def _grid_start(f, u):
        best, fbest = u, -np.inf
        for a in np.linspace(-10, 10, 41):
            for b in np.linspace(-3, 3, 13):
                cand = np.array([a, b])
                fc = f(cand)
                if fc > fbest:
                    best, fbest = cand, fc
        return best, fbest


@dataclass(frozen=True)
class DiscretizedWeibull(ScalingFamily, _TwoParamSearch):
    """Weibull(lam, p) discretized on s_i = exp(i c); theta = (lam, p).

    pi_i = F(s_{i+1}) - F(s_i), with the mass below s_1 added to level 1.
    """

    c: float = 1.0
    kind: ClassVar[str] = "disc-weibull"
    n_params: ClassVar[int] = 2

    def _check_theta(self, theta):
        if not self.c > 0:
            raise ParameterDomainError("disc-weibull needs c > 0")
        if not (theta[0] > 0 and theta[1] > 0):
            raise ParameterDomainError(f"disc-weibull needs lam > 0 and p > 0, got {theta}")

    @classmethod
    def default_theta(cls):
        return (math.exp(-2.0), 1.0)

    def spec(self):
        return f"disc-weibull:c={self.c!r}"

    def log_support(self, i):
        return np.asarray(i, dtype=float) * self.c

    def _log_surv(self, log_s, theta=None):
        lam, p = self.theta if theta is None else theta
        with np.errstate(over="ignore"):
            return -np.exp(p * (math.log(lam) + log_s))

    def log_pmf(self, i, theta=None):
        i = np.asarray(i)
        flat = i.reshape(-1).astype(float)
        log_s_next = (flat + 1.0) * self.c
        log_s = flat * self.c
        ls, lsn = self._log_surv(log_s, theta), self._log_surv(log_s_next, theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = ls + np.log(-np.expm1(lsn - ls))
            first = np.log(-np.expm1(lsn))
        # both survivals underflowed: the level carries no mass
        out = np.where(np.isneginf(ls), -np.inf, out)
        out = np.where(flat == 1, first, out)
        return out.reshape(i.shape)

    def tail_mass(self, n):
        if n < 1:
            return 1.0
        return float(np.exp(self._log_surv(np.array((n + 1.0) * self.c))))

    def tail_masses(self, I):
        out = np.exp(self._log_surv((np.arange(I + 1) + 1.0) * self.c))
        out[0] = 1.0  # level 1 also holds the mass below s_1
        return out

    def _objective(self, levels, wl, from_u):
        # compiled version of the generic objective; free coordinates are logs
        levels = levels.astype(np.int64)
        c = float(self.c)
        return lambda u: _kernels.disc_weibull_objective(float(u[0]), float(u[1]), c, levels, wl)

    def m_step(self, w):
        if self.theta_fixed:
            return self.theta
        w = self._clean_weights(w)
        return self._maximize(self, w, self.to_free, self.from_free)


@dataclass(frozen=True)
class DiscretizedLognormal(ScalingFamily, _TwoParamSearch):
    """Lognormal(mu, sigma) discretized on s_i = exp(i - 1); theta = (mu, sigma)."""

    kind: ClassVar[str] = "disc-lognormal"
    n_params: ClassVar[int] = 2

    def _check_theta(self, theta):
        if not (math.isfinite(theta[0]) and theta[1] > 0):
            raise ParameterDomainError(f"disc-lognormal needs real mu and sigma > 0, got {theta}")

    @classmethod
    def default_theta(cls):
        return (1.0, 1.0)

    def spec(self):
        return "disc-lognormal"

    def to_free(self, theta=None):
        mu, sigma = self.theta if theta is None else theta
        return np.array([mu, math.log(sigma)])

    def from_free(self, u):
        return (float(u[0]), float(math.exp(u[1])))

    def log_support(self, i):
        return np.asarray(i, dtype=float) - 1.0

    def _log_surv(self, log_s, theta=None):
        mu, sigma = self.theta if theta is None else theta
        return log_ndtr(-(log_s - mu) / sigma)

    def log_pmf(self, i, theta=None):
        i = np.asarray(i)
        flat = i.reshape(-1).astype(float)
        ls, lsn = self._log_surv(flat - 1.0, theta), self._log_surv(flat, theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = ls + np.log(-np.expm1(lsn - ls))
            first = np.log(-np.expm1(lsn))
        # both survivals underflowed: the level carries no mass
        out = np.where(np.isneginf(ls), -np.inf, out)
        out = np.where(flat == 1, first, out)
        return out.reshape(i.shape)

    def tail_mass(self, n):
        if n < 1:
            return 1.0
        mu, sigma = self.theta
        return float(ndtr(-(n - mu) / sigma))

    def tail_masses(self, I):
        mu, sigma = self.theta
        out = ndtr(-(np.arange(I + 1) - mu) / sigma)
        out[0] = 1.0  # level 1 also holds the mass below s_1
        return out

    def m_step(self, w):
        if self.theta_fixed:
            return self.theta
        w = self._clean_weights(w)
        return self._maximize(self, w, self.to_free, self.from_free)


FAMILIES = {cls.kind: cls for cls in (GeometricPareto, Zeta, DiscretizedWeibull, DiscretizedLognormal)}


def parse_family(spec, theta=None, theta_fixed=False, i_max=I_MAX_DEFAULT):
    """Build a family from ``geom-pareto:c=1``, ``zeta``, ``disc-weibull:c=1``
    or ``disc-lognormal``."""
    name, _, rest = spec.strip().partition(":")
    if name not in FAMILIES:
        raise InvalidInputError(f"unknown scaling family {name!r}; choose from {sorted(FAMILIES)}")
    cls = FAMILIES[name]
    kwargs = {}
    if rest:
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq or key.strip() != "c" or cls not in (GeometricPareto, DiscretizedWeibull):
                raise InvalidInputError(f"bad family option {item!r} in {spec!r}")
            try:
                kwargs["c"] = float(value)
            except ValueError:
                raise InvalidInputError(f"c must be a number in {spec!r}") from None
    elif cls in (GeometricPareto, DiscretizedWeibull):
        raise InvalidInputError(f"{name} requires c, e.g. {name}:c=1")
    if theta is None:
        theta = cls.default_theta()
    return cls(theta=theta, theta_fixed=theta_fixed, i_max=i_max, **kwargs)
