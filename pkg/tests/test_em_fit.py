import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from nphfit.em_fit import (EmConfig, SufficientStats, e_step, erlang_e_step, fit,
                           fit_erlang_mixture, m_step)
from nphfit.errors import FitFailureError, InvalidInputError, StateStarvationError
from nphfit.nph_model import NphModel
from nphfit.observations import Dataset, WeightedObservation
from nphfit.phase_type import erlang, random_init
from nphfit.scaling import DiscretizedLognormal, DiscretizedWeibull, GeometricPareto, Zeta


def single_level_family(theta_fixed=True):
    return GeometricPareto(theta=(700.0,), c=1.0, theta_fixed=theta_fixed)


def brute_force_stats(model, y, w, I):
    """Conditional expectations written out level by level with expm and quadrature."""
    fam, ph = model.scaling, model.ph
    a, T, t = ph.alpha, ph.T, ph.exit
    p = ph.p
    L = np.zeros(I)
    B = np.zeros((I, p))
    Zs, Z, Ne = np.zeros(p), np.zeros(p), np.zeros(p)
    Nt = np.zeros((p, p))
    for yj, wj in zip(y, w):
        parts = []
        for i in range(1, I + 1):
            s, pi = fam.support(i), fam.pmf(i)
            x = yj / s
            E = expm(T * x)
            # J[k, l] = int_0^x (e^{T(x-v)} t)_k (alpha e^{Tv})_l dv
            J, _ = quad_vec(lambda v: np.outer(expm(T * (x - v)) @ t, a @ expm(T * v)), 0, x,
                            epsabs=1e-14, epsrel=1e-12)
            parts.append((i, s, pi, E, J))
        f = sum(pi * a @ E @ t / s for _, s, pi, E, _ in parts)
        for i, s, pi, E, J in parts:
            c = wj * pi / (s * f)
            L[i - 1] += c * a @ E @ t
            B[i - 1] += c * a * (E @ t)
            Zs += c * np.diag(J)
            Z += c * s * np.diag(J)
            Nt += c * T * J.T
            Ne += c * t * (a @ E)
    np.fill_diagonal(Nt, 0.0)
    return L, B, Zs, Z, Nt, Ne


class TestEStep:
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_against_quadrature_oracle(self, p):
        model = NphModel(GeometricPareto(theta=(1.1,), c=1.0), random_init(p, 4, 1.0))
        y = np.array([0.3, 1.7, 6.0])
        w = np.array([1.0, 2.5, 0.5])
        I = 6
        st_ = e_step(model, Dataset.from_exact(y, w), n_levels=I)
        L, B, Zs, Z, Nt, Ne = brute_force_stats(model, y, w, I)
        np.testing.assert_allclose(st_.L, L, rtol=1e-9)
        np.testing.assert_allclose(st_.B, B, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(st_.Z_scaled, Zs, rtol=1e-9)
        np.testing.assert_allclose(st_.Z, Z, rtol=1e-9)
        np.testing.assert_allclose(st_.N_trans, Nt, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(st_.N_exit, Ne, rtol=1e-9)

    def test_single_observation_posterior(self):
        model = NphModel(Zeta(theta=(2.5,)), random_init(3, 1, 1.0))
        st_ = e_step(model, Dataset.from_exact([2.0]))
        assert st_.L.sum() == pytest.approx(1.0, abs=1e-10)

    def test_occupation_partitions_time(self):
        model = NphModel(GeometricPareto(theta=(1.3,), c=1.0), random_init(3, 2, 1.0))
        data = Dataset.from_exact([0.5, 3.0, 11.0], [1.0, 2.0, 0.25])
        st_ = e_step(model, data)
        assert st_.Z.sum() == pytest.approx(float(np.dot(data.w, data.y)), rel=1e-9)

    def test_fully_observed_exponential(self):
        model = NphModel(single_level_family(), erlang(1, 0.7))
        st_ = e_step(model, Dataset.from_exact([2.5]))
        assert st_.Z[0] == pytest.approx(2.5, rel=1e-12)
        assert st_.N_exit[0] == pytest.approx(1.0, rel=1e-12)
        assert st_.B.sum() == pytest.approx(1.0, rel=1e-12)

    def test_duplicates_vs_weight(self):
        model = NphModel(Zeta(theta=(3.0,)), random_init(2, 3, 1.0))
        a = e_step(model, [WeightedObservation(1.5, 1.0), WeightedObservation(1.5, 1.0),
                           WeightedObservation(4.0, 1.0)])
        b = e_step(model, [WeightedObservation(1.5, 2.0), WeightedObservation(4.0, 1.0)])
        for name in ("L", "B", "Z_scaled", "Z", "N_trans", "N_exit"):
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-14, atol=1e-300)
        assert a.loglik == pytest.approx(b.loglik, rel=1e-14)

    def test_loglik_matches_model(self):
        model = NphModel(DiscretizedLognormal(theta=(1.0, 0.8)), random_init(3, 8, 1.0))
        data = Dataset.from_exact([0.2, 1.0, 40.0], [1.0, 3.0, 0.5])
        assert e_step(model, data).loglik == pytest.approx(model.log_likelihood(data), rel=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 4))
    def test_invariants(self, seed, p):
        rng = np.random.default_rng(seed)
        model = NphModel(GeometricPareto(theta=(rng.uniform(0.8, 3),), c=1.0),
                         random_init(p, seed, 1.0))
        data = Dataset.from_exact(rng.exponential(3.0, size=20) + 1e-3, rng.uniform(0.5, 2, 20))
        st_ = e_step(model, data)
        M = data.total_weight
        assert st_.L.sum() == pytest.approx(M, abs=1e-8)
        assert st_.B.sum() == pytest.approx(M, abs=1e-8)
        for v in (st_.L, st_.B, st_.Z_scaled, st_.Z, st_.N_trans, st_.N_exit):
            assert np.all(v >= 0)
        # expected exits equal the number of observed absorptions
        assert st_.N_exit.sum() == pytest.approx(M, rel=1e-9)


class TestMStep:
    def test_exponential_mle(self):
        fam = single_level_family()
        st_ = SufficientStats(L=np.array([1.0]), B=np.array([[1.0]]), Z_scaled=np.array([2.5]),
                              Z=np.array([2.5]), N_trans=np.zeros((1, 1)), N_exit=np.array([1.0]),
                              M=1.0)
        new_fam, ph = m_step(st_, fam, 1)
        np.testing.assert_allclose(ph.T, [[-0.4]], rtol=1e-15)
        assert new_fam.theta == fam.theta

    def test_alpha_concentrated(self):
        p = 3
        st_ = SufficientStats(L=np.array([4.0, 1.0]), B=np.array([[3.0, 0, 0], [1.0, 0, 0]]),
                              Z_scaled=np.ones(p), Z=np.ones(p), N_trans=np.ones((p, p)),
                              N_exit=np.ones(p), M=4.0)
        _, ph = m_step(st_, GeometricPareto(theta=(1.0,), c=1.0), p)
        np.testing.assert_array_equal(ph.alpha, [1.0, 0.0, 0.0])

    def test_no_transitions(self):
        p = 3
        st_ = SufficientStats(L=np.array([3.0, 1.0]), B=np.ones((2, p)), Z_scaled=np.array([1.0, 2.0, 4.0]),
                              Z=np.ones(p), N_trans=np.zeros((p, p)), N_exit=np.array([2.0, 1.0, 1.0]),
                              M=4.0)
        _, ph = m_step(st_, GeometricPareto(theta=(1.0,), c=1.0), p)
        np.testing.assert_allclose(ph.T, np.diag([-2.0, -0.5, -0.25]))

    def test_starvation(self):
        p = 2
        st_ = SufficientStats(L=np.array([1.0]), B=np.array([[1.0, 0.0]]), Z_scaled=np.array([1.0, 0.0]),
                              Z=np.array([1.0, 0.0]), N_trans=np.zeros((p, p)), N_exit=np.array([1.0, 0.0]),
                              M=1.0)
        with pytest.raises(StateStarvationError, match="fewer phases"):
            m_step(st_, single_level_family(), p)


class TestFit:
    def test_constant_data_one_iteration(self):
        y0 = 3.0
        cfg = EmConfig(restarts=1, max_iters=1)
        res = fit(Dataset.from_exact(np.full(10, y0)), single_level_family(), 1, cfg)
        np.testing.assert_allclose(res.model.ph.T, [[-1 / y0]], rtol=1e-13)
        assert res.iterations == 1

    def test_deterministic(self):
        data = Dataset.from_exact(np.random.default_rng(0).pareto(2.0, 200) + 0.1)
        cfg = EmConfig(restarts=2, max_iters=30, seed=5)
        fam = GeometricPareto(theta=(1.5,), c=1.0)
        a, b = fit(data, fam, 2, cfg), fit(data, fam, 2, cfg)
        assert a.loglik_trace == b.loglik_trace
        assert a.model == b.model

    def test_best_restart_kept(self):
        data = Dataset.from_exact(np.random.default_rng(1).pareto(2.0, 200) + 0.1)
        res = fit(data, GeometricPareto(theta=(1.5,), c=1.0), 2, EmConfig(restarts=3, max_iters=20))
        runs = res.diagnostics["restarts"]
        assert len(runs) == 3
        assert res.loglik == max(r["loglik"] for r in runs)
        assert runs[res.diagnostics["best_restart"]]["loglik"] == res.loglik

    def test_fix_theta(self):
        data = Dataset.from_exact(np.random.default_rng(2).pareto(1.5, 300) + 0.05)
        res = fit(data, GeometricPareto(theta=(2.0,), c=1.0), 2,
                  EmConfig(restarts=1, max_iters=15, fix_theta=1.45))
        assert all(th == (1.45,) for th in res.theta_trace)

    def test_all_restarts_fail(self):
        # one level only: all level weight on level 1 cannot be fitted by this family
        fam = GeometricPareto(theta=(60.0,), c=1.0)
        with pytest.raises(FitFailureError) as info:
            fit(Dataset.from_exact([1.0, 2.0]), fam, 1, EmConfig(restarts=2, max_iters=5))
        assert len(info.value.diagnostics) == 2

    def test_rejects_censored(self):
        data = Dataset.from_exact([1.0]).combine(Dataset.from_censored([1.0], [2.0]))
        with pytest.raises(InvalidInputError):
            fit(data, Zeta(theta=(2.0,)), 1)

    @staticmethod
    def _fixed_point_drift(p, rel_tol):
        truth = NphModel(GeometricPareto(theta=(1.5,), c=1.0), random_init(p, 1, 1.0))
        data = Dataset.from_exact(truth.simulate(300, 4))
        res = fit(data, GeometricPareto(theta=(1.0,), c=1.0), p,
                  EmConfig(restarts=1, max_iters=40000, rel_tol=rel_tol))
        assert res.converged
        tr = np.array(res.loglik_trace)
        assert np.all(tr[1:] >= tr[:-1] - 1e-9 * np.abs(tr[:-1]))
        st_ = e_step(res.model, data, res.diagnostics["n_levels"])
        fam2, ph2 = m_step(st_, res.model.scaling, p)
        return max(np.max(np.abs(ph2.T - res.model.ph.T)),
                   np.max(np.abs(ph2.alpha - res.model.ph.alpha)),
                   np.max(np.abs(np.subtract(fam2.theta, res.model.scaling.theta))))

    def test_self_consistent(self):
        """One more E/M cycle from a converged fit moves parameters by < 1e-6."""
        assert self._fixed_point_drift(1, 1e-14) < 1e-6

    @pytest.mark.slow
    def test_self_consistent_two_phases(self):
        # EM crawls along a ridge here; the loglik change must be ~1e-13 before
        # single-cycle parameter moves drop below 1e-6
        assert self._fixed_point_drift(2, 1e-15) < 1e-6

    def test_monotone_two_parameter_family(self):
        truth = NphModel(DiscretizedWeibull(theta=(0.3, 0.8), c=1.0), random_init(2, 1, 1.0))
        data = Dataset.from_exact(truth.simulate(300, 4))
        res = fit(data, DiscretizedWeibull(theta=(0.2, 1.0), c=1.0), 2,
                  EmConfig(restarts=1, max_iters=300))
        tr = np.array(res.loglik_trace)
        assert np.all(tr[1:] >= tr[:-1] - 1e-9 * np.abs(tr[:-1]))

    def test_scale_equivariance(self):
        base = np.random.default_rng(6).pareto(2.0, 150) + 0.2
        gamma = 3.7
        fam = GeometricPareto(theta=(1.5,), c=1.0)
        cfg = EmConfig(restarts=1, max_iters=60, seed=11)
        r1 = fit(Dataset.from_exact(base), fam, 2, cfg)
        r2 = fit(Dataset.from_exact(base * gamma), fam, 2, cfg)
        y = np.linspace(0.05, 30, 50)
        np.testing.assert_allclose(r2.model.density(y * gamma), r1.model.density(y) / gamma,
                                   rtol=1e-4)


class TestErlangMixture:
    def test_posterior_sums_to_one(self):
        model = NphModel(Zeta(theta=(2.0,)), erlang(2, 1.5))
        data = Dataset.from_exact([0.5, 3.0, 100.0])
        for y in data.y:
            st_ = erlang_e_step(model, Dataset.from_exact([y]))
            assert st_.L.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_general_stats(self):
        model = NphModel(GeometricPareto(theta=(1.2,), c=1.0), erlang(2, 0.8))
        data = Dataset.from_exact([0.3, 2.0, 9.0], [1.0, 2.0, 0.5])
        fast = erlang_e_step(model, data)
        slow = e_step(model, data)
        np.testing.assert_allclose(fast.L, slow.L, rtol=1e-10, atol=1e-300)
        assert fast.loglik == pytest.approx(slow.loglik, rel=1e-12)
        # sum_i Zy_i / s_i equals the total scaled occupation time
        inv_s = model.levels().inv_s
        assert float(np.dot(fast.Zy, inv_s)) == pytest.approx(slow.Z_scaled.sum(), rel=1e-10)

    def test_q1_agrees_with_general_fit(self):
        truth = NphModel(GeometricPareto(theta=(1.5,), c=1.0), erlang(1, 1.0))
        data = Dataset.from_exact(truth.simulate(500, 8))
        fam = GeometricPareto(theta=(1.0,), c=1.0)
        cfg = EmConfig(restarts=1, rel_tol=1e-13, max_iters=20000)
        a = fit_erlang_mixture(data, fam, 1, cfg)
        b = fit(data, fam, 1, cfg)
        assert a.converged and b.converged
        assert abs(a.loglik - b.loglik) < 1e-6
        tr = np.array(a.loglik_trace)
        assert np.all(tr[1:] >= tr[:-1] - 1e-9 * np.abs(tr[:-1]))

    def test_rate_update_closed_form(self):
        """After one step on single-level data the rate is q M / sum w y."""
        data = Dataset.from_exact([1.0, 2.0, 6.0], [1.0, 1.0, 2.0])
        res = fit_erlang_mixture(data, single_level_family(), 3, EmConfig(restarts=1, max_iters=1))
        q, lam = res.model.erlang
        assert lam == pytest.approx(3 * 4.0 / 15.0, rel=1e-12)

    def test_weighted_equivalence(self):
        y = np.random.default_rng(9).pareto(2.0, 100) + 0.1
        raw = Dataset.from_exact(np.repeat(y, 2))
        wtd = Dataset.from_exact(y, np.full(y.size, 2.0))
        cfg = EmConfig(restarts=2, max_iters=40)
        fam = Zeta(theta=(2.0,))
        a = fit_erlang_mixture(raw, fam, 1, cfg)
        b = fit_erlang_mixture(wtd, fam, 1, cfg)
        np.testing.assert_allclose(a.loglik_trace, b.loglik_trace, rtol=1e-10)
