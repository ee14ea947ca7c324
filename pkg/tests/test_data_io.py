import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nphfit.data_io import (bin_body_tail, load_csv, load_metadata, load_model, save_model,
                            write_curve, write_trace)
from nphfit.em_fit import EmConfig, fit
from nphfit.errors import DataError, ModelLoadError, ValidationError
from nphfit.nph_model import NphModel
from nphfit.observations import Dataset
from nphfit.phase_type import erlang, random_init
from nphfit.scaling import DiscretizedLognormal, DiscretizedWeibull, GeometricPareto, Zeta


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_exact(self, tmp_path):
        d = load_csv(write(tmp_path, "y\n1\n2\n3\n"))
        np.testing.assert_array_equal(d.y, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(d.w, [1.0, 1.0, 1.0])
        assert d.n_censored == 0

    def test_weighted(self, tmp_path):
        d = load_csv(write(tmp_path, "y,weight\n1.5,2\n4,0.5\n"), "weighted")
        np.testing.assert_array_equal(d.w, [2.0, 0.5])

    def test_nonpositive_rejected_with_line(self, tmp_path):
        with pytest.raises(DataError, match=r"\[2\]"):
            load_csv(write(tmp_path, "y\n0.0\n1.0\n"))

    def test_several_bad_lines(self, tmp_path):
        with pytest.raises(DataError, match=r"\[3, 5\]"):
            load_csv(write(tmp_path, "y\n1\n-2\n3\n0\n"))

    def test_right_censored(self, tmp_path):
        d = load_csv(write(tmp_path, "lower,upper,weight\n5,inf,1\n1,2,3\n"), "censored")
        assert d.n_censored == 2 and d.n_exact == 0
        assert d.lower[0] == 5.0 and math.isinf(d.upper[0])
        assert d.cw[1] == 3.0

    def test_censored_bad_interval(self, tmp_path):
        with pytest.raises(DataError, match=r"\[2\]"):
            load_csv(write(tmp_path, "lower,upper,weight\n3,2,1\n"), "censored")

    def test_malformed_row(self, tmp_path):
        with pytest.raises(DataError, match=":3:"):
            load_csv(write(tmp_path, "y\n1\nabc\n"))

    def test_wrong_field_count(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            load_csv(write(tmp_path, "y,weight\n1\n"), "weighted")

    def test_inf_not_allowed_for_exact(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            load_csv(write(tmp_path, "y\ninf\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty file"):
            load_csv(write(tmp_path, ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(DataError, match="empty dataset"):
            load_csv(write(tmp_path, "y\n"))

    def test_wrong_header(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_csv(write(tmp_path, "x\n1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_csv(tmp_path / "absent.csv")


class TestBinBodyTail:
    def test_three_points(self):
        out = bin_body_tail(Dataset.from_exact([0.1, 0.1, 9.0]), 5.0, 10)
        np.testing.assert_allclose(out.y, [0.25, 9.0])
        np.testing.assert_array_equal(out.w, [2.0, 1.0])

    def test_single_bin(self):
        out = bin_body_tail(Dataset.from_exact([0.3, 1.0, 4.9]), 5.0, 1)
        np.testing.assert_allclose(out.y, [2.5])
        np.testing.assert_array_equal(out.w, [3.0])

    def test_left_shifted(self):
        out = bin_body_tail(Dataset.from_exact([0.1, 1.2, 3.3]), 5.0, 10, "left-shifted")
        np.testing.assert_allclose(out.y, [0.25, 1.0, 3.0])

    def test_tail_duplicates_merged(self):
        out = bin_body_tail(Dataset.from_exact([1.0, 7.0, 7.0, 8.0]), 5.0, 2)
        np.testing.assert_allclose(out.y, [1.25, 7.0, 8.0])
        np.testing.assert_array_equal(out.w, [1.0, 2.0, 1.0])

    def test_boundary_goes_to_tail(self):
        out = bin_body_tail(Dataset.from_exact([5.0]), 5.0, 10)
        np.testing.assert_array_equal(out.y, [5.0])

    def test_censored_pass_through(self):
        d = Dataset.from_exact([1.0]).combine(Dataset.from_censored([2.0], [np.inf]))
        out = bin_body_tail(d, 5.0, 10)
        assert out.n_censored == 1 and math.isinf(out.upper[0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), K=st.integers(1, 200), split=st.floats(0.1, 50.0))
    def test_total_weight_preserved(self, seed, K, split):
        rng = np.random.default_rng(seed)
        y = rng.pareto(1.5, 300) + 1e-3
        out = bin_body_tail(Dataset.from_exact(y), split, K)
        assert out.total_weight == pytest.approx(300.0, rel=1e-12)
        assert np.all(out.y > 0)
        assert (out.y < split).sum() <= K

    def test_binned_fit_faster_and_close(self):
        """Binned body fits several times faster with nearly the same likelihood."""
        truth = NphModel(GeometricPareto(theta=(1.5,), c=1.0), random_init(2, 1))
        raw = Dataset.from_exact(truth.simulate(2000, 9))
        binned = bin_body_tail(raw, float(np.quantile(raw.y, 0.9)), 100)
        cfg = EmConfig(restarts=1, max_iters=400, rel_tol=1e-9, seed=2)
        fam = GeometricPareto(theta=(1.0,), c=1.0)
        t0 = time.perf_counter()
        r_raw = fit(raw, fam, 2, cfg)
        t1 = time.perf_counter()
        r_bin = fit(binned, fam, 2, cfg)
        t2 = time.perf_counter()
        assert (t1 - t0) / (t2 - t1) >= 3.0
        l_raw = r_raw.model.log_likelihood(raw)
        l_bin = r_bin.model.log_likelihood(raw)
        assert abs(l_bin - l_raw) < 0.005 * abs(l_raw)


MODELS = [
    NphModel(GeometricPareto(theta=(1.6031,), c=1.0), random_init(3, 4)),
    NphModel(Zeta(theta=(2.5,)), erlang(2, 1.0 / 3.0), trunc_eps=1e-9),
    NphModel(DiscretizedWeibull(theta=(0.1, 0.7), c=0.5), random_init(2, 7)),
    NphModel(DiscretizedLognormal(theta=(0.1909, 0.5979), theta_fixed=True), random_init(4, 1)),
]


class TestModelFiles:
    @pytest.mark.parametrize("model", MODELS)
    def test_round_trip_bit_exact(self, tmp_path, model):
        path = tmp_path / "m.nph"
        save_model(model, path, {"loglik": -1.25})
        back = load_model(path)
        assert back == model
        np.testing.assert_array_equal(back.ph.T, model.ph.T)
        assert back.scaling.theta == model.scaling.theta
        assert load_metadata(path) == {"loglik": -1.25}

    def test_fitted_round_trip(self, tmp_path):
        data = Dataset.from_exact(np.random.default_rng(3).pareto(2.0, 100) + 0.05)
        res = fit(data, GeometricPareto(theta=(1.0,), c=1.0), 2, EmConfig(restarts=1, max_iters=20))
        save_model(res.model, tmp_path / "f.nph")
        back = load_model(tmp_path / "f.nph")
        assert back.log_likelihood(data) == res.model.log_likelihood(data)

    def test_human_readable(self, tmp_path):
        save_model(MODELS[0], tmp_path / "m.nph")
        doc = json.loads((tmp_path / "m.nph").read_text())
        assert doc["family"]["kind"] == "geom-pareto"
        assert set(doc["ph"]) == {"alpha", "T"}

    def test_broken_row_sum(self, tmp_path):
        path = tmp_path / "m.nph"
        save_model(MODELS[0], path)
        doc = json.loads(path.read_text())
        doc["ph"]["T"][0][1] = 1e3
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_model(path)

    def test_missing_theta(self, tmp_path):
        path = tmp_path / "m.nph"
        save_model(MODELS[0], path)
        doc = json.loads(path.read_text())
        del doc["family"]["theta"]
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelLoadError, match="family.theta"):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.nph"
        save_model(MODELS[0], path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelLoadError, match="version"):
            load_model(path)

    def test_not_json(self, tmp_path):
        path = write(tmp_path, "theta = 2\n", "m.nph")
        with pytest.raises(ModelLoadError):
            load_model(path)


class TestCurveFiles:
    def test_curve(self, tmp_path):
        write_curve(tmp_path / "c.csv", [0.5, 1.0], [0.1, 1 / 3])
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "y,value"
        assert float(lines[2].split(",")[1]) == 1 / 3

    def test_trace(self, tmp_path):
        data = Dataset.from_exact(np.random.default_rng(0).pareto(2.0, 80) + 0.1)
        res = fit(data, GeometricPareto(theta=(1.0,), c=1.0), 1, EmConfig(restarts=1, max_iters=5))
        write_trace(tmp_path / "t.csv", res)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iteration,loglik,theta0"
        assert len(lines) == len(res.loglik_trace) + 1
