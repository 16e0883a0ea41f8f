import json
import warnings

import numpy as np
import pytest

from mgcp_cox.datagen import GenConfig, gen_dataset
from mgcp_cox.dataio import (
    CMAPSS_COLUMNS,
    Dataset,
    atomic_write_text,
    ingest_cmapss,
    ingest_longitudinal_csv,
    load_model,
    model_to_dict,
    save_model,
    write_dataset_csv,
)
from mgcp_cox.errors import ValidationError
from mgcp_cox.inference import FitConfig, ParamLayout, fit


def write_cmapss(path, rng, n_units=25, sensor_drift=0.02):
    rows = []
    for u in range(1, n_units + 1):
        life = int(rng.integers(30, 60))
        for c in range(1, life + 1):
            vals = rng.normal(0, 1, 24)
            vals[3 + 1] = 640.0 + sensor_drift * c + rng.normal(0, 0.3)  # s2
            rows.append(" ".join([str(u), str(c)] + [f"{v:.4f}" for v in vals]))
    path.write_text("\n".join(rows) + "\n")


@pytest.fixture
def csv_pair(tmp_path):
    units = gen_dataset(GenConfig(N=6, censor_frac=0.2, seed=9))
    lon, surv = tmp_path / "lon.csv", tmp_path / "surv.csv"
    write_dataset_csv(units, lon, surv)
    return units, lon, surv


class TestCsvDatasets:
    def test_round_trip(self, csv_pair):
        units, lon, surv = csv_pair
        ds = ingest_longitudinal_csv(lon, surv)
        assert ds.units == units

    def test_headers(self, csv_pair):
        _, lon, surv = csv_pair
        assert lon.read_text().splitlines()[0] == "unit_id,time,value"
        assert surv.read_text().splitlines()[0] == "unit_id,event_time,event_indicator,w0"

    def test_missing_survival_row(self, csv_pair):
        _, lon, surv = csv_pair
        lines = surv.read_text().splitlines()
        dropped = lines[3].split(",")[0]
        surv.write_text("\n".join(lines[:3] + lines[4:]) + "\n")
        with pytest.raises(ValidationError, match=rf"\b{dropped}\b"):
            ingest_longitudinal_csv(lon, surv)

    def test_non_monotone_times(self, csv_pair):
        _, lon, surv = csv_pair
        lines = lon.read_text().splitlines()
        lines[2], lines[3] = lines[3], lines[2]
        lon.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=r"lon\.csv:4"):
            ingest_longitudinal_csv(lon, surv)

    def test_bad_value_names_column(self, csv_pair):
        _, lon, surv = csv_pair
        lines = lon.read_text().splitlines()
        lines[5] = lines[5].rsplit(",", 1)[0] + ",abc"
        lon.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=r"lon\.csv:6: column 'value'"):
            ingest_longitudinal_csv(lon, surv)

    def test_duplicate_ids_rejected(self):
        units = gen_dataset(GenConfig(N=2, censor_frac=0.0, seed=0))
        with pytest.raises(ValidationError):
            Dataset(units=[units[0], units[0]])


class TestCmapss:
    def test_standardization_and_lifetimes(self, tmp_path, rng):
        path = tmp_path / "train_FD001.txt"
        write_cmapss(path, rng)
        ds = ingest_cmapss(path, "s2", unit_limit=20)
        assert len(ds.units) == 20
        y = np.concatenate([u.Y for u in ds.units])
        assert abs(y.mean()) < 1e-8
        assert abs(y.std() - 1.0) < 1e-8
        for u in ds.units:
            assert u.V == u.times[-1] and u.delta == 1 and u.w.size == 0
        assert "s2" in ds.standardization

    def test_unknown_sensor(self, tmp_path, rng):
        path = tmp_path / "f.txt"
        write_cmapss(path, rng, n_units=2)
        with pytest.raises(ValidationError, match="s21"):
            ingest_cmapss(path, "s99")

    def test_malformed_row(self, tmp_path, rng):
        path = tmp_path / "f.txt"
        write_cmapss(path, rng, n_units=2)
        lines = path.read_text().splitlines()
        lines[4] = lines[4].rsplit(" ", 1)[0]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=r"f\.txt:5"):
            ingest_cmapss(path)

    def test_layout(self):
        assert len(CMAPSS_COLUMNS) == 26


@pytest.fixture(scope="module")
def model():
    units = gen_dataset(GenConfig(N=5, seed=2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit(units, FitConfig(M=4, restarts=1, max_iters=100))


class TestModelPersistence:
    def test_bit_exact_round_trip(self, model, tmp_path):
        path = tmp_path / "m.json"
        save_model(model, path)
        back = load_model(path)
        layout = ParamLayout(5, 1, 1, model.params.cox.t_min)
        np.testing.assert_array_equal(layout.pack(back.params), layout.pack(model.params))
        assert back.params.cox.t_min == model.params.cox.t_min
        for name in ("Z", "m", "s"):
            np.testing.assert_array_equal(getattr(back.posterior, name), getattr(model.posterior, name))
        np.testing.assert_array_equal(back.baseline.H, model.baseline.H)
        np.testing.assert_array_equal(back.baseline.spline.coefficients, model.baseline.spline.coefficients)
        np.testing.assert_array_equal(back.elbo_trace, model.elbo_trace)
        assert back.config == model.config
        save_model(back, tmp_path / "m2.json")
        assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()
        uid = model.data_summary["unit_ids"][0]
        assert back.event_probability(uid, 3.0, 10.0) == model.event_probability(uid, 3.0, 10.0)

    def test_truncated_file(self, model, tmp_path):
        path = tmp_path / "m.json"
        save_model(model, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(ValidationError, match="parse"):
            load_model(path)

    def test_unknown_version(self, model, tmp_path):
        doc = model_to_dict(model)
        doc["schema_version"] = 99
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="version"):
            load_model(path)

    def test_invariant_violation(self, model, tmp_path):
        doc = model_to_dict(model)
        doc["cox"]["psi"] = -1.0
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_model(path)
        doc = model_to_dict(model)
        doc["kernel"]["xi"]["data"][0] = -1.0
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_model(path)


class TestAtomicWrite:
    def test_no_temp_files_left(self, tmp_path):
        atomic_write_text(tmp_path / "a.txt", "x")
        assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]

    def test_failed_write_keeps_old_file(self, tmp_path, monkeypatch):
        target = tmp_path / "a.txt"
        target.write_text("old")

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr("mgcp_cox.dataio.os.replace", boom)
        with pytest.raises(OSError):
            atomic_write_text(target, "new")
        assert target.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
