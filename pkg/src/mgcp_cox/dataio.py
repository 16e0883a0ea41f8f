"""Dataset and model files.

Longitudinal CSV: ``unit_id,time,value``. Survival CSV:
``unit_id,event_time,event_indicator,w0[,w1,...]``. Both need headers. Model
files are versioned JSON documents; every write goes to a temporary file
in the target directory that is renamed into place.
"""

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from mgcp_cox.cox import BaselineHazardCurve, CoxParams
from mgcp_cox.datagen import UnitRecord
from mgcp_cox.errors import ValidationError
from mgcp_cox.inference import FitConfig, FittedModel, ModelParams
from mgcp_cox.kernels import KernelParams
from mgcp_cox.sparse_gp import VariationalPosterior
from mgcp_cox.spline import SmoothingSpline

MODEL_SCHEMA_VERSION = 1
MODEL_FORMAT = "mgcp-cox-model"
CMAPSS_COLUMNS = (
    ["unit", "cycle", "op1", "op2", "op3"] + [f"s{j}" for j in range(1, 22)]
)


@dataclass
class Dataset:
    units: list
    provenance: str = ""
    standardization: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [u.id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ValidationError("unit ids must be unique")


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# CSV datasets


def dataset_csv_text(units):
    """Return (longitudinal, survival) CSV texts."""
    n_w = max((u.w.size for u in units), default=0)
    lon = io.StringIO()
    w = csv.writer(lon, lineterminator="\n")
    w.writerow(["unit_id", "time", "value"])
    for u in units:
        for t, y in zip(u.times, u.Y):
            w.writerow([u.id, _fmt(t), _fmt(y)])
    surv = io.StringIO()
    w = csv.writer(surv, lineterminator="\n")
    w.writerow(["unit_id", "event_time", "event_indicator"] + [f"w{j}" for j in range(n_w)])
    for u in units:
        w.writerow([u.id, _fmt(u.V), u.delta] + [_fmt(x) for x in u.w])
    return lon.getvalue(), surv.getvalue()


def write_dataset_csv(units, longitudinal_path, survival_path):
    lon, surv = dataset_csv_text(units)
    atomic_write_text(longitudinal_path, lon)
    atomic_write_text(survival_path, surv)


def _read_rows(path, expected):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    if not rows:
        raise ValidationError(f"{path}: empty file, header required")
    header = [h.strip() for h in rows[0]]
    if header[: len(expected)] != expected:
        raise ValidationError(f"{path}:1: header must start with {','.join(expected)}, got {','.join(header)}")
    return header, rows[1:]


def _parse_float(path, line, col, text):
    try:
        val = float(text)
    except ValueError:
        raise ValidationError(f"{path}:{line}: column {col!r}: not a number: {text!r}") from None
    if not np.isfinite(val):
        raise ValidationError(f"{path}:{line}: column {col!r}: value must be finite")
    return val


def ingest_longitudinal_csv(path, survival_path):
    """Read a dataset written by :func:`write_dataset_csv`."""
    header, rows = _read_rows(path, ["unit_id", "time", "value"])
    obs = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        uid = row[0].strip()
        t = _parse_float(path, lineno, "time", row[1])
        y = _parse_float(path, lineno, "value", row[2])
        times, values = obs.setdefault(uid, ([], []))
        if times and t <= times[-1]:
            raise ValidationError(f"{path}:{lineno}: column 'time': times of unit {uid} not increasing")
        times.append(t)
        values.append(y)

    s_header, s_rows = _read_rows(survival_path, ["unit_id", "event_time", "event_indicator"])
    w_cols = s_header[3:]
    units = []
    seen = set()
    for lineno, row in enumerate(s_rows, start=2):
        if not row:
            continue
        if len(row) != len(s_header):
            raise ValidationError(
                f"{survival_path}:{lineno}: expected {len(s_header)} columns, got {len(row)}")
        uid = row[0].strip()
        if uid in seen:
            raise ValidationError(f"{survival_path}:{lineno}: duplicate unit id {uid!r}")
        seen.add(uid)
        V = _parse_float(survival_path, lineno, "event_time", row[1])
        if row[2].strip() not in ("0", "1"):
            raise ValidationError(f"{survival_path}:{lineno}: column 'event_indicator' must be 0 or 1")
        w = [_parse_float(survival_path, lineno, c, x) for c, x in zip(w_cols, row[3:])]
        times, values = obs.get(uid, ([], []))
        try:
            units.append(UnitRecord(id=uid, times=times, Y=values, V=V, delta=int(row[2]), w=w))
        except ValidationError as exc:
            raise ValidationError(f"{survival_path}:{lineno}: {exc}") from exc
    orphans = sorted(set(obs) - seen)
    if orphans:
        raise ValidationError(f"{path}: unit ids without a survival row: {', '.join(orphans)}")
    return Dataset(units=units, provenance=f"csv:{path},{survival_path}")


# ---------------------------------------------------------------------------
# C-MAPSS


def ingest_cmapss(path, sensor_column="s2", unit_limit=None):
    """Read a C-MAPSS run-to-failure file and z-score one sensor channel.

    Each engine becomes a unit failing at its last cycle (``delta = 1``);
    times are cycle indices and there are no fixed covariates.
    """
    if sensor_column not in CMAPSS_COLUMNS[5:]:
        raise ValidationError(
            f"unknown sensor column {sensor_column!r}; valid: {', '.join(CMAPSS_COLUMNS[5:])}")
    col = CMAPSS_COLUMNS.index(sensor_column)
    data = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != len(CMAPSS_COLUMNS):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(CMAPSS_COLUMNS)} columns, got {len(parts)}")
            try:
                unit = int(float(parts[0]))
                cycle = float(parts[1])
                value = float(parts[col])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed numeric field") from None
            data.setdefault(unit, []).append((cycle, value))
    if not data:
        raise ValidationError(f"{path}: no rows")
    ids = sorted(data)
    if unit_limit is not None:
        ids = ids[:unit_limit]
    series = {u: np.array(sorted(data[u])) for u in ids}
    pooled = np.concatenate([s[:, 1] for s in series.values()])
    mean, sd = float(pooled.mean()), float(pooled.std())
    if sd == 0:
        raise ValidationError(f"sensor {sensor_column} is constant over the selected units")
    units = [
        UnitRecord(id=str(u), times=s[:, 0], Y=(s[:, 1] - mean) / sd, V=s[-1, 0], delta=1,
                   w=np.empty(0))
        for u, s in series.items()
    ]
    return Dataset(units=units, provenance=f"cmapss:{path}:{sensor_column}",
                   standardization={sensor_column: {"mean": mean, "sd": sd}})


# ---------------------------------------------------------------------------
# models


def _matrix(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _from_matrix(d, name):
    try:
        return np.asarray(d["data"], dtype=float).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"model field {name!r}: malformed matrix ({exc})") from exc


def model_to_dict(model):
    k, c, vp = model.params.kernel, model.params.cox, model.posterior
    baseline = None
    if model.baseline is not None:
        spl = model.baseline.spline
        baseline = {
            "grid": model.baseline.grid.tolist(), "H": model.baseline.H.tolist(),
            "knots": spl.knots.tolist(), "coefficients": spl.coefficients.tolist(),
            "penalty": spl.lam,
        }
    return {
        "format": MODEL_FORMAT,
        "schema_version": MODEL_SCHEMA_VERSION,
        "kernel": {
            "lambda": k.lengthscales.tolist(), "xi": _matrix(k.widths),
            "alpha": _matrix(k.scales), "sigma_epsilon": k.noise_sd,
        },
        "cox": {"gamma": c.gamma.tolist(), "beta": c.beta, "b": c.b, "psi": c.psi,
                "t_min": c.t_min},
        "posterior": {"Z": vp.Z.tolist(), "m": vp.m.tolist(), "s": _matrix(vp.s),
                      "jitter": vp.jitter},
        "baseline": baseline,
        "elbo_trace": np.asarray(model.elbo_trace, dtype=float).tolist(),
        "data_summary": model.data_summary,
        "config": asdict(model.config),
        "status": model.status,
    }


def model_from_dict(d):
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ValidationError("not an MGCP-Cox model document")
    version = d.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported model schema version {version!r}; expected {MODEL_SCHEMA_VERSION}")
    try:
        kd, cd, pd_ = d["kernel"], d["cox"], d["posterior"]
        kernel = KernelParams(
            lengthscales=np.asarray(kd["lambda"], dtype=float),
            widths=_from_matrix(kd["xi"], "xi"), scales=_from_matrix(kd["alpha"], "alpha"),
            noise_sd=kd["sigma_epsilon"],
        )
        cp = CoxParams(cd["gamma"], cd["beta"], cd["b"], cd["psi"], cd["t_min"])
        vp = VariationalPosterior(Z=np.asarray(pd_["Z"], dtype=float),
                                  m=np.asarray(pd_["m"], dtype=float),
                                  s=_from_matrix(pd_["s"], "s"), jitter=float(pd_["jitter"]))
        if vp.m.size != kernel.num_latent * vp.Z.size:
            raise ValidationError("posterior size does not match K * M")
        if not np.allclose(vp.s, vp.s.T, rtol=0, atol=1e-10 * max(1.0, np.abs(vp.s).max())):
            raise ValidationError("posterior covariance is not symmetric")
        baseline = None
        if d["baseline"] is not None:
            bd = d["baseline"]
            H = np.asarray(bd["H"], dtype=float)
            if np.any(np.diff(H) < 0):
                raise ValidationError("baseline cumulative hazard must be non-decreasing")
            spline = SmoothingSpline.from_coefficients(bd["knots"], bd["coefficients"], bd["penalty"])
            baseline = BaselineHazardCurve(grid=np.asarray(bd["grid"], dtype=float), H=H,
                                           spline=spline)
        trace = np.asarray(d["elbo_trace"], dtype=float)
        if np.any(np.diff(trace) < -1e-8 * np.maximum(1.0, np.abs(trace[1:]))):
            raise ValidationError("elbo_trace must be non-decreasing")
        summary = d["data_summary"]
        if len(summary["unit_ids"]) != kernel.num_units:
            raise ValidationError("data summary unit count does not match kernel parameters")
        return FittedModel(
            params=ModelParams(kernel, cp), posterior=vp, baseline=baseline, elbo_trace=trace,
            data_summary=summary, config=FitConfig(**d["config"]), status=d["status"],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"model document missing or malformed field: {exc}") from exc


def save_model(model, path):
    atomic_write_text(path, json.dumps(model_to_dict(model), indent=1, allow_nan=False) + "\n")


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: cannot parse model file ({exc})") from exc
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc})") from exc
    return model_from_dict(doc)
