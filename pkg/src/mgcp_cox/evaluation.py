"""Experiment harness: windowed event classification and remaining-life error.

For every replication one unit is held out as the test unit, observed up
to ``t* = alpha * T`` and scored for failure within ``(t*, t* + dt]``. The
joint model is compared with a logistic-regression classifier that sees only
the fixed covariates and the last observed signal value.
"""

import csv
import io
import logging
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from mgcp_cox.datagen import GenConfig, UnitRecord, gen_dataset
from mgcp_cox.errors import NumericalError, ValidationError
from mgcp_cox.inference import FitConfig, fit
from mgcp_cox.dataio import atomic_write_text

logger = logging.getLogger(__name__)

MODELS = ("mgcp_cox", "lr")


@dataclass
class ExperimentGrid:
    """Replicated evaluation design.

    ``units`` switches from synthetic generation to a fixed dataset; then
    replication ``r`` holds out unit ``r`` (run-to-failure units only).
    """

    alphas: tuple = (0.3, 0.5)
    windows: tuple = (12.0, 15.0, 20.0)
    reps: int = 20
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    units: list | None = None
    max_failure_frac: float = 0.2

    def __post_init__(self):
        if not all(0.0 < a <= 1.0 for a in self.alphas):
            raise ValidationError("alphas must lie in (0, 1]")
        if not all(dt > 0 for dt in self.windows):
            raise ValidationError("windows must be positive")
        if self.reps < 1:
            raise ValidationError("at least one replication is required")
        if self.units is not None and self.reps > len(self.units):
            raise ValidationError("more replications than units in the dataset")


@dataclass(frozen=True)
class ScoredOutcome:
    model: str
    score: float
    label: int
    replication: int
    alpha: float
    dt: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValidationError("label must be 0 or 1")


def truncate_at_percentile(unit, alpha, event_time=None):
    """Keep observations up to ``t* = alpha * T``; the unit is censored at ``t*``.

    ``T`` is ``event_time`` if given, else the latent event time of
    synthetic units, else ``V`` of an observed failure.
    """
    T = event_time if event_time is not None else unit.true_event_time
    if T is None:
        if unit.delta != 1:
            raise ValidationError(f"unit {unit.id}: failure time unknown")
        T = unit.V
    t_star = alpha * T
    keep = unit.times <= t_star
    if not keep.any():
        raise ValidationError(f"unit {unit.id}: no observations before t*={t_star:.3f}")
    censored = t_star < unit.V
    return UnitRecord(
        id=unit.id, times=unit.times[keep], Y=unit.Y[keep],
        V=t_star if censored else unit.V, delta=0 if censored else unit.delta,
        w=unit.w, true_event_time=unit.true_event_time,
    )


def roc_auc(outcomes):
    """ROC points over a sweep of the distinct scores and trapezoidal AUC.

    Accepts ``ScoredOutcome`` objects or ``(score, label)`` pairs. Tied
    scores move the curve diagonally, i.e. they count half.
    """
    pairs = [(o.score, o.label) if isinstance(o, ScoredOutcome) else tuple(o) for o in outcomes]
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs], dtype=int)
    n_pos, n_neg = int(labels.sum()), int((1 - labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_tie]
    fps = np.cumsum(1 - y)[last_of_tie]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * 0.5 * (tpr[1:] + tpr[:-1])))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def lr_baseline(X_train, y_train, X_test, ridge=1e-4, max_iter=100, tol=1e-10):
    """Ridge-penalized logistic regression fitted by IRLS; returns test probabilities.

    The intercept is not penalized. A single-class training set yields the
    constant base rate.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    y = np.asarray(y_train, dtype=float)
    if y.size < 2:
        raise ValidationError("logistic regression needs at least two training rows")
    if y.min() == y.max():
        warnings.warn("single-class training labels; returning the base rate", RuntimeWarning,
                      stacklevel=2)
        return np.full(X_test.shape[0], y.mean())
    coef = lr_fit(X_train, y, ridge, max_iter, tol)
    return _sigmoid(np.c_[np.ones(X_test.shape[0]), X_test] @ coef)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lr_fit(X, y, ridge=1e-4, max_iter=100, tol=1e-10):
    """Intercept-first coefficients maximising ``loglik - ridge/2 * |coef[1:]|^2``."""
    D = np.c_[np.ones(X.shape[0]), X]
    pen = np.full(D.shape[1], ridge)
    pen[0] = 0.0
    coef = np.zeros(D.shape[1])
    coef[0] = np.log(y.mean() / (1.0 - y.mean()))
    for _ in range(max_iter):
        p = _sigmoid(D @ coef)
        W = np.maximum(p * (1.0 - p), 1e-12)
        grad = D.T @ (y - p) - pen * coef
        hess = D.T @ (W[:, None] * D) + np.diag(pen)
        step = np.linalg.solve(hess, grad)
        coef = coef + step
        if np.max(np.abs(step)) < tol:
            break
    return coef


def ae_mrl(true_rl, predicted_mrl):
    return abs(float(true_rl) - float(predicted_mrl))


def _lr_rows(train_units, t_star, dt):
    X, y = [], []
    for u in train_units:
        if u.V <= t_star:
            continue
        if u.V <= t_star + dt:
            if u.delta != 1:
                continue  # censored inside the window: label unknown
            label = 1
        else:
            label = 0
        seen = u.times <= t_star
        if not seen.any():
            continue
        X.append(np.r_[u.w, u.Y[seen][-1]])
        y.append(label)
    return np.array(X), np.array(y)


def _replication(r, seed, grid):
    if grid.units is None:
        units = gen_dataset(replace(grid.gen, seed=seed))
        test = units[-1]
        T = test.true_event_time
        train = units[:-1]
    else:
        test = grid.units[r]
        if test.delta != 1:
            raise ValidationError(f"test unit {test.id} is censored")
        T = test.V
        train = [u for i, u in enumerate(grid.units) if i != r]
    outcomes, mrl_rows, betas = [], [], []
    for alpha in grid.alphas:
        trunc = truncate_at_percentile(test, alpha, event_time=T)
        t_star = alpha * T
        model = fit(train + [trunc], replace(grid.fit, seed=seed), test_unit=test.id)
        betas.append(dict(replication=r, alpha=alpha, beta=model.params.cox.beta,
                          status=model.status))
        mrl = model.mean_remaining_life(test.id, t_star)
        mrl_rows.append(dict(replication=r, alpha=alpha, t_star=t_star, true_rl=T - t_star,
                             mrl=mrl, ae=ae_mrl(T - t_star, mrl)))
        x_test = np.r_[trunc.w, trunc.Y[-1]][None, :]
        for dt in grid.windows:
            label = int(T <= t_star + dt)
            p = model.event_probability(test.id, t_star, dt)
            outcomes.append(ScoredOutcome("mgcp_cox", p, label, r, alpha, dt))
            X, y = _lr_rows(train, t_star, dt)
            if y.size >= 2:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    q = float(lr_baseline(X, y, x_test)[0])
            else:
                q = 0.5
            outcomes.append(ScoredOutcome("lr", q, label, r, alpha, dt))
    return outcomes, mrl_rows, betas


def replication_seeds(seed, reps):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(reps)]


@dataclass
class ExperimentReport:
    outcomes: list
    mrl: list
    betas: list
    failures: list
    grid: ExperimentGrid

    def cell(self, model, alpha, dt):
        return [o for o in self.outcomes if o.model == model and o.alpha == alpha and o.dt == dt]

    def auc_table(self):
        """Pooled AUC per (model, alpha, dt); NaN when a cell has a single class."""
        rows = []
        for model in MODELS:
            for alpha in self.grid.alphas:
                for dt in self.grid.windows:
                    cell = self.cell(model, alpha, dt)
                    n_pos = sum(o.label for o in cell)
                    try:
                        auc = roc_auc(cell)[1]
                    except ValidationError:
                        auc = float("nan")
                    rows.append(dict(model=model, alpha=alpha, dt=dt, n=len(cell),
                                     n_pos=n_pos, auc=auc))
        return rows

    def _mean_auc(self, by_rep, model, alpha, sample):
        """Mean over windows of the pooled AUC of replications ``sample``;
        single-class cells are skipped."""
        aucs = []
        for dt in self.grid.windows:
            cell = [o for r in sample for o in by_rep[(model, alpha, r)] if o.dt == dt]
            try:
                aucs.append(roc_auc(cell)[1])
            except ValidationError:
                pass
        return float(np.mean(aucs)) if aucs else float("nan")

    def _index(self):
        reps = sorted({o.replication for o in self.outcomes})
        by_rep = {(m, a, r): [] for m in MODELS for a in self.grid.alphas for r in reps}
        for o in self.outcomes:
            by_rep[(o.model, o.alpha, o.replication)].append(o)
        return reps, by_rep

    def mean_auc_by_alpha(self, model="mgcp_cox", n_boot=200, seed=0):
        """Mean pooled AUC over windows per alpha with a bootstrap standard error
        from resampling replications."""
        reps, by_rep = self._index()
        rng = np.random.default_rng(seed)
        samples = [rng.choice(reps, size=len(reps), replace=True) for _ in range(n_boot)]
        out = {}
        for alpha in self.grid.alphas:
            boots = np.array([self._mean_auc(by_rep, model, alpha, s) for s in samples])
            out[alpha] = (self._mean_auc(by_rep, model, alpha, reps), float(np.nanstd(boots, ddof=1)))
        return out

    def mean_auc_difference(self, alpha_hi, alpha_lo, model="mgcp_cox", n_boot=200, seed=0):
        """``mean AUC(alpha_hi) - mean AUC(alpha_lo)`` and its paired bootstrap
        standard error (both alphas share each resample of replications)."""
        reps, by_rep = self._index()
        rng = np.random.default_rng(seed)
        diffs = []
        for _ in range(n_boot):
            s = rng.choice(reps, size=len(reps), replace=True)
            diffs.append(self._mean_auc(by_rep, model, alpha_hi, s) - self._mean_auc(by_rep, model, alpha_lo, s))
        point = self._mean_auc(by_rep, model, alpha_hi, reps) - self._mean_auc(by_rep, model, alpha_lo, reps)
        return point, float(np.nanstd(diffs, ddof=1))


def run_experiment(grid):
    """Run every replication; failures are logged and skipped."""
    seeds = replication_seeds(grid.seed, grid.reps)
    outcomes, mrl, betas, failures = [], [], [], []
    for r, seed in enumerate(seeds):
        try:
            o, m, b = _replication(r, seed, grid)
        except (ValidationError, NumericalError, np.linalg.LinAlgError) as exc:
            logger.warning("replication %d failed: %s", r, exc)
            failures.append(dict(replication=r, error=str(exc)))
            continue
        outcomes += o
        mrl += m
        betas += b
        logger.info("replication %d/%d done", r + 1, grid.reps)
    if len(failures) > grid.max_failure_frac * grid.reps:
        raise NumericalError(f"{len(failures)} of {grid.reps} replications failed",
                             component="run_experiment")
    return ExperimentReport(outcomes=outcomes, mrl=mrl, betas=betas, failures=failures, grid=grid)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_report(report, out_dir):
    """Write report.csv, auc_summary.csv and one roc_<alpha>_<dt>.csv per cell."""
    os.makedirs(out_dir, exist_ok=True)
    mrl_by_key = {(m["replication"], m["alpha"]): m for m in report.mrl}
    rows = []
    for o in report.outcomes:
        m = mrl_by_key.get((o.replication, o.alpha))
        err = m["ae"] if (m is not None and o.model == "mgcp_cox") else ""
        t_star = m["t_star"] if m is not None else ""
        rows.append([o.model, o.alpha, o.dt, o.replication, t_star, o.score, o.label, err])
    atomic_write_text(os.path.join(out_dir, "report.csv"), _csv_text(
        ["model", "alpha", "dt", "replication", "t_star", "score", "label", "mrl_abs_error"], rows))
    table = report.auc_table()
    atomic_write_text(os.path.join(out_dir, "auc_summary.csv"), _csv_text(
        ["model", "alpha", "dt", "n", "n_pos", "auc"],
        [[r["model"], r["alpha"], r["dt"], r["n"], r["n_pos"], r["auc"]] for r in table]))
    for alpha in report.grid.alphas:
        for dt in report.grid.windows:
            pts = []
            for model in MODELS:
                try:
                    curve, _ = roc_auc(report.cell(model, alpha, dt))
                except ValidationError:
                    continue
                pts += [[model, fpr, tpr] for fpr, tpr in curve]
            atomic_write_text(os.path.join(out_dir, f"roc_{alpha:g}_{dt:g}.csv"),
                              _csv_text(["model", "fpr", "tpr"], pts))
    return table
