"""Command-line interface: ``mgcp-cox {simulate,fit,predict,evaluate,gradcheck}``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from mgcp_cox import dataio
from mgcp_cox.datagen import GenConfig, gen_dataset
from mgcp_cox.errors import NumericalError, ValidationError
from mgcp_cox.evaluation import ExperimentGrid, run_experiment, write_report
from mgcp_cox.inference import FitConfig, default_pseudo_inputs, fit, grad_check, initial_params, make_problem

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _gen_args(p):
    d = GenConfig()
    g = p.add_argument_group("generator")
    g.add_argument("--units", type=int, default=d.N, help="number of units N")
    g.add_argument("--censor-frac", type=float, default=d.censor_frac)
    g.add_argument("--noise-var", type=float, default=d.noise_var)
    g.add_argument("--a-min", type=float, default=d.a_range[0], help="lower end of the curvature mean range")
    g.add_argument("--a-max", type=float, default=d.a_range[1], help="upper end of the curvature mean range")
    g.add_argument("--shared-a", action="store_true", help="draw one curvature mean per dataset")
    g.add_argument("--weibull-lambda", type=float, default=d.weibull_lambda)
    g.add_argument("--weibull-rho", type=float, default=d.weibull_rho)
    g.add_argument("--beta-true", type=float, default=d.beta_true)
    g.add_argument("--gamma-true", type=float, default=d.gamma_true)
    g.add_argument("--w-prob", type=float, default=d.w_prob)
    g.add_argument("--t-max", type=float, default=d.t_max, help="sampling horizon")
    g.add_argument("--grid-points", type=int, default=d.grid_points)


def _gen_config(a):
    return GenConfig(
        N=a.units, censor_frac=a.censor_frac, noise_var=a.noise_var, a_range=(a.a_min, a.a_max),
        a_per_unit=not a.shared_a, weibull_lambda=a.weibull_lambda, weibull_rho=a.weibull_rho,
        beta_true=a.beta_true, gamma_true=a.gamma_true, w_prob=a.w_prob, t_max=a.t_max,
        grid_points=a.grid_points, seed=a.seed,
    )


def _fit_args(p):
    d = FitConfig()
    g = p.add_argument_group("fitting")
    g.add_argument("--pseudo-inputs", type=int, default=d.M, help="number of pseudo-inputs M")
    g.add_argument("--latent", type=int, default=d.K, help="number of latent functions K")
    g.add_argument("--max-iters", type=int, default=d.max_iters)
    g.add_argument("--rel-tol", type=float, default=d.rel_tol)
    g.add_argument("--lik-nodes", type=int, default=d.lik_nodes, help="Gauss-Legendre nodes for hazard integrals")
    g.add_argument("--mrl-nodes", type=int, default=d.mrl_nodes, help="Gauss-Legendre nodes for remaining life")
    g.add_argument("--gradient", choices=("analytic", "central"), default=d.gradient)
    g.add_argument("--fd-step", type=float, default=d.fd_step)
    g.add_argument("--restarts", type=int, default=d.restarts)
    g.add_argument("--jitter", type=float, default=d.jitter)
    g.add_argument("--mgf", choices=("exact", "linear"), default=d.mgf,
                   help="form of the normal MGF exponent in the hazard expectation")
    g.add_argument("--optimize-pseudo-inputs", action="store_true")
    g.add_argument("--baseline", choices=("spline", "parametric"), default=d.baseline)
    g.add_argument("--predict-mgf-correction", action="store_true",
                   help="include the posterior variance when predicting hazards")
    g.add_argument("--no-test-unit-cox", action="store_true",
                   help="leave the partially observed unit out of the Cox likelihood")


def _fit_config(a):
    return FitConfig(
        M=a.pseudo_inputs, K=a.latent, max_iters=a.max_iters, rel_tol=a.rel_tol,
        lik_nodes=a.lik_nodes, mrl_nodes=a.mrl_nodes, seed=a.seed, gradient=a.gradient,
        fd_step=a.fd_step, test_unit_cox=not a.no_test_unit_cox, restarts=a.restarts,
        jitter=a.jitter, mgf=a.mgf, optimize_pseudo_inputs=a.optimize_pseudo_inputs,
        baseline=a.baseline, predict_mgf_correction=a.predict_mgf_correction,
    )


def _data_args(p, required=True):
    g = p.add_argument_group("data")
    g.add_argument("--longitudinal", help="longitudinal CSV (unit_id,time,value)")
    g.add_argument("--survival", help="survival CSV (unit_id,event_time,event_indicator,w...)")
    g.add_argument("--cmapss", help="C-MAPSS whitespace-delimited training file")
    g.add_argument("--sensor", default="s2", help="C-MAPSS sensor column")
    g.add_argument("--unit-limit", type=int, default=None, help="keep the first N C-MAPSS units")
    p.set_defaults(_data_required=required)


def _load_data(a):
    if a.cmapss:
        return dataio.ingest_cmapss(a.cmapss, a.sensor, a.unit_limit)
    if a.longitudinal and a.survival:
        return dataio.ingest_longitudinal_csv(a.longitudinal, a.survival)
    if a._data_required:
        raise ValidationError("give --longitudinal and --survival, or --cmapss")
    return None


def build_parser():
    parser = _Parser(prog="mgcp-cox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--prefix", default="", help="file name prefix")
    _gen_args(p)

    p = sub.add_parser("fit", help="fit the joint model and save it as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--test-unit", default=None, help="id of a partially observed unit")
    _data_args(p)
    _fit_args(p)

    p = sub.add_parser("predict", help="survival curve, window probability and remaining life")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; prediction is deterministic")
    p.add_argument("--model", required=True)
    p.add_argument("--unit", default=None, help="unit id (default: the model's test unit)")
    p.add_argument("--t-star", type=float, required=True, help="prediction time")
    p.add_argument("--dt", type=float, required=True, help="window length")
    p.add_argument("--horizon", type=float, default=None, help="curve horizon (default: dt)")
    p.add_argument("--n-points", type=int, default=101)
    p.add_argument("--horizon-cap", type=float, default=None,
                   help="upper integration limit for remaining life (default: t* + 3 x longest lifetime)")
    p.add_argument("--out", default=None, help="survival curve CSV path")

    p = sub.add_parser("evaluate", help="replicated windowed-prediction experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alphas", type=_floats, default=(0.3, 0.5))
    p.add_argument("--windows", type=_floats, default=(12.0, 15.0, 20.0))
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--max-failure-frac", type=float, default=0.2)
    p.add_argument("--out-dir", default="report")
    _data_args(p, required=False)
    _gen_args(p)
    _fit_args(p)

    p = sub.add_parser("gradcheck", help="compare analytic and central-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    _data_args(p, required=False)
    _gen_args(p)
    _fit_args(p)
    p.set_defaults(units=5)
    return parser


# ---------------------------------------------------------------------------
# commands


def _cmd_simulate(a):
    units = gen_dataset(_gen_config(a))
    os.makedirs(a.out_dir, exist_ok=True)
    lon = os.path.join(a.out_dir, f"{a.prefix}longitudinal.csv")
    surv = os.path.join(a.out_dir, f"{a.prefix}survival.csv")
    dataio.write_dataset_csv(units, lon, surv)
    n_cens = sum(1 for u in units if u.delta == 0)
    print(f"wrote {len(units)} units ({n_cens} censored) to {lon} and {surv}")


def _cmd_fit(a):
    data = _load_data(a)
    model = fit(data.units, _fit_config(a), test_unit=a.test_unit)
    model.data_summary["provenance"] = data.provenance
    model.data_summary["standardization"] = data.standardization
    dataio.save_model(model, a.out)
    cp = model.params.cox
    print(f"status={model.status} objective={float(model.elbo_trace[-1])!r} beta={float(cp.beta)!r} -> {a.out}")


def _cmd_predict(a):
    model = dataio.load_model(a.model)
    unit = a.unit if a.unit is not None else model.data_summary.get("test_unit")
    if unit is None:
        raise ValidationError("--unit is required when the model has no test unit")
    if a.dt < 0:
        raise ValidationError("--dt must be non-negative")
    p = model.event_probability(unit, a.t_star, a.dt)
    mrl = model.mean_remaining_life(unit, a.t_star, a.horizon_cap)
    if a.out:
        horizon = a.dt if a.horizon is None else a.horizon
        curve = model.survival_curve(unit, a.t_star, horizon, a.n_points)
        rows = "".join(f"{float(t)!r},{float(s)!r}\n" for t, s in zip(curve.times, curve.survival))
        dataio.atomic_write_text(a.out, "time,survival\n" + rows)
    print(f"unit={unit} t_star={a.t_star!r} dt={a.dt!r} probability={float(p)!r} mrl={float(mrl)!r}")


def _cmd_evaluate(a):
    data = _load_data(a)
    grid = ExperimentGrid(
        alphas=a.alphas, windows=a.windows, reps=a.reps, seed=a.seed, gen=_gen_config(a),
        fit=_fit_config(a), units=None if data is None else data.units,
        max_failure_frac=a.max_failure_frac,
    )
    report = run_experiment(grid)
    write_report(report, a.out_dir)
    for row in report.auc_table():
        print(f"{row['model']:>8} alpha={row['alpha']:g} dt={row['dt']:g} auc={row['auc']:.4f}")
    print(f"{len(report.failures)} failed replications; report in {a.out_dir}")


def _cmd_gradcheck(a):
    data = _load_data(a)
    units = gen_dataset(_gen_config(a)) if data is None else data.units
    cfg = _fit_config(a)
    Z = default_pseudo_inputs(units, cfg.M)
    prob = make_problem(units, Z, cfg)
    params = initial_params(units, cfg, np.random.default_rng(a.seed), prob.t_min)
    err = grad_check(params, units, cfg, Z, step=a.step)
    ok = err < a.tol
    print(json.dumps({"max_rel_error": err, "step": a.step, "tol": a.tol, "ok": bool(ok)}))
    if not ok:
        raise NumericalError(f"gradient mismatch {err:.3e} exceeds {a.tol:g}", component="gradcheck")


_COMMANDS = dict(simulate=_cmd_simulate, fit=_cmd_fit, predict=_cmd_predict,
                 evaluate=_cmd_evaluate, gradcheck=_cmd_gradcheck)


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[a.command](a)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
