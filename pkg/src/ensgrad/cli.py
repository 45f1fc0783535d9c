"""Command line front end.

Subcommands:

  bench         run the RMSE/bias benchmark grid, write results.csv
  rastrigin     descend the stretched Rastrigin surface, exact vs blurred
  linear-check  analytic verifications on the bilinear model (PASS/FAIL)
  gradient      one gradient estimate from ensemble CSV files

Exit codes: 0 success, 1 failed checks or partial benchmark failure,
2 invalid configuration or malformed inputs.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .errors import DegenerateEnsembleError, DimensionError, InsufficientSampleError
from .estimators import (
    ESTIMATOR_IDS,
    SUBSAMPLED_IDS,
    CountingObjective,
    EstimatorSpec,
    estimate,
)
from .harness import (
    BenchConfig,
    ConfigError,
    DescentConfig,
    TRAJECTORY_HEADER,
    aggregate,
    run_bench,
    run_rastrigin_demo,
    select_best_lambda,
    trajectory_rows,
    write_results_csv,
)
from .linalg import PinvConfig, tikhonov_pinv
from .objectives import (
    ObjectiveSpec,
    bilinear_grad,
    bilinear_objective,
    hermite_objective,
    rastrigin_blurred,
    rastrigin_eval,
    rastrigin_grad,
)
from .sampling import (
    Ensemble,
    GaussianSpec,
    child_seed,
    draw_ensemble,
    read_ensemble_csv,
    recenter,
    rng_from,
)


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, outputs, notes=()):
    """One manifest.json per output directory: what was run, with which
    configuration (hashed), and which files came out."""
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": command,
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "config": config,
        "outputs": {name: _sha256_file(os.path.join(out_dir, name)) for name in sorted(outputs)},
        "notes": list(notes),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# bench


def _cmd_bench(args):
    if args.print_default_config:
        print(json.dumps(BenchConfig().to_dict(), indent=2, sort_keys=True))
        return 0
    try:
        if args.config:
            with open(args.config) as f:
                raw = json.load(f)
            cfg = BenchConfig.from_dict(raw)
        else:
            cfg = BenchConfig()
        overrides = {}
        if args.trials is not None:
            overrides["n_trials"] = args.trials
        if args.seed is not None:
            overrides["base_seed"] = args.seed
        if overrides:
            cfg = replace(cfg, **overrides)
        cfg.validate()
    except (OSError, json.JSONDecodeError, ConfigError, TypeError) as e:
        print(f"invalid benchmark configuration: {e}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    rows, notes, failures = [], [], []
    cells = [(order, n) for order in cfg.hermite_orders for n in cfg.ensemble_sizes]
    for i, (order, n) in enumerate(cells):
        cell_cfg = replace(cfg, hermite_orders=(order,), ensemble_sizes=(n,))
        try:
            res = run_bench(cell_cfg, workers=args.workers)
            rows.extend(aggregate(res.stats))
            for (s_order, s_n, est), reason in sorted(res.skips.items()):
                notes.append(f"skipped {est} at order={s_order} N={s_n}: {reason}")
        except Exception as e:  # keep going; report partial results
            failures.append(f"order={order} N={n}: {type(e).__name__}: {e}")
        print(f"[{i + 1}/{len(cells)}] order={order} N={n} done", file=sys.stderr)

    rows.sort(key=lambda r: (r.order, r.n, ESTIMATOR_IDS.index(r.estimator), r.lam))
    write_results_csv(os.path.join(args.out, "results.csv"), rows)
    write_results_csv(os.path.join(args.out, "best_lambda.csv"), select_best_lambda(rows))
    outputs = ["results.csv", "best_lambda.csv"]
    if failures:
        notes.append("PARTIAL RESULTS: some grid cells failed")
        notes.extend(f"failed cell {f}" for f in failures)
    write_manifest(args.out, "bench", cfg.to_dict(), outputs, notes)
    if failures:
        print("\n".join(failures), file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# rastrigin


def _write_rows_csv(path, header, rows):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, int) else repr(float(x)) for x in row])


def _cmd_rastrigin(args):
    if args.step < 0 or args.steps < 1:
        print("invalid descent configuration: step must be >= 0, steps >= 1", file=sys.stderr)
        return 2
    cfg = DescentConfig(step=args.step, n_steps=args.steps)
    runs = run_rastrigin_demo(cfg)
    os.makedirs(args.out, exist_ok=True)

    outputs, notes = [], []
    for label in ("exact", "blurred"):
        name = f"trajectories_{label}.csv"
        _write_rows_csv(os.path.join(args.out, name), TRAJECTORY_HEADER, trajectory_rows(runs[label]))
        outputs.append(name)
        for sid, traj in enumerate(runs[label]):
            if traj.aborted:
                notes.append(f"{label} trajectory {sid} aborted on non-finite step")

    # contour grids over the plotted window, one file per surface
    grid = np.linspace(-3.0, 3.0, 121)
    for label, fn in (("exact", rastrigin_eval), ("blurred", rastrigin_blurred)):
        rows = [(repr(float(u1)), repr(float(u2)), repr(float(fn(np.array([u1, u2])))))
                for u1 in grid for u2 in grid]
        name = f"grid_{label}.csv"
        import csv

        with open(os.path.join(args.out, name), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("u1", "u2", "loss"))
            w.writerows(rows)
        outputs.append(name)

    config = {"step": cfg.step, "n_steps": cfg.n_steps, "starts": [list(s) for s in cfg.starts]}
    write_manifest(args.out, "rastrigin", config, outputs, notes)
    final = {
        label: float(np.mean([rastrigin_eval(t.points[-1]) for t in runs[label]]))
        for label in ("exact", "blurred")
    }
    print(f"mean final loss: exact={final['exact']:.6f} blurred={final['blurred']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# linear-check


def _cmd_linear_check(args):
    dims, seeds = args.dims, args.seeds
    if dims < 1 or seeds < 2:
        print("invalid check configuration: dims >= 1, seeds >= 2 (the "
              "unbiasedness bands need a spread)", file=sys.stderr)
        return 2
    n = args.size
    if n < dims + 2:
        print(f"invalid check configuration: size must be >= dims+2 = {dims + 2}", file=sys.stderr)
        return 2

    worst = {"stosag_exact": 0.0, "paired_error_formula": 0.0, "decorr_zero": 0.0,
             "one_sided_equals_stosag": 0.0}
    if args.zero_x_coupling:
        worst["paired_exact"] = 0.0
    band_errs = {"paired": [], "stosag": []}
    u_spec = GaussianSpec(mean=np.zeros(dims), cov=1.0)
    x_spec = GaussianSpec(mean=np.zeros(dims), cov=1.0)
    for k in range(seeds):
        rng = rng_from(child_seed(7041, k))
        a = rng.standard_normal((dims, dims))
        b = rng.standard_normal((dims, dims))
        if args.zero_x_coupling:
            # no x-term at all: the paired estimator loses its error term
            a = np.zeros_like(a)
        x_ens = draw_ensemble(x_spec, n, child_seed(7041, k, 1))
        u_ens = recenter(draw_ensemble(u_spec, n, child_seed(7041, k, 2)))
        obj = bilinear_objective(a, b)
        truth = bilinear_grad(b)
        lam0 = EstimatorSpec(kind="paired", pinv=PinvConfig(0.0))

        paired = estimate(obj, x_ens, u_ens, replace(lam0, kind="paired")).grad
        stosag = estimate(obj, x_ens, u_ens, replace(lam0, kind="stosag")).grad
        one_sided = estimate(obj, x_ens, u_ens, replace(lam0, kind="one_sided")).grad
        decorr = estimate(obj, x_ens, u_ens, replace(lam0, kind="decorr")).grad
        if args.inject_sign_error:
            # deliberately wrong control-term sign: loss(x_n, mu) added, not
            # subtracted, which lands at 2*paired - stosag
            stosag = 2.0 * paired - stosag

        pinv = tikhonov_pinv(u_ens.anomalies, PinvConfig(0.0))
        expected_paired_err = (a @ x_ens.members).sum(axis=0) @ pinv
        worst["stosag_exact"] = max(worst["stosag_exact"], np.abs(stosag - truth).max())
        worst["paired_error_formula"] = max(
            worst["paired_error_formula"], np.abs((paired - truth) - expected_paired_err).max()
        )
        worst["decorr_zero"] = max(worst["decorr_zero"], np.abs(decorr - truth).max())
        worst["one_sided_equals_stosag"] = max(
            worst["one_sided_equals_stosag"],
            np.abs(one_sided - estimate(obj, x_ens, u_ens, replace(lam0, kind="stosag")).grad).max(),
        )
        if args.zero_x_coupling:
            worst["paired_exact"] = max(worst["paired_exact"], np.abs(paired - truth).max())
        # preconditioned forms target 1^T B C_u (C_u = I here); their errors
        # are mean-zero, which the 3-SE band below checks across seeds
        for kind in ("paired", "stosag"):
            pre = estimate(obj, x_ens, u_ens,
                           replace(lam0, kind=kind, precondition=True)).grad
            band_errs[kind].append(pre - truth)

    tols = {
        "stosag_exact": 1e-8,
        "paired_error_formula": 1e-8,
        "decorr_zero": 1e-6,
        "one_sided_equals_stosag": 1e-12,
    }
    if args.zero_x_coupling:
        tols["paired_exact"] = 1e-8
    failed = False
    for name, tol in tols.items():
        ok = worst[name] <= tol
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max |err| = {worst[name]:.3e} (tol {tol:.0e})")
    for kind in ("paired", "stosag"):
        errs = np.array(band_errs[kind])
        se = errs.std(axis=0, ddof=1) / np.sqrt(seeds)
        z = np.abs(errs.mean(axis=0)) / np.where(se > 0, se, np.inf)
        ok = np.all(z <= 3.0)
        failed = failed or not ok
        print(f"{'PASS' if ok else 'FAIL'} unbiased_{kind}_preconditioned: "
              f"max |mean|/SE = {z.max():.2f} (tol 3)")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# gradient


def _values_objective(u_members, values, mu, mean_values):
    """Objective backed by a precomputed value matrix: one column per
    control, one row per x-member (a single row serves the estimators that
    evaluate each control once). Lookups are by exact column identity, so
    only the provided controls (and the mean, when mean values are given)
    can be evaluated."""
    index = {u_members[:, j].tobytes(): j for j in range(u_members.shape[1])}
    row_mode = values.shape[0] == 1

    def lookup_idx(U):
        idx = []
        for j in range(U.shape[1]):
            pos = index.get(np.ascontiguousarray(U[:, j]).tobytes())
            if pos is None:
                raise DimensionError(
                    "this estimator evaluates controls outside the provided "
                    "ensemble; supply --objective instead of --values"
                )
            idx.append(pos)
        return np.array(idx, dtype=int)

    def value_pairs(X, U):
        idx = lookup_idx(U)
        if row_mode:
            return values[0, idx]
        if values.shape[0] != values.shape[1]:
            raise DimensionError(
                "per-pair evaluations need a single-row values file or a "
                f"square table, got shape {values.shape}"
            )
        return values[idx, idx]

    def value_table(X, U):
        if U.shape[1] == 1 and np.array_equal(U[:, 0], mu):
            if mean_values is None:
                raise DimensionError(
                    "this estimator needs values at the mean control; pass --mean-values"
                )
            if mean_values.shape[0] != X.shape[1]:
                raise DimensionError(
                    f"--mean-values has {mean_values.shape[0]} entries, "
                    f"expected one per x-member ({X.shape[1]})"
                )
            return mean_values[:, None]
        idx = lookup_idx(U)
        if row_mode:
            if X.shape[1] == 1:
                return values[:, idx]
            raise DimensionError(
                "this estimator needs the full M-by-N value table, "
                "got a single row"
            )
        if X.shape[1] != values.shape[0]:
            raise DimensionError(
                f"values table has {values.shape[0]} rows, the request "
                f"covers {X.shape[1]} x-members"
            )
        return values[:, idx]

    return ObjectiveSpec(name="values", value=None, value_table=value_table,
                         value_pairs=value_pairs)


def _read_values_matrix(path):
    """Headerless CSV of floats; returns the (rows, cols) matrix."""
    import csv

    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise DimensionError(
                    f"{path}:{lineno}: non-numeric cell; values files are "
                    "headerless CSV matrices"
                )
    if not rows:
        raise InsufficientSampleError(f"{path}: no values")
    if any(len(r) != len(rows[0]) for r in rows):
        raise DimensionError(f"{path}: ragged rows")
    return np.array(rows, dtype=float)


def _named_objective(name, dims):
    if name.startswith("hermite"):
        try:
            order = int(name[len("hermite"):])
        except ValueError:
            raise DimensionError(f"unknown objective {name!r}")
        return hermite_objective(order, dims)
    if name == "rastrigin":
        if dims != 2:
            raise DimensionError(f"rastrigin is 2-D, the control ensemble has {dims} rows")
        return ObjectiveSpec(
            name="rastrigin",
            value=lambda x, u: rastrigin_eval(u),
            grad_u=lambda x, u: rastrigin_grad(u),
        )
    raise DimensionError(f"unknown objective {name!r}; use hermite<order> or rastrigin")


def _cmd_gradient(args):
    try:
        u_members = read_ensemble_csv(args.ensemble_u)
        dims, n_total = u_members.shape
        if args.mean_u is not None:
            mu = np.array([float(t) for t in args.mean_u.split(",")])
            if mu.shape != (dims,):
                raise DimensionError(
                    f"--mean-u has {mu.size} entries, the ensemble has {dims} dims"
                )
        else:
            mu = u_members.mean(axis=1)

        m = n_total // 2 if args.estimator in SUBSAMPLED_IDS else n_total
        if args.ensemble_x is not None:
            x_members = read_ensemble_csv(args.ensemble_x)
            # pooled layouts interleave pairs, so the count must match here;
            # the paired family checks M == N itself
            if args.estimator in SUBSAMPLED_IDS and x_members.shape[1] != m:
                raise DimensionError(
                    f"--ensemble-x has {x_members.shape[1]} members, "
                    f"estimator {args.estimator} expects {m}"
                )
        else:
            x_members = np.zeros((1, m))

        if (args.values is None) == (args.objective is None):
            print("pass exactly one of --values or --objective", file=sys.stderr)
            return 2
        if args.values is not None:
            if args.estimator == "avg_grad":
                raise DimensionError(
                    "avg_grad differentiates the objective; a values file "
                    "cannot supply gradients, use --objective"
                )
            values = _read_values_matrix(args.values)
            if values.shape[1] != n_total:
                raise DimensionError(
                    f"--values has {values.shape[1]} columns, expected one per "
                    f"control member ({n_total})"
                )
            if values.shape[0] not in (1, x_members.shape[1]):
                raise DimensionError(
                    f"--values has {values.shape[0]} rows, expected one per "
                    f"x-member ({x_members.shape[1]}) or a single row"
                )
            if args.mean_values:
                mv = _read_values_matrix(args.mean_values)
                if 1 not in mv.shape:
                    raise DimensionError(
                        f"--mean-values must be a single row or column, got "
                        f"shape {mv.shape}"
                    )
                mean_values = mv.ravel()
            else:
                mean_values = None
            spec_obj = _values_objective(u_members, values, mu, mean_values)
        else:
            spec_obj = _named_objective(args.objective, dims)

        u_ens = Ensemble(members=u_members, true_mean=mu,
                         recentred=bool(np.allclose(u_members.mean(axis=1), mu)))
        x_ens = Ensemble(members=x_members, true_mean=x_members.mean(axis=1))
        est_spec = EstimatorSpec(
            kind=args.estimator,
            pinv=PinvConfig(args.lam),
            precondition=args.precondition,
        )
        obj = CountingObjective(spec_obj)
        got = estimate(obj, x_ens, u_ens, est_spec)
    except (OSError, ValueError, DimensionError, InsufficientSampleError,
            DegenerateEnsembleError) as e:
        print(f"gradient: {e}", file=sys.stderr)
        return 2

    print(",".join(repr(float(g)) for g in got.grad))
    print(f"evals={got.evals} cached={got.cached}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ensgrad", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run the RMSE/bias benchmark grid")
    b.add_argument("--config", help="JSON benchmark configuration")
    b.add_argument("--out", default="ensgrad_bench", help="output directory")
    b.add_argument("--trials", type=int, help="override n_trials")
    b.add_argument("--seed", type=int, help="override base_seed")
    b.add_argument("--workers", type=int, default=1, help="process count")
    b.add_argument("--print-default-config", action="store_true",
                   help="print the default configuration as JSON and exit")
    b.set_defaults(func=_cmd_bench)

    r = sub.add_parser("rastrigin", help="steepest-descent demo, exact vs blurred")
    r.add_argument("--out", default="ensgrad_rastrigin", help="output directory")
    r.add_argument("--step", type=float, default=0.012, help="descent step size")
    r.add_argument("--steps", type=int, default=400, help="descent step count")
    r.set_defaults(func=_cmd_rastrigin)

    c = sub.add_parser("linear-check", help="analytic verifications on the bilinear model")
    c.add_argument("--dims", type=int, default=5)
    c.add_argument("--seeds", type=int, default=100)
    c.add_argument("--size", type=int, default=16, help="ensemble size N")
    c.add_argument("--inject-sign-error", action="store_true",
                   help="flip the control-term sign to prove the check catches it")
    c.add_argument("--zero-x-coupling", action="store_true",
                   help="zero the x-coupling matrix; without it the paired "
                        "estimator is exact too, and an extra line checks that")
    c.set_defaults(func=_cmd_linear_check)

    g = sub.add_parser("gradient", help="one gradient estimate from ensemble CSVs")
    g.add_argument("--ensemble-u", required=True, help="control ensemble CSV (members as rows)")
    g.add_argument("--ensemble-x", help="uncertainty ensemble CSV")
    g.add_argument("--values", help="headerless CSV value matrix: one column per "
                   "control member, one row per x-member (or a single row when "
                   "each control is evaluated once)")
    g.add_argument("--mean-values", help="headerless CSV row of values at the mean "
                   "control, one per x-member (stosag and relatives)")
    g.add_argument("--objective", help="named objective: hermite<order> or rastrigin")
    g.add_argument("--estimator", required=True, choices=ESTIMATOR_IDS)
    g.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="relative Tikhonov damping")
    g.add_argument("--mean-u", help="comma-separated true control mean (default: sample mean)")
    g.add_argument("--precondition", action="store_true",
                   help="premultiply by the sample control covariance")
    g.set_defaults(func=_cmd_gradient)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
