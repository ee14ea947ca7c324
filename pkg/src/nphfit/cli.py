"""Command-line interface.

All flags are checked with the standard library only, before the numeric
stack is imported, so bad invocations fail fast and write nothing.

Exit codes: 0 success (fits converged), 2 fit stopped at ``--max-iters``
(outputs still written), 1 error.
"""

import argparse
import csv
import os
import re
import sys

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_FAMILY_RE = re.compile(rf"^(?:(?:geom-pareto|disc-weibull):c={_NUM}|zeta|disc-lognormal)$")
_TARGET_RE = re.compile(
    rf"^(?:loggamma:alpha={_NUM},beta={_NUM}|weibull:lambda={_NUM},p={_NUM}"
    rf"|lognormal:mu={_NUM},sigma={_NUM}|table:.+)$")
GRID_POINTS = 400


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"expected a positive finite number, got {text!r}")
    return v


def _probability(text):
    v = _positive_float(text)
    if not v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text!r}")
    return v


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def _family(text):
    if not _FAMILY_RE.match(text.strip()):
        raise argparse.ArgumentTypeError(
            f"bad family {text!r}; use geom-pareto:c=<c>, zeta, disc-weibull:c=<c> or disc-lognormal")
    return text.strip()


def _target(text):
    if not _TARGET_RE.match(text.strip()):
        raise argparse.ArgumentTypeError(
            f"bad target {text!r}; use loggamma:alpha=<a>,beta=<b>, weibull:lambda=<l>,p=<p>, "
            "lognormal:mu=<m>,sigma=<s> or table:<path>")
    return text.strip()


def _bin_spec(text):
    m = re.match(rf"^({_NUM}):(\d+)$", text.strip())
    if not m or float(m.group(1)) <= 0 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError(f"--bin expects T:K with T > 0 and K >= 1, got {text!r}")
    return float(m.group(1)), int(m.group(2))


def _add_em_flags(p):
    p.add_argument("--family", type=_family, required=True, help="scaling family spec")
    p.add_argument("--phases", type=_positive_int, required=True, help="number of phases p")
    p.add_argument("--fix-theta", type=_float_list, help="hold the scaling parameter fixed")
    p.add_argument("--restarts", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rel-tol", type=_positive_float, default=1e-8)
    p.add_argument("--max-iters", type=_positive_int, default=5000)
    p.add_argument("--trunc-eps", type=_probability, default=1e-12)
    p.add_argument("--i-max", type=_positive_int, default=10_000, help="level cap")
    p.add_argument("--out", required=True, help="output stem")


def build_parser():
    parser = _Parser(prog="nphfit", description="Fit, evaluate and simulate NPH models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit exact or weighted data")
    p.add_argument("--data", required=True, help="CSV with header y or y,weight")
    p.add_argument("--bin", type=_bin_spec, help="histogram the body below T into K bins (T:K)")
    p.add_argument("--erlang", action="store_true",
                   help="use the Erlang-mixture fast path with q = --phases")
    _add_em_flags(p)

    p = sub.add_parser("fit-censored", help="fit exact plus censored data")
    p.add_argument("--exact", help="CSV with header y or y,weight")
    p.add_argument("--censored", help="CSV with header lower,upper,weight")
    _add_em_flags(p)

    p = sub.add_parser("fit-dist", help="fit a known distribution")
    p.add_argument("--target", type=_target, required=True)
    p.add_argument("--nodes", type=_positive_int, default=2000, help="quadrature nodes K")
    _add_em_flags(p)

    p = sub.add_parser("simulate", help="draw from a model")
    p.add_argument("--model", required=True)
    p.add_argument("-n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="density/survival at points, or quantiles")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--at", type=_float_list, help="comma-separated y values")
    g.add_argument("--quantile", type=_float_list, help="comma-separated levels in [0, 1)")
    return parser


def _check_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")


def _check_out(stem):
    parent = os.path.dirname(os.path.abspath(stem))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")


def _validate(args):
    """Filesystem and cross-flag checks that need no numerics."""
    if args.command == "fit":
        _check_file(args.data, "data")
        _check_out(args.out)
    elif args.command == "fit-censored":
        if not (args.exact or args.censored):
            raise UsageError("fit-censored needs --exact and/or --censored")
        for path, what in ((args.exact, "exact data"), (args.censored, "censored data")):
            if path:
                _check_file(path, what)
        _check_out(args.out)
    elif args.command == "fit-dist":
        if args.target.startswith("table:"):
            _check_file(args.target[len("table:"):], "quantile table")
        _check_out(args.out)
    elif args.command in ("simulate", "eval"):
        _check_file(args.model, "model")
        if args.command == "eval" and args.quantile:
            if any(not 0 <= u < 1 for u in args.quantile):
                raise UsageError("--quantile levels must lie in [0, 1)")
        if args.command == "eval" and args.at and any(not y >= 0 for y in args.at):
            raise UsageError("--at values must be >= 0")
    if getattr(args, "fix_theta", None) is not None:
        n = 2 if args.family.startswith(("disc-weibull", "disc-lognormal")) else 1
        if len(args.fix_theta) != n:
            raise UsageError(f"--fix-theta for {args.family} needs {n} value(s)")


def _threads():
    raw = os.environ.get("NPHFIT_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NPHFIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("NPHFIT_THREADS must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# commands (numeric imports happen here)

def _config(args):
    from .em_fit import EmConfig
    return EmConfig(rel_tol=args.rel_tol, max_iters=args.max_iters, restarts=args.restarts,
                    seed=args.seed, trunc_eps=args.trunc_eps, fix_theta=args.fix_theta)


def _family_obj(args):
    from .scaling import parse_family
    fam = parse_family(args.family, i_max=args.i_max)
    if args.fix_theta is not None:
        fam = parse_family(args.family, theta=args.fix_theta, theta_fixed=True, i_max=args.i_max)
    return fam


def _load_any(path):
    """Exact or weighted CSV, chosen by header."""
    from .data_io import load_csv
    with open(path, newline="") as fh:
        header = fh.readline().strip().replace(" ", "")
    return load_csv(path, "weighted" if header == "y,weight" else "exact")


def _write_outputs(stem, result, upper, metadata, out=None):
    out = out or sys.stdout
    import numpy as np
    from .data_io import save_model, write_curve, write_trace
    model = result.model
    meta = dict(metadata, loglik=result.loglik, iterations=result.iterations,
                converged=result.converged, best_restart=result.diagnostics.get("best_restart"),
                truncation_capped=bool(result.diagnostics.get("truncation_capped", False)))
    save_model(model, stem + ".nph", meta)
    write_trace(stem + ".trace.csv", result)
    grid = np.linspace(0.0, upper, GRID_POINTS)
    write_curve(stem + ".density.csv", grid, model.density(grid))
    write_curve(stem + ".survival.csv", grid, model.survival(grid))
    theta = ", ".join(f"{v:.6g}" for v in model.scaling.theta)
    print(f"loglik {result.loglik:.10g}", file=out)
    print(f"theta ({theta})", file=out)
    print(f"iterations {result.iterations} converged {str(result.converged).lower()}", file=out)
    if meta["truncation_capped"]:
        print(f"warning: level truncation reached the cap of {model.scaling.i_max}", file=out)
    return 0 if result.converged else 2


def _weighted_quantile(values, weights, q):
    import numpy as np
    order = np.argsort(values)
    cw = np.cumsum(weights[order])
    return float(values[order][min(np.searchsorted(cw, q * cw[-1]), values.size - 1)])


def cmd_fit(args):
    from .data_io import bin_body_tail
    from .em_fit import fit, fit_erlang_mixture
    data = _load_any(args.data)
    meta = {"command": "fit", "data": args.data, "family": args.family, "phases": args.phases}
    if args.bin:
        T_split, K = args.bin
        data = bin_body_tail(data, T_split, K)
        meta["bin"] = f"{T_split:g}:{K}"
    fam, config = _family_obj(args), _config(args)
    if args.erlang:
        result = fit_erlang_mixture(data, fam, args.phases, config)
    else:
        result = fit(data, fam, args.phases, config)
    upper = 2.0 * _weighted_quantile(data.y, data.w, 0.99)
    return _write_outputs(args.out, result, upper, meta)


def cmd_fit_censored(args):
    import numpy as np
    from .censoring import fit_censored
    from .data_io import load_csv
    from .errors import DataError
    from .observations import Dataset
    data = Dataset()
    if args.exact:
        data = data.combine(_load_any(args.exact))
    if args.censored:
        data = data.combine(load_csv(args.censored, "censored"))
    if len(data) == 0:
        raise DataError("no observations")
    result = fit_censored(data, _family_obj(args), args.phases, _config(args))
    ends = np.concatenate([data.y, data.lower, data.upper[np.isfinite(data.upper)]])
    upper = 2.0 * float(np.quantile(ends, 0.99)) if ends.size else 1.0
    meta = {"command": "fit-censored", "exact": args.exact, "censored": args.censored,
            "family": args.family, "phases": args.phases}
    return _write_outputs(args.out, result, max(upper, 1e-12), meta)


def cmd_fit_dist(args):
    import numpy as np
    from .data_io import write_curve
    from .kl_fit import fit_distribution, parse_target
    H = parse_target(args.target)
    result = fit_distribution(H, _family_obj(args), args.phases, args.nodes, _config(args))
    upper = 2.0 * float(H.quantile(0.99))
    grid = np.linspace(0.0, upper, GRID_POINTS)
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.where(grid > 0, H.pdf(np.maximum(grid, 1e-300)), np.nan)
    with open(args.out + ".target.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "density", "survival"])
        surv = np.asarray(H.survival(grid), dtype=float)
        for a, b, c in zip(grid, dens, surv):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])
    meta = {"command": "fit-dist", "target": args.target, "nodes": args.nodes,
            "family": args.family, "phases": args.phases}
    return _write_outputs(args.out, result, upper, meta)


def cmd_simulate(args, out=None):
    out = out or sys.stdout
    from .data_io import load_model
    model = load_model(args.model)
    out.write("y\n")
    for v in model.simulate(args.n, args.seed):
        out.write(f"{float(v)!r}\n")
    return 0


def cmd_eval(args, out=None):
    out = out or sys.stdout
    import numpy as np
    from .data_io import load_model
    from .nph_model import model_quantile
    model = load_model(args.model)
    if args.at is not None:
        y = np.array(args.at)
        out.write("y,density,survival\n")
        for a, d, s in zip(y, model.density(y), model.survival(y)):
            out.write(f"{float(a)!r},{float(d)!r},{float(s)!r}\n")
    else:
        u = np.array(args.quantile)
        q = model_quantile(model, u)
        out.write("u,quantile,survival\n")
        for a, b, s in zip(u, q, model.survival(q)):
            out.write(f"{float(a)!r},{float(b)!r},{float(s)!r}\n")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "fit-censored": cmd_fit_censored,
    "fit-dist": cmd_fit_dist,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _validate(args)
        _threads()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"nphfit: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # map library errors to a message and exit 1
        from .errors import NphError
        if isinstance(exc, (NphError, OSError)):
            print(f"nphfit: error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
