"""Command line interface: ``sidds {simulate,identify,crlb,mc}``.

Exit codes: 0 success, 1 usage error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .basis import enumerate_basis, linear_basis
from .crlb import crlb_bound, write_bound_csv
from .findiff import make_findiff
from .harness import METHODS, ExperimentConfig, run_sweep, write_trials_csv
from .integrate import integrate_trajectory, read_trajectory_csv, write_trajectory_csv
from .lsoi import lsoi_solve, weighted_lsoi_solve, whitening_operator
from .noise import NoiseModel, inverse_weight, sample_noise
from .problems import PROBLEMS, get_problem, vanderpol_cycle_point
from .solver import SiddsProblem, SolverOptions, sidds_solve

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _noise_args(p):
    p.add_argument("--sigma", type=float, default=0.0, help="noise standard deviation (default 0)")
    p.add_argument("--rho", type=float, default=0.0,
                   help="correlation of the first two coordinates; nonzero selects correlated noise")


def _noise(args) -> NoiseModel:
    return NoiseModel("correlated" if args.rho else "iid", args.sigma, args.rho)


def _x0(args, prob):
    if args.x0 is None:
        return prob.x0
    if args.x0 == "limit_cycle":
        if prob.name != "vanderpol":
            raise UsageError("--x0 limit_cycle is only defined for vanderpol")
        return vanderpol_cycle_point()
    try:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    except ValueError as err:
        raise UsageError(f"bad --x0 {args.x0!r}: {err}") from err
    if x0.size != prob.dim:
        raise UsageError(f"--x0 needs {prob.dim} comma separated values")
    return x0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sidds", description="Identify sparse polynomial dynamics from noisy samples.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{simulate,identify,crlb,mc}", parser_class=_Parser)
    sub.required = True
    problems = sorted(PROBLEMS)

    p = sub.add_parser("simulate", help="integrate a test problem and write t,x...,y... as CSV",
                       description="Integrate a registered test problem and add seeded Gaussian noise.")
    p.add_argument("--problem", required=True, choices=problems)
    p.add_argument("--m", type=int, default=None, help="number of samples (default: problem default)")
    p.add_argument("--delta", type=float, default=None, help="sample spacing (default: problem default)")
    p.add_argument("--x0", default=None, help="comma separated initial state, or 'limit_cycle' for vanderpol")
    _noise_args(p)
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", default=None, help="output CSV path (default: stdout)")

    p = sub.add_parser("identify", help="estimate coefficients from a CSV and print them as JSON",
                       description="Run one method on the y columns of a CSV written by 'simulate' "
                                   "(x columns are used when y columns are absent).")
    p.add_argument("--input", required=True, help="CSV with columns t,x1..,y1..")
    p.add_argument("--problem", required=True, choices=problems, help="selects the basis and defaults")
    p.add_argument("--method", default="sidds", choices=METHODS)
    p.add_argument("--degree", type=int, default=None, help="total polynomial degree of the basis")
    p.add_argument("--points", type=int, default=None, help="finite-difference stencil width")
    p.add_argument("--alpha", type=float, default=None, help="penalty weight (sidds_l0 default: problem value)")
    p.add_argument("--p", type=float, default=0.0, help="penalty order in [0, 2] (default 0)")
    p.add_argument("--tau", type=float, default=None, help="truncation threshold")
    p.add_argument("--oversample", type=int, default=1, help="integration steps per sample interval")
    p.add_argument("--weight", choices=("identity", "inverse"), default="identity",
                   help="SIDDS misfit weight: identity or inverse noise covariance")
    _noise_args(p)
    p.add_argument("--options", default=None, help="solver options as a JSON object")

    p = sub.add_parser("crlb", help="write the constrained Cramer-Rao bound as CSV",
                       description="Diagonal of the coefficient bound and its trace.")
    p.add_argument("--problem", required=True, choices=problems)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--x0", default=None)
    _noise_args(p)
    p.add_argument("--fixed-sparsity", action="store_true", help="restrict to the true support")
    p.add_argument("--out", default=None, help="output CSV path (default: stdout)")

    p = sub.add_parser("mc", help="run a Monte Carlo sweep from a JSON config",
                       description="Percentile bands (F25, F50, F75) of the coefficient error per sweep "
                                   "value.  The worker count comes from --workers or SIDDS_WORKERS.")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", default=None, help="sweep CSV path (default: stdout)")
    p.add_argument("--trials-out", default=None, help="optional per-trial CSV")
    p.add_argument("--workers", type=int, default=None)
    return parser


def cmd_simulate(args) -> int:
    prob = get_problem(args.problem)
    m = args.m if args.m is not None else prob.m
    delta = args.delta if args.delta is not None else prob.delta
    if m < 2 or delta <= 0:
        raise UsageError("need --m >= 2 and --delta > 0")
    traj = integrate_trajectory(prob.field, _x0(args, prob), m, delta)
    y = traj.vector + sample_noise(_noise(args), m, prob.dim, args.seed)
    write_trajectory_csv(args.out or sys.stdout, traj, y)
    return EXIT_OK


def cmd_identify(args) -> int:
    prob = get_problem(args.problem)
    try:
        t, X, Y = read_trajectory_csv(args.input)
    except (OSError, ValueError, StopIteration) as err:
        raise UsageError(f"cannot read {args.input}: {err}") from err
    data = Y if Y is not None else X
    if data is None or data.shape[1] != prob.dim:
        raise UsageError(f"input needs {prob.dim} state columns")
    if t.size < 3:
        raise UsageError("input needs at least 3 rows")
    delta = float(np.mean(np.diff(t)))
    if args.degree is None:
        spec = prob.spec
    else:
        spec = linear_basis(prob.dim) if args.degree == 1 and prob.name == "sho" else enumerate_basis(prob.dim, args.degree)
    points = args.points if args.points is not None else prob.points
    m = data.shape[0]
    noise = _noise(args)
    opts = SolverOptions.from_dict(json.loads(args.options)) if args.options else SolverOptions()
    status = "ok"
    if args.method in ("lsoi", "wlsoi"):
        D = make_findiff(m, delta, points)
        if args.method == "lsoi" or noise.sigma == 0:
            C = lsoi_solve(data, D, spec)
        else:
            if X is None or spec is not prob.spec:
                raise UsageError("wlsoi needs the x columns and the problem basis (whitening uses the truth)")
            C = weighted_lsoi_solve(data, D, spec, whitening_operator(X, prob.field.C, D, spec, noise))
    else:
        alpha = args.alpha if args.alpha is not None else (prob.alpha if args.method == "sidds_l0" else 0.0)
        M = inverse_weight(noise, m, prob.dim) if args.weight == "inverse" and noise.sigma > 0 else None
        problem = SiddsProblem.single(data, spec, delta, M=M, points=points, p=args.p, alpha=alpha,
                                      tau=args.tau, oversample_factor=args.oversample)
        res = sidds_solve(problem, opts)
        C, status = res.coeffs, res.report.status
        if status == "failed" or not np.all(np.isfinite(C.matrix)):
            print(json.dumps({"status": "failed"}))
            return EXIT_SOLVER
    out = {"method": args.method, "status": status, "basis": spec.labels(), "coefficients": C.matrix.tolist()}
    print(json.dumps(out))
    return EXIT_OK


def cmd_crlb(args) -> int:
    prob = get_problem(args.problem)
    if args.sigma <= 0:
        raise UsageError("crlb needs --sigma > 0")
    m = args.m if args.m is not None else prob.m
    delta = args.delta if args.delta is not None else prob.delta
    mask = prob.true_mask if args.fixed_sparsity else None
    res = crlb_bound(prob.field, _x0(args, prob), m, delta, _noise(args), mask=mask)
    labels = spec_labels(prob, mask)
    write_bound_csv(args.out or sys.stdout, res, labels)
    return EXIT_OK


def spec_labels(prob, mask=None) -> list[str]:
    """``'<monomial>:dx<i>'`` for every (free) coefficient in row-major order."""
    names = [f"{b}:dx{i + 1}" for b in prob.spec.labels() for i in range(prob.dim)]
    if mask is None:
        return names
    return [n for n, keep in zip(names, np.asarray(mask).reshape(-1)) if keep]


def cmd_mc(args) -> int:
    try:
        config = ExperimentConfig.load(args.config)
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise UsageError(f"bad config {args.config}: {err}") from err
    rows = run_sweep(config, args.out or sys.stdout, workers=args.workers)
    if args.trials_out:
        write_trials_csv(args.trials_out, rows)
    if all(r.n_trials == 0 for r in rows):
        return EXIT_SOLVER
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "crlb": cmd_crlb, "mc": cmd_mc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help / --version
        return int(err.code or 0)
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as err:
        print(f"sidds: solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError) as err:  # bad option values, malformed JSON
        print(f"sidds: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
