"""Monte Carlo experiments: configuration, single trials, percentile sweeps."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .crlb import crlb_bound
from .findiff import make_findiff
from .integrate import VectorField, integrate_trajectory
from .lsoi import lsoi_solve, weighted_lsoi_solve, whitening_operator
from .noise import NoiseModel, WeightMatrix, inverse_weight, sample_noise
from .problems import TestProblem, get_problem, vanderpol_cycle_point
from .solver import SiddsProblem, SolveReport, SolverOptions, sidds_solve

__all__ = [
    "METHODS",
    "SWEEP_VARIABLES",
    "WORKERS_ENV",
    "ExperimentConfig",
    "TrialRecord",
    "SweepRow",
    "make_data",
    "run_trial",
    "run_trials",
    "run_sweep",
    "percentiles",
    "write_sweep_csv",
    "read_sweep_csv",
    "write_trials_csv",
]

log = logging.getLogger(__name__)

METHODS = ("lsoi", "wlsoi", "sidds", "sidds_l0")
SWEEP_VARIABLES = ("sigma", "m", "rho", "delta", "stencil", "oversample")
WORKERS_ENV = "SIDDS_WORKERS"


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment, optionally swept over a single variable.

    ``None`` for ``m``, ``delta``, ``points`` or ``alpha`` means the problem
    default.  ``weight`` selects ``M = I`` (``"identity"``) or
    ``M = Sigma^{-1}`` (``"inverse"``) for SIDDS.  ``x0="limit_cycle"``
    starts Van der Pol on its limit cycle.  ``metric`` is the error reduced
    to percentiles: ``c_err`` (2-norm) or ``c_err_max`` (max-norm).
    """

    problem: str = "sho"
    method: str = "sidds"
    noise: NoiseModel = field(default_factory=NoiseModel)
    trials: int = 100
    seed: int = 0
    m: int | None = None
    delta: float | None = None
    points: int | None = None
    oversample: int = 1
    alpha: float | None = None
    p: float = 0.0
    tau: float | None = None
    weight: str = "identity"
    fixed_sparsity: bool = False
    x0: object = None
    options: dict = field(default_factory=dict)
    sweep_variable: str | None = None
    sweep_values: tuple = ()
    crlb: bool = False
    metric: str = "c_err"

    def __post_init__(self):
        get_problem(self.problem)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.weight not in ("identity", "inverse"):
            raise ValueError("weight must be 'identity' or 'inverse'")
        if self.metric not in ("c_err", "c_err_max"):
            raise ValueError("metric must be 'c_err' or 'c_err_max'")
        if self.sweep_variable is not None:
            if self.sweep_variable not in SWEEP_VARIABLES:
                raise ValueError(f"sweep variable must be one of {SWEEP_VARIABLES}")
            vals = np.asarray(self.sweep_values, dtype=float)
            if vals.size == 0 or np.any(np.diff(vals) <= 0):
                raise ValueError("sweep values must be nonempty and strictly increasing")
        SolverOptions.from_dict(self.options)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in cls.__dataclass_fields__.values()} | {"sweep"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(data.get("noise"), dict):
            data["noise"] = NoiseModel.from_dict(data["noise"])
        sweep = data.pop("sweep", None)
        if sweep is not None:
            data["sweep_variable"] = sweep["variable"]
            data["sweep_values"] = tuple(sweep["values"])
        if "sweep_values" in data:
            data["sweep_values"] = tuple(data["sweep_values"])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["noise"] = self.noise.to_dict()
        out["sweep_values"] = list(self.sweep_values)
        return out

    # -- resolved settings -------------------------------------------------

    @property
    def test_problem(self) -> TestProblem:
        return get_problem(self.problem)

    @property
    def n_samples(self) -> int:
        return int(self.m if self.m is not None else self.test_problem.m)

    @property
    def spacing(self) -> float:
        return float(self.delta if self.delta is not None else self.test_problem.delta)

    @property
    def stencil(self) -> int:
        return int(self.points if self.points is not None else self.test_problem.points)

    @property
    def initial_state(self) -> np.ndarray:
        if isinstance(self.x0, str):
            if self.x0 != "limit_cycle" or self.test_problem.name != "vanderpol":
                raise ValueError("x0='limit_cycle' is only defined for vanderpol")
            return vanderpol_cycle_point()
        if self.x0 is None:
            return np.asarray(self.test_problem.x0, dtype=float)
        return np.asarray(self.x0, dtype=float)

    @property
    def true_field(self) -> VectorField:
        prob = self.test_problem
        return prob.fixed_sparsity() if self.fixed_sparsity else prob.field

    def at(self, value) -> "ExperimentConfig":
        """Copy with the sweep variable set to ``value`` (sweep removed)."""
        var = self.sweep_variable
        base = replace(self, sweep_variable=None, sweep_values=())
        if var is None:
            return base
        if var == "sigma":
            return replace(base, noise=replace(self.noise, sigma=float(value)))
        if var == "rho":
            return replace(base, noise=replace(self.noise, kind="correlated", rho=float(value)))
        if var == "m":
            return replace(base, m=int(value))
        if var == "delta":
            return replace(base, delta=float(value))
        if var == "stencil":
            return replace(base, points=int(value))
        return replace(base, oversample=int(value))


@dataclass
class TrialRecord:
    """Outcome of one trial; failed trials keep NaN errors and the error text."""

    index: int
    seed: int
    c_err: float = float("nan")
    c_err_max: float = float("nan")
    x_err: float = float("nan")
    pattern_correct: bool = False
    failed: bool = False
    status: str = ""
    elapsed: float = 0.0
    coeffs: np.ndarray | None = None
    report: SolveReport | None = None
    error: str = ""

    def metric(self, name: str) -> float:
        return float(getattr(self, name))


def make_data(config: ExperimentConfig, index: int):
    """Truth and noisy measurements of trial ``index``; returns ``(X, y, seed)``."""
    prob = config.test_problem
    seed = int(config.seed) + int(index)
    X = integrate_trajectory(prob.field, config.initial_state, config.n_samples, config.spacing).states
    y = X.reshape(-1) + sample_noise(config.noise, X.shape[0], prob.dim, seed)
    return X, y, seed


def _weight(config: ExperimentConfig, m: int, d: int) -> WeightMatrix | None:
    if config.weight == "inverse" and config.noise.sigma > 0:
        return inverse_weight(config.noise, m, d)
    return None


def _estimate(config: ExperimentConfig, X: np.ndarray, y: np.ndarray):
    """Run the configured method; returns ``(C, Z or None, report or None)``."""
    prob = config.test_problem
    spec, d = prob.spec, prob.dim
    m = X.shape[0]
    mask = prob.true_mask if config.fixed_sparsity else None
    Y = y.reshape(m, d)
    if config.method == "lsoi":
        D = make_findiff(m, config.spacing, config.stencil)
        return lsoi_solve(Y, D, spec, mask=mask).matrix, None, None
    if config.method == "wlsoi":
        D = make_findiff(m, config.spacing, config.stencil)
        Gamma = None
        if config.noise.sigma > 0:
            Gamma = whitening_operator(X, prob.field.C, D, spec, config.noise)
        return weighted_lsoi_solve(Y, D, spec, Gamma, mask=mask).matrix, None, None
    if config.method == "sidds_l0":
        alpha = prob.alpha if config.alpha is None else config.alpha
        p = config.p
    else:
        alpha = 0.0 if config.alpha is None else config.alpha
        p = config.p
    problem = SiddsProblem.single(y, spec, config.spacing, M=_weight(config, m, d), points=config.stencil,
                                  p=p, alpha=alpha, tau=config.tau,
                                  oversample_factor=config.oversample, mask=mask)
    res = sidds_solve(problem, SolverOptions.from_dict(config.options))
    Z = res.measured_states(config.oversample)[0]
    return res.coeffs.matrix, Z, res.report


def run_trial(config: ExperimentConfig, index: int) -> TrialRecord:
    """One seeded trial; solver errors become a failed record instead of raising."""
    t0 = time.perf_counter()
    prob = config.test_problem
    X, y, seed = make_data(config, index)
    rec = TrialRecord(index=int(index), seed=seed)
    try:
        C, Z, report = _estimate(config, X, y)
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as err:
        log.warning("trial %d failed: %s", index, err)
        rec.failed, rec.status, rec.error = True, "failed", str(err)
        rec.elapsed = time.perf_counter() - t0
        return rec
    rec.report = report
    rec.status = report.status if report is not None else "ok"
    rec.coeffs = C
    if (report is not None and report.status == "failed") or not np.all(np.isfinite(C)):
        rec.failed = True
        rec.elapsed = time.perf_counter() - t0
        return rec
    diff = C - prob.field.C
    rec.c_err = float(np.linalg.norm(diff))
    rec.c_err_max = float(np.max(np.abs(diff)))
    if Z is not None:
        rec.x_err = float(np.linalg.norm(Z - X))
    rec.pattern_correct = bool(np.array_equal(C != 0, prob.true_mask))
    rec.elapsed = time.perf_counter() - t0
    return rec


def _worker_count(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def _trial_job(args):
    config, index = args
    return run_trial(config, index)


def run_trials(config: ExperimentConfig, workers: int | None = None) -> list[TrialRecord]:
    """All trials of a config (no sweep), ordered by index.

    Trials run in a process pool when more than one worker is requested, either
    through ``workers`` or the ``SIDDS_WORKERS`` environment variable.
    """
    jobs = [(config, i) for i in range(config.trials)]
    n = min(_worker_count(workers), len(jobs))
    if n == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        out = list(pool.map(_trial_job, jobs))
    return sorted(out, key=lambda r: r.index)


def percentiles(values) -> tuple[float, float, float]:
    """25th, 50th and 75th percentiles with linear interpolation; NaN if empty."""
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        return (float("nan"),) * 3
    q = np.percentile(vals, [25, 50, 75], method="linear")
    return float(q[0]), float(q[1]), float(q[2])


@dataclass
class SweepRow:
    sweep_value: float
    F25: float
    F50: float
    F75: float
    n_trials: int
    failed: int
    crlb_trace: float | None = None
    trials: list = field(default_factory=list, repr=False)


def _crlb_trace(config: ExperimentConfig) -> float:
    prob = config.test_problem
    mask = prob.true_mask if (config.fixed_sparsity or config.method == "sidds_l0") else None
    res = crlb_bound(prob.field, config.initial_state, config.n_samples, config.spacing, config.noise, mask=mask)
    return res.trace()


def run_sweep(config: ExperimentConfig, path=None, workers: int | None = None) -> list[SweepRow]:
    """Percentile bands of the error over the sweep values.

    Failed trials are left out of the percentiles and counted in ``failed``.
    Without a sweep variable a single row with ``sweep_value`` NaN is produced.
    With ``path`` the rows are also written as CSV.
    """
    values = config.sweep_values if config.sweep_variable else (float("nan"),)
    rows = []
    for v in values:
        cfg = config.at(v) if config.sweep_variable else config
        recs = run_trials(cfg, workers)
        ok = [r.metric(config.metric) for r in recs if not r.failed]
        F25, F50, F75 = percentiles(ok)
        trace = _crlb_trace(cfg) if config.crlb and cfg.noise.sigma > 0 else None
        rows.append(SweepRow(float(v), F25, F50, F75, len(ok), len(recs) - len(ok), trace, recs))
    if path is not None:
        write_sweep_csv(path, rows, crlb=config.crlb)
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _sink(path):
    return contextlib.nullcontext(path) if hasattr(path, "write") else open(path, "w", newline="")


def write_sweep_csv(path, rows: list[SweepRow], crlb: bool = False):
    """Sweep table; ``path`` may also be an open text stream."""
    cols = ["sweep_value", "F25", "F50", "F75", "n_trials", "failed"] + (["crlb_trace"] if crlb else [])
    with _sink(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(getattr(r, c)) for c in cols])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_trials_csv(path, rows: list[SweepRow]):
    """One line per trial: sweep value, seed, errors, pattern flag, status."""
    cols = ["sweep_value", "index", "seed", "c_err", "c_err_max", "x_err", "pattern_correct", "failed", "status"]
    with _sink(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            for r in row.trials:
                writer.writerow([_fmt(row.sweep_value), r.index, r.seed, _fmt(r.c_err), _fmt(r.c_err_max),
                                 _fmt(r.x_err), int(r.pattern_correct), int(r.failed), r.status])
