"""Seeded trial batches: initialize, solve, score and aggregate.

A batch runs ``n_trials`` instances of one family with seeds
``root_seed, root_seed + 1, ...`` and reports per-trial rows plus a summary
with Time / Obj / RecErr summary columns.
"""

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .core import (
    InvalidInitialPoint,
    LineSearchFailure,
    SolverConfig,
    check_nontrivial_init,
    evaluate_F,
    solve,
)
from .generate import FAMILIES, GenSpec, generate
from .models import RobustDistanceLoss, build_objective, effective_sparsity, prox_l1_box

log = logging.getLogger(__name__)

__all__ = [
    "NoValidInitialPoint",
    "InitStrategy",
    "BatchConfig",
    "TrialReport",
    "BatchSummary",
    "recovery_error",
    "initial_point",
    "l1_warm_start",
    "bb_initial_stepsize",
    "make_bb_rule",
    "run_trial",
    "solve_instance",
    "run_batch",
    "load_config",
    "read_config_items",
    "apply_overrides",
    "config_from_mapping",
    "trials_csv",
    "summary_csv",
    "TRIAL_COLUMNS",
]


class NoValidInitialPoint(RuntimeError):
    """No candidate start satisfied ``F(x0) < lam + q(-b)``."""


def recovery_error(x_hat, x_true):
    """``||x_hat - x_true|| / max(1, ||x_true||)``."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    return float(np.linalg.norm(x_hat - x_true) / max(1.0, np.linalg.norm(x_true)))


# --- initial points ----------------------------------------------------------


@dataclass(frozen=True)
class InitStrategy:
    """How to build the starting point.

    ``pseudoinverse``
        Minimum-norm least-squares solution ``pinv(A) @ b``.
    ``regularized``
        ``A.T @ inv(A A.T + mu I) @ b`` with ``mu = param``.
    ``l1``
        l1-regularized fit with the largest ``ceil(param*m)`` residuals
        discarded (``param = 0`` gives plain LASSO), solved by accelerated
        proximal gradient with continuation in the l1 weight.
    ``user``
        A supplied vector.
    """

    name: str = "pseudoinverse"
    param: Optional[float] = None

    NAMES = ("pseudoinverse", "regularized", "l1", "user")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ValueError(f"unknown init strategy {self.name!r}; expected one of {self.NAMES}")

    @classmethod
    def parse(cls, text):
        name, _, param = str(text).partition(":")
        name = name.strip()
        if name == "l1" and not param:
            param = "0.1"
        if name == "regularized" and not param:
            param = "1e-6"
        return cls(name, float(param) if param else None)

    def __str__(self):
        return self.name if self.param is None else f"{self.name}:{self.param:g}"


def _pseudoinverse(A, b, mu=0.0):
    m, n = A.shape
    if m <= n:
        G = A @ A.T
        if mu:
            G[np.diag_indices_from(G)] += mu
        try:
            return A.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), b)
        except np.linalg.LinAlgError:
            if mu:
                raise
    if mu:
        return np.linalg.solve(A.T @ A + mu * np.eye(n), A.T @ b)
    return np.linalg.lstsq(A, b, rcond=None)[0]


def l1_warm_start(model, trim=0.1, rel_mu=1e-2, factor=0.3, max_iters=300, tol=1e-4):
    """Approximate l1-regularized fit used as a starting point.

    Minimizes ``mu*||x||_1 + 0.5*dist^2(Ax - b, S_t)`` over the box, where
    ``S_t`` are vectors with at most ``t = ceil(trim*m)`` nonzeros, for a
    decreasing sequence of ``mu`` down to ``rel_mu * mu_max``.
    """
    A, b, box = model.A, model.b, model.box
    m, n = A.shape
    loss = RobustDistanceLoss(int(math.ceil(trim * m)))

    def grad_of(r):
        return r - loss.q2(r)[1]

    x = np.zeros(n)
    mu_max = float(np.abs(A.T @ grad_of(-b)).max())
    if mu_max == 0:
        return x
    mu_min = rel_mu * mu_max
    mu = factor * mu_max
    L = 1.0
    while True:
        y = x.copy()
        x_old = x.copy()
        t = 1.0
        obj_old = math.inf
        for _ in range(max_iters):
            r = A @ y - b
            fy = loss.value(r)
            grad = A.T @ grad_of(r)
            while True:
                x_new = prox_l1_box(y - grad / L, mu / L, box)
                d = x_new - y
                f_new = loss.value(A @ x_new - b)
                if f_new <= fy + grad @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fy):
                    break
                L *= 2.0
            obj_new = f_new + mu * np.abs(x_new).sum()
            if obj_new > obj_old:
                t = 1.0  # momentum restart
            obj_old = obj_new
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            step = np.linalg.norm(x_new - x_old)
            y = x_new + ((t - 1.0) / t_new) * (x_new - x_old)
            x_old, t = x_new, t_new
            if step <= tol * max(1.0, np.linalg.norm(x_new)):
                break
        x = x_old
        if mu <= mu_min:
            return x
        mu = max(mu * factor, mu_min)


def _raw_initial_point(model, strategy, x0=None):
    if strategy.name == "pseudoinverse":
        return _pseudoinverse(model.A, model.b)
    if strategy.name == "regularized":
        return _pseudoinverse(model.A, model.b, mu=strategy.param)
    if strategy.name == "l1":
        return l1_warm_start(model, trim=strategy.param)
    if x0 is None:
        raise ValueError("user init strategy needs x0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.A.shape[1],):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({model.A.shape[1]},)")
    return x0


_SCALES = 2.0 ** np.arange(-12, 13)


def _repair_candidates(model, x):
    # Sparsify to the k largest entries, then pick the best scaling of each.
    xb = model.box.project(x)
    yield xb
    order = np.argsort(-np.abs(xb), kind="stable")
    k = min(model.A.shape[0], int(np.count_nonzero(xb)))
    while k >= 1:
        xk = np.zeros_like(xb)
        xk[order[:k]] = xb[order[:k]]
        for s in _SCALES:
            yield model.box.project(s * xk)
        k //= 2


def initial_point(model, strategy="pseudoinverse", x0=None):
    """Starting point for the solver, validated against ``F(x0) < lam + q(-b)``.

    A point failing the check is projected onto the box; if still invalid,
    candidates built by keeping its ``k`` largest entries (``k`` halving from
    ``m``) at a range of scalings are tried and the one with the smallest
    objective among the valid ones is returned.

    Returns
    -------
    x0 : array
    adjusted : bool
        Whether the strategy's raw point had to be repaired.

    Raises
    ------
    NoValidInitialPoint
    """
    if not isinstance(strategy, InitStrategy):
        strategy = InitStrategy.parse(strategy)
    obj = build_objective(model)
    thresh = model.loss_at_minus_b()
    x = _raw_initial_point(model, strategy, x0)
    if check_nontrivial_init(obj, x, model.lam, thresh):
        return x, False
    if strategy.name == "user":
        raise NoValidInitialPoint(
            f"user-supplied x0 violates F(x0) < lam + q(-b) (F(x0) = {evaluate_F(obj, x):.6g}, "
            f"bound = {model.lam + thresh:.6g})"
        )
    best, best_F = None, math.inf
    for cand in _repair_candidates(model, x):
        F = evaluate_F(obj, cand)
        if F < model.lam + thresh and F < best_F:
            best, best_F = cand, F
    if best is None:
        raise NoValidInitialPoint(f"no start from strategy {strategy} satisfies F(x0) < lam + q(-b)")
    log.info("initial point from %s repaired: F(x0) = %.6g", strategy, best_F)
    return best, True


# --- stepsize ----------------------------------------------------------------


def bb_initial_stepsize(x_k, x_prev, grad_k, grad_prev, config):
    """Barzilai-Borwein trial stepsize clamped to ``[alpha_min, alpha_max]``.

    ``grad`` is the gradient of the smooth loss term ``A.T @ grad q1(Ax - b)``.
    Returns 1 on the first iteration or when ``<dx, dgrad> = 0``.
    """
    if x_prev is None or grad_prev is None:
        return 1.0
    dx = x_k - x_prev
    inner = abs(float(dx @ (grad_k - grad_prev)))
    if inner == 0.0:
        return 1.0
    return max(config.alpha_min, min(config.alpha_max, float(dx @ dx) / inner))


def make_bb_rule(config):
    def rule(x, x_prev, grad, grad_prev):
        return bb_initial_stepsize(x, x_prev, grad, grad_prev, config)

    return rule


# --- batch configuration -------------------------------------------------------


DEFAULT_TOL = {"robust": 1e-6, "cauchy": 1e-6, "dct": 1e-8}
DEFAULT_INIT = {"robust": "pseudoinverse", "cauchy": "l1:0.1", "dct": "l1:0"}
PUBLISHED_INIT = {"robust": "pseudoinverse", "cauchy": "SCP", "dct": "SPGL1"}


@dataclass(frozen=True)
class BatchConfig:
    """Everything needed to reproduce one batch.

    ``tol`` and ``init`` default per family when left as ``None``. Every
    field can be set from a config file ``[batch]`` section under the same
    name, with ``-`` or ``_`` separators.
    """

    family: str = "robust"
    i: Optional[int] = None
    K: Optional[int] = None
    F: Optional[float] = None
    D: Optional[float] = None
    trials: int = 20
    seed: int = 0
    tol: Optional[float] = None
    sigma: float = 1e-3
    alpha_min: float = 1e-4
    alpha_max: float = 1e4
    shrink: float = 0.5
    max_iters: int = 20000
    alpha_floor: float = 1e-20
    init: Optional[str] = None
    jobs: int = 1
    lam: Optional[float] = None
    gamma: Optional[float] = None
    outliers: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        InitStrategy.parse(self.resolved_init)
        self.solver_config()
        self.gen_spec(self.seed)

    @property
    def resolved_tol(self):
        return DEFAULT_TOL[self.family] if self.tol is None else self.tol

    @property
    def resolved_init(self):
        return DEFAULT_INIT[self.family] if self.init is None else self.init

    @property
    def protocol(self):
        """``published`` when the published initializer is used, else ``protocol-modified``."""
        init = InitStrategy.parse(self.resolved_init)
        modified = PUBLISHED_INIT[self.family] != init.name or any(
            v is not None for v in (self.lam, self.gamma, self.outliers)
        )
        return "protocol-modified" if modified else "published"

    def solver_config(self):
        return SolverConfig(
            alpha_min=self.alpha_min,
            alpha_max=self.alpha_max,
            sigma=self.sigma,
            shrink_factor=self.shrink,
            rel_step_tol=self.resolved_tol,
            max_outer_iters=self.max_iters,
            alpha_floor=self.alpha_floor,
        )

    def gen_spec(self, seed):
        if self.family == "dct":
            return GenSpec("dct", seed, K=self.K, F=self.F, D=self.D)
        return GenSpec(self.family, seed, scale=self.i)

    def params(self):
        return self.gen_spec(self.seed).params()

    def fingerprint(self):
        d = dataclasses.asdict(self)
        d.pop("jobs")
        d.update(tol=self.resolved_tol, init=self.resolved_init)
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(BatchConfig)}
# config files are case-insensitive (configparser lowercases keys)
_FIELD_NAMES = {name.lower(): name for name in _FIELD_TYPES}


def _coerce(name, text):
    kind = _FIELD_TYPES[name]
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    text = str(text).strip()
    if kind in (int, Optional[int]):
        try:
            return int(text)
        except ValueError:
            value = float(text)
            if not value.is_integer():
                raise ValueError(f"{name} must be an integer, got {text!r}") from None
            return int(value)
    if kind in (float, Optional[float]):
        return float(text)
    return text


def config_from_mapping(mapping, base=None):
    """Apply ``key=value`` pairs (strings allowed) onto `base`."""
    changes = {}
    for key, value in mapping.items():
        name = key.strip().replace("-", "_")
        name = name if name in _FIELD_TYPES else _FIELD_NAMES.get(name.lower(), name)
        if name == "rng":
            if str(value).strip() != "PCG64":
                raise ValueError(f"unsupported rng {value!r}; only PCG64 is available")
            continue
        if name not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        changes[name] = _coerce(name, value)
    if base is None:
        return BatchConfig(**changes)
    return base.replace(**changes)


def read_config_items(path):
    """Key/value pairs of the ``[batch]`` section of an INI-style file."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    if not parser.has_section("batch"):
        raise ValueError(f"{path}: missing [batch] section")
    return dict(parser.items("batch"))


def load_config(path, base=None):
    """Read a config file into a `BatchConfig`.

    Example::

        [batch]
        family = robust
        i = 2
        trials = 20
        seed = 7
        rng = PCG64
        init = pseudoinverse
    """
    return config_from_mapping(read_config_items(path), base)


# --- trials ------------------------------------------------------------------


@dataclass
class TrialReport:
    family: str
    params: dict
    seed: int
    wall_time_s: float = math.nan
    objective_final: float = math.nan
    rec_err: float = math.nan
    iterations: int = 0
    line_search_trials_total: int = 0
    termination_reason: str = ""
    criticality_residual: float = math.nan
    eff_sparsity: float = math.nan
    x_norm: float = math.nan
    descent_violations: int = 0
    init: str = ""
    init_adjusted: bool = False
    init_time_s: float = math.nan
    status: str = "ok"
    error: str = ""
    trace: object = field(default=None, repr=False, compare=False)
    x: object = field(default=None, repr=False, compare=False)

    @property
    def ok(self):
        return self.status == "ok"


def apply_overrides(inst, config):
    model = inst.model
    changes = {}
    if config.lam is not None:
        changes["lam"] = config.lam
    loss = model.loss
    if config.gamma is not None and loss.kind == "lorentzian":
        changes["loss"] = type(loss)(config.gamma)
    if config.outliers is not None and loss.kind == "robust":
        changes["loss"] = type(loss)(config.outliers)
    if changes:
        inst = dataclasses.replace(inst, model=dataclasses.replace(model, **changes))
    return inst


def solve_instance(inst, config, keep_trace=True, x0=None):
    """Initialize and solve one generated instance; never raises solver errors."""
    spec = inst.spec
    report = TrialReport(spec.family, spec.params(), spec.seed, init=config.resolved_init)
    model = inst.model
    try:
        t0 = time.perf_counter()
        xs, adjusted = initial_point(model, config.resolved_init, x0)
        report.init_time_s = time.perf_counter() - t0
        report.init_adjusted = adjusted
    except (NoValidInitialPoint, InvalidInitialPoint, ValueError) as exc:
        report.status, report.error = "invalid-init", str(exc)
        return report
    obj = build_objective(model)
    solver_cfg = config.solver_config()
    t0 = time.perf_counter()
    try:
        x, trace = solve(obj, xs, solver_cfg, make_bb_rule(solver_cfg))
    except LineSearchFailure as exc:
        report.wall_time_s = time.perf_counter() - t0
        report.status, report.error = "solver-failure", str(exc)
        report.termination_reason = "line-search-failure"
        if keep_trace:
            report.trace = getattr(exc, "trace", None)
        return report
    report.wall_time_s = time.perf_counter() - t0
    report.objective_final = float(evaluate_F(obj, x))
    report.rec_err = recovery_error(x, inst.x_true)
    report.iterations = trace.iterations
    report.line_search_trials_total = trace.line_search_trials_total
    report.termination_reason = trace.termination_reason.value
    report.criticality_residual = trace.final_residual
    report.eff_sparsity = float(effective_sparsity(x))
    report.x_norm = float(np.linalg.norm(x))
    report.descent_violations = len(trace.descent_violations())
    if keep_trace:
        report.trace = trace
        report.x = x
    return report


def run_trial(config, seed, keep_trace=True):
    inst = apply_overrides(generate(config.gen_spec(seed)), config)
    report = solve_instance(inst, config, keep_trace=keep_trace)
    if not report.ok:
        log.warning("trial seed=%d failed: %s", seed, report.error)
    else:
        log.info(
            "trial seed=%d: obj=%.6g rec_err=%.4g iters=%d time=%.3fs",
            seed, report.objective_final, report.rec_err, report.iterations, report.wall_time_s,
        )
    return report


def _run_trial_no_trace(args):
    config, seed = args
    return run_trial(config, seed, keep_trace=False)


@dataclass
class BatchSummary:
    family: str
    params: dict
    trials: int
    failed: int
    mean_time_s: float
    mean_obj: float
    mean_rec_err: float
    std_time_s: float
    std_obj: float
    std_rec_err: float
    mean_eff_sparsity: float
    protocol: str
    fingerprint: str

    @property
    def succeeded(self):
        return self.trials - self.failed


def _mean_std(values):
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(config, reports):
    good = [r for r in reports if r.ok]
    mt, st = _mean_std([r.wall_time_s for r in good])
    mo, so = _mean_std([r.objective_final for r in good])
    me, se = _mean_std([r.rec_err for r in good])
    ms, _ = _mean_std([r.eff_sparsity for r in good])
    return BatchSummary(
        family=config.family,
        params=config.params(),
        trials=len(reports),
        failed=len(reports) - len(good),
        mean_time_s=mt,
        mean_obj=mo,
        mean_rec_err=me,
        std_time_s=st,
        std_obj=so,
        std_rec_err=se,
        mean_eff_sparsity=ms,
        protocol=config.protocol,
        fingerprint=config.fingerprint(),
    )


def run_batch(config, keep_trace=True):
    """Run ``config.trials`` seeded trials; failed trials are kept and counted.

    With ``config.jobs > 1`` trials run in worker processes and traces are
    not kept.
    """
    seeds = [config.seed + t for t in range(config.trials)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            reports = list(pool.map(_run_trial_no_trace, [(config, s) for s in seeds]))
    else:
        reports = [run_trial(config, s, keep_trace=keep_trace) for s in seeds]
    return summarize(config, reports), reports


# --- CSV output ----------------------------------------------------------------

TRIAL_COLUMNS = (
    "seed", "time_s", "obj", "rec_err", "iters", "residual", "termination",
    "eff_sparsity", "ls_trials", "descent_violations", "init", "init_adjusted", "status",
)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def trial_row(r, include_time=True):
    row = [
        r.seed, r.wall_time_s, r.objective_final, r.rec_err, r.iterations,
        r.criticality_residual, r.termination_reason, r.eff_sparsity,
        r.line_search_trials_total, r.descent_violations, r.init, r.init_adjusted, r.status,
    ]
    if not include_time:
        row[1] = ""
    return [_fmt(v) for v in row]


def trials_csv(reports, include_time=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for r in reports:
        w.writerow(trial_row(r, include_time))
    return buf.getvalue()


SUMMARY_COLUMNS = (
    "family", "params", "trials", "failed", "Time", "Obj", "RecErr",
    "Time_std", "Obj_std", "RecErr_std", "EffSparsity", "protocol", "fingerprint",
)


def summary_csv(summaries):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        params = ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in s.params.items())
        w.writerow([
            s.family, params, s.trials, s.failed,
            f"{s.mean_time_s:.3g}", f"{s.mean_obj:.3e}", f"{s.mean_rec_err:.3e}",
            f"{s.std_time_s:.3g}", f"{s.std_obj:.3e}", f"{s.std_rec_err:.3e}",
            f"{s.mean_eff_sparsity:.3e}", s.protocol, s.fingerprint,
        ])
    return buf.getvalue()
