"""Proximal line-search method for fractional programs.

Minimizes ``F(x) = f(x)^2/g(x) + h1(x) - h2(x)`` over ``C ∩ {g != 0}`` where
``f`` is convex with a computable prox (jointly with the indicator of ``C``),
``g`` and ``h1`` are smooth and ``h2`` is convex. Each iteration linearizes
the ratio at ``c_k = f(x^k)/g(x^k)`` and takes a prox-gradient step; the
stepsize is backtracked until a surrogate potential shows sufficient descent.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

__all__ = [
    "FractionalObjective",
    "SolverConfig",
    "IterateState",
    "IterationRecord",
    "SolveTrace",
    "Termination",
    "LineSearchFailure",
    "InvalidInitialPoint",
    "evaluate_F",
    "surrogate_H",
    "make_state",
    "prox_gradient_candidate",
    "line_search_step",
    "solve",
    "criticality_residual",
    "check_nontrivial_init",
    "DESCENT_SLACK",
]

# Relative slack on the descent test; absorbs round-off at near-critical points.
DESCENT_SLACK = 1e-12


class LineSearchFailure(RuntimeError):
    """Stepsize fell below the floor without satisfying the descent test."""


class InvalidInitialPoint(ValueError):
    """Initial point is outside the constraint set or has ``g(x0) = 0``."""


@dataclass(frozen=True)
class FractionalObjective:
    """Oracle bundle for ``f^2/g + h1 - h2`` over a closed convex set ``C``.

    ``prox_scaled_f_box(v, tau)`` must return the minimizer of
    ``tau*f(u) + 0.5*||u - v||^2`` over ``C``. ``h2_subgrad`` returns one
    element of the subdifferential of ``h2``. ``in_constraint`` tests
    membership in ``C``.
    """

    f_value: Callable
    g_value: Callable
    g_grad: Callable
    h1_value: Callable
    h1_grad: Callable
    h2_value: Callable
    h2_subgrad: Callable
    prox_scaled_f_box: Callable
    in_constraint: Callable = lambda x: True


@dataclass(frozen=True)
class SolverConfig:
    alpha_min: float = 1e-4
    alpha_max: float = 1e4
    sigma: float = 1e-3
    shrink_factor: float = 0.5
    rel_step_tol: float = 1e-6
    max_outer_iters: int = 20000
    alpha_floor: float = 1e-20

    def __post_init__(self):
        if not 0 < self.alpha_min < self.alpha_max:
            raise ValueError("require 0 < alpha_min < alpha_max")
        if not 0 < self.shrink_factor < 1:
            raise ValueError("require 0 < shrink_factor < 1")
        if not self.sigma > 0:
            raise ValueError("require sigma > 0")
        if not 0 < self.alpha_floor < self.alpha_min:
            raise ValueError("require 0 < alpha_floor < alpha_min")
        if not self.rel_step_tol >= 0:
            raise ValueError("require rel_step_tol >= 0")
        if int(self.max_outer_iters) != self.max_outer_iters or self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be a positive integer")


@dataclass(frozen=True)
class IterateState:
    """Quantities held fixed during one outer iteration."""

    x: np.ndarray
    z: np.ndarray
    c: float
    F_value: float
    iter_index: int
    h2_value: float
    h1_grad: np.ndarray


class Termination(str, enum.Enum):
    STEP_TOLERANCE = "step-tolerance"
    MAX_ITERS = "max-iters"
    LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass(frozen=True)
class IterationRecord:
    F_value: float
    alpha: float
    step_norm: float
    line_search_trials: int


@dataclass
class SolveTrace:
    """Per-iteration history of a solve.

    ``F_initial`` is the objective at the starting point; ``records[k]``
    describes the step from ``x^k`` to ``x^{k+1}`` and carries ``F(x^{k+1})``.
    """

    F_initial: float
    sigma: float
    records: List[IterationRecord] = field(default_factory=list)
    final_residual: float = math.nan
    termination_reason: Optional[Termination] = None

    @property
    def iterations(self):
        return len(self.records)

    @property
    def F_values(self):
        return [self.F_initial] + [r.F_value for r in self.records]

    @property
    def line_search_trials_total(self):
        return sum(r.line_search_trials for r in self.records)

    def descent_violations(self, slack=1e-10):
        """Indices ``k`` where ``F(x^{k+1}) + sigma/2*||step||^2 > F(x^k)`` beyond slack."""
        bad = []
        prev = self.F_initial
        for k, rec in enumerate(self.records):
            lhs = rec.F_value + 0.5 * self.sigma * rec.step_norm ** 2
            if lhs > prev + slack * (1.0 + abs(prev)):
                bad.append(k)
            prev = rec.F_value
        return bad


def evaluate_F(obj, x):
    """Extended objective: ``f^2/g + h1 - h2`` on ``C ∩ {g != 0}``, else ``inf``."""
    if not obj.in_constraint(x):
        return math.inf
    g = obj.g_value(x)
    if g == 0:
        return math.inf
    f = obj.f_value(x)
    return f * f / g + obj.h1_value(x) - obj.h2_value(x)


def surrogate_H(obj, x_hat, x_prev, z, h2_prev=None):
    """Auxiliary potential at ``(x_hat, z, f(x_hat)/g(x_hat))``.

    Uses ``f^2/g + h1(x_hat) - h2(x_prev) - <x_hat - x_prev, z>``, which equals
    the conjugate form when ``z`` is a subgradient of ``h2`` at `x_prev`, so the
    conjugate of ``h2`` is never needed.
    """
    g = obj.g_value(x_hat)
    if g == 0:
        raise ValueError("surrogate undefined where g(x_hat) = 0")
    if h2_prev is None:
        h2_prev = obj.h2_value(x_prev)
    f = obj.f_value(x_hat)
    return f * f / g + obj.h1_value(x_hat) - h2_prev - float(np.dot(x_hat - x_prev, z))


def make_state(obj, x, iter_index=0):
    """Build the iterate state at `x`; raises `InvalidInitialPoint` off the domain."""
    x = np.asarray(x, dtype=float)
    if not obj.in_constraint(x):
        raise InvalidInitialPoint("point lies outside the constraint set")
    g = obj.g_value(x)
    if not g > 0:
        raise InvalidInitialPoint("g(x) must be positive")
    f = obj.f_value(x)
    h2 = obj.h2_value(x)
    F = f * f / g + obj.h1_value(x) - h2
    if not math.isfinite(F):
        raise InvalidInitialPoint("objective is not finite at the point")
    return IterateState(
        x=x,
        z=np.asarray(obj.h2_subgrad(x), dtype=float),
        c=f / g,
        F_value=F,
        iter_index=iter_index,
        h2_value=h2,
        h1_grad=np.asarray(obj.h1_grad(x), dtype=float),
    )


def prox_gradient_candidate(obj, state, alpha):
    x, c = state.x, state.c
    v = x - alpha * (state.h1_grad - c * c * obj.g_grad(x) - state.z)
    return obj.prox_scaled_f_box(v, 2.0 * alpha * c)


def line_search_step(obj, state, alpha_init, config):
    """Backtrack from `alpha_init` until the surrogate descent test passes.

    Returns
    -------
    next_state : IterateState
    alpha : float
        Accepted stepsize.
    trials : int
        Number of candidates evaluated, including the accepted one.
    """
    alpha = float(alpha_init)
    F_k = state.F_value
    bound = F_k + DESCENT_SLACK * (1.0 + abs(F_k))
    half_sigma = 0.5 * config.sigma
    trials = 0
    while alpha >= config.alpha_floor:
        trials += 1
        cand = prox_gradient_candidate(obj, state, alpha)
        g = obj.g_value(cand)
        if g > 0 and obj.in_constraint(cand):
            d = cand - state.x
            H = surrogate_H(obj, cand, state.x, state.z, h2_prev=state.h2_value)
            if H + half_sigma * float(d @ d) <= bound:
                return make_state(obj, cand, state.iter_index + 1), alpha, trials
        alpha *= config.shrink_factor
    raise LineSearchFailure(
        f"stepsize fell below {config.alpha_floor:g} after {trials} trials "
        f"at iteration {state.iter_index}"
    )


def _constant_rule(x, x_prev, grad, grad_prev):
    return 1.0


def solve(obj, x0, config=None, stepsize_rule=None, callback=None):
    """Run the proximal line-search method from `x0`.

    Parameters
    ----------
    obj : FractionalObjective
    x0 : array
        Must lie in the constraint set with ``g(x0) > 0``.
    config : SolverConfig, optional
    stepsize_rule : callable, optional
        ``rule(x, x_prev, grad, grad_prev)`` giving the first trial stepsize,
        where ``grad`` is the gradient of ``h1``; ``x_prev`` is ``None`` on the
        first iteration. The result is clamped to ``[alpha_min, alpha_max]``.
        Defaults to a constant 1.
    callback : callable, optional
        Called as ``callback(state, record)`` after each accepted step.

    Returns
    -------
    x : array
    trace : SolveTrace
        `LineSearchFailure` is propagated; `trace` is attached to the
        exception as ``exc.trace``.
    """
    config = config or SolverConfig()
    rule = stepsize_rule or _constant_rule
    state = make_state(obj, x0)
    trace = SolveTrace(F_initial=state.F_value, sigma=config.sigma)
    x_prev = grad_prev = None
    alpha_last = 1.0
    for _ in range(config.max_outer_iters):
        alpha0 = rule(state.x, x_prev, state.h1_grad, grad_prev)
        alpha0 = min(max(alpha0, config.alpha_min), config.alpha_max)
        try:
            new_state, alpha, trials = line_search_step(obj, state, alpha0, config)
        except LineSearchFailure as exc:
            trace.termination_reason = Termination.LINE_SEARCH_FAILURE
            exc.trace = trace
            raise
        step = float(np.linalg.norm(new_state.x - state.x))
        record = IterationRecord(new_state.F_value, alpha, step, trials)
        trace.records.append(record)
        if callback is not None:
            callback(new_state, record)
        x_prev, grad_prev = state.x, state.h1_grad
        state = new_state
        alpha_last = alpha
        if step <= config.rel_step_tol * max(float(np.linalg.norm(state.x)), 1.0):
            trace.termination_reason = Termination.STEP_TOLERANCE
            break
    else:
        trace.termination_reason = Termination.MAX_ITERS
    trace.final_residual = _residual_from_state(obj, state, alpha_last)
    return state.x, trace


def _residual_from_state(obj, state, alpha):
    return float(np.linalg.norm(state.x - prox_gradient_candidate(obj, state, alpha)))


def criticality_residual(obj, x, alpha):
    """Distance from `x` to its prox-gradient image at stepsize `alpha`.

    Zero exactly when `x` is a fixed point of the map for the chosen
    subgradient of ``h2``, i.e. a critical point.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    if obj.g_value(x) == 0:
        raise ValueError("criticality residual undefined where g(x) = 0")
    return _residual_from_state(obj, make_state(obj, x), alpha)


def check_nontrivial_init(obj, x0, lam, q_at_minus_b):
    """True iff ``F(x0) < lam + q(-b)``, which keeps the level set away from 0."""
    return evaluate_F(obj, np.asarray(x0, dtype=float)) < lam + q_at_minus_b
