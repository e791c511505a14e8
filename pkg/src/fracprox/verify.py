"""Self-checks run by ``fracprox verify``.

Each check compares a library routine against an independent brute-force or
finite-difference computation on random inputs.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .core import SolverConfig, Termination, solve
from .harness import initial_point, make_bb_rule
from .models import (
    BoxBounds,
    LorentzianLoss,
    QuadraticLoss,
    RobustDistanceLoss,
    SquaredRatioModel,
    build_objective,
    prox_l1_box,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def scalar_prox_bruteforce(v, tau, lo, hi, grid=2001):
    """Minimize ``tau*|u| + (u - v)^2/2`` on ``[lo, hi]`` by grid search plus Brent."""
    reach = abs(v) + tau + 1.0
    a, b = max(lo, -reach), min(hi, reach)
    if a == b:
        return a
    phi = lambda u: tau * abs(u) + 0.5 * (u - v) ** 2  # noqa: E731
    us = np.linspace(a, b, grid)
    vals = tau * np.abs(us) + 0.5 * (us - v) ** 2
    k = int(np.argmin(vals))
    left, right = us[max(k - 1, 0)], us[min(k + 1, grid - 1)]
    res = minimize_scalar(phi, bounds=(left, right), method="bounded", options={"xatol": 1e-12})
    cands = [res.x, us[k], a, b] + ([0.0] if a <= 0 <= b else [])
    return min(cands, key=phi)


def random_box(rng, n):
    lower = np.where(rng.random(n) < 0.3, -np.inf, -rng.exponential(1.5, n))
    upper = np.where(rng.random(n) < 0.3, np.inf, rng.exponential(1.5, n))
    return BoxBounds(lower, upper)


def check_prox(rng, count=1000):
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 6))
        v = rng.normal(scale=3.0, size=n)
        tau = float(rng.exponential(1.0))
        box = random_box(rng, n)
        got = prox_l1_box(v, tau, box)
        ref = np.array([scalar_prox_bruteforce(v[j], tau, box.lower[j], box.upper[j]) for j in range(n)])
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return CheckResult("prox_l1_box vs brute force", worst <= 1e-6, f"max |diff| = {worst:.2e} over {count} cases")


def central_difference(fun, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _losses():
    return [QuadraticLoss(), LorentzianLoss(0.02), RobustDistanceLoss(2)]


def _random_model(rng, m, n, loss, lam=0.1):
    A = rng.standard_normal((m, n))
    A /= np.linalg.norm(A, axis=0)
    return SquaredRatioModel(A, rng.standard_normal(m), lam, BoxBounds.unbounded(n), loss)


def check_gradients(rng, count=100):
    out = []
    for loss in _losses():
        worst = 0.0
        for _ in range(count):
            model = _random_model(rng, 8, 20, loss)
            obj = build_objective(model)
            x = rng.standard_normal(20)
            fd = central_difference(obj.h1_value, x)
            g = obj.h1_grad(x)
            worst = max(worst, float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)))
        out.append(CheckResult(f"h1 gradient ({loss.kind})", worst < 1e-5, f"max rel err = {worst:.2e}"))
    return out


def check_subgradient(rng, instances=5, pairs=10_000):
    worst = 0.0
    for _ in range(instances):
        model = _random_model(rng, 8, 20, RobustDistanceLoss(3))
        obj = build_objective(model)
        for _ in range(pairs // 100):
            x = rng.standard_normal(20) * rng.exponential(2.0)
            hx, zx = obj.h2_value(x), obj.h2_subgrad(x)
            for _ in range(100):
                w = x + rng.standard_normal(20) * rng.exponential(1.0)
                gap = hx + zx @ (w - x) - obj.h2_value(w)
                worst = max(worst, gap / (1.0 + abs(hx)))
    return CheckResult("h2 subgradient inequality", worst <= 1e-10, f"max violation = {max(worst, 0):.2e}")


def check_solves(rng, count=20):
    cfg = SolverConfig(rel_step_tol=1e-8)
    viol = bad_term = 0
    worst_res = 0.0
    for k in range(count):
        # gamma = 0.02 makes these tiny interpolating instances very stiff
        loss = [QuadraticLoss(), LorentzianLoss(0.5), RobustDistanceLoss(2)][k % 3]
        model = _random_model(rng, 12, 30, loss, lam=0.05)
        x_true = np.zeros(30)
        x_true[rng.choice(30, 3, replace=False)] = rng.standard_normal(3)
        model = SquaredRatioModel(model.A, model.A @ x_true + 0.01 * rng.standard_normal(12),
                                  model.lam, model.box, loss)
        obj = build_objective(model)
        x0, _ = initial_point(model, "pseudoinverse")
        x, trace = solve(obj, x0, cfg, make_bb_rule(cfg))
        viol += len(trace.descent_violations())
        bad_term += trace.termination_reason is not Termination.STEP_TOLERANCE
        worst_res = max(worst_res, trace.final_residual / (1.0 + np.linalg.norm(x)))
    return [
        CheckResult("sufficient descent", viol == 0, f"{viol} violations over {count} solves"),
        CheckResult("criticality at termination", bad_term == 0 and worst_res <= 1e-4,
                    f"max scaled residual = {worst_res:.2e}, {bad_term} non-converged"),
    ]


def run_all(seed=0, quick=False):
    rng = np.random.default_rng(seed)
    scale = 10 if quick else 1
    results = [check_prox(rng, 1000 // scale)]
    results += check_gradients(rng, 100 // scale)
    results.append(check_subgradient(rng, pairs=10_000 // scale))
    results += check_solves(rng, 20 // (2 if quick else 1))
    return results
