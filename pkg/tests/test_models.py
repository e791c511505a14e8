import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracprox.core import SolverConfig, evaluate_F, make_state, prox_gradient_candidate, solve, surrogate_H
from fracprox.models import (
    BoxBounds,
    LorentzianLoss,
    QuadraticLoss,
    RobustDistanceLoss,
    SquaredRatioModel,
    build_objective,
    effective_sparsity,
    loss_from_kind,
    lorentzian_loss,
    project_sparse,
    prox_l1_box,
    quadratic_loss,
    ratio_coefficient,
    robust_distance_loss,
)

from oracles import central_diff, dist2_sparse_bruteforce, prox_l1_box_oracle


def random_box(rng, n):
    lower = np.where(rng.random(n) < 0.3, -np.inf, -rng.exponential(1.5, n))
    upper = np.where(rng.random(n) < 0.3, np.inf, rng.exponential(1.5, n))
    return BoxBounds(lower, upper)


# --- BoxBounds -----------------------------------------------------------------


def test_box_validation():
    with pytest.raises(ValueError):
        BoxBounds(np.array([1.0]), np.array([2.0]))  # excludes 0
    with pytest.raises(ValueError):
        BoxBounds(np.array([0.0, 0.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        BoxBounds(np.array([np.nan]), np.array([1.0]))
    assert BoxBounds.unbounded(3).is_unbounded
    assert not BoxBounds.uniform(3, -1, 1).is_unbounded


def test_box_infinite_bounds_pass_through():
    v = np.array([-1e300, 3.5, 1e300])
    np.testing.assert_array_equal(BoxBounds.unbounded(3).project(v), v)


# --- ratio coefficient / effective sparsity ------------------------------------


def test_ratio_coefficient_examples():
    assert ratio_coefficient(np.array([0.0, 1.0, 0.0]), 1.0) == 1.0
    assert ratio_coefficient(np.array([1.0, 1.0]), 4.0) == 2.0
    with pytest.raises(ValueError):
        ratio_coefficient(np.zeros(3), 1.0)


def test_ratio_coefficient_homogeneity():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, t = rng.standard_normal(6), rng.exponential(3.0)
        assert ratio_coefficient(t * x, 0.7) == pytest.approx(ratio_coefficient(x, 0.7) / t, rel=1e-12)


def test_effective_sparsity_examples():
    x = np.zeros(10)
    x[:4] = 1.0
    assert effective_sparsity(x) == 4.0
    assert effective_sparsity(np.eye(5)[0]) == 1.0
    with pytest.raises(ValueError):
        effective_sparsity(np.zeros(2))


def test_effective_sparsity_bounds():
    rng = np.random.default_rng(1)
    for _ in range(500):
        x = rng.standard_normal(12) * (rng.random(12) < 0.5)
        if not np.any(x):
            continue
        s = effective_sparsity(x)
        assert 1.0 - 1e-12 <= s <= np.count_nonzero(x) + 1e-12


# --- prox ----------------------------------------------------------------------


def test_prox_soft_threshold_example():
    np.testing.assert_array_equal(prox_l1_box(np.array([3.0, -1.0]), 2.0, BoxBounds.unbounded(2)), [1.0, 0.0])


def test_prox_with_zero_tau_is_clamp():
    rng = np.random.default_rng(2)
    v = rng.normal(scale=2.0, size=8)
    box = BoxBounds(np.zeros(8), np.ones(8))
    np.testing.assert_array_equal(prox_l1_box(v, 0.0, box), np.clip(v, 0.0, 1.0))


def test_prox_rejects_negative_tau():
    with pytest.raises(ValueError):
        prox_l1_box(np.ones(2), -1.0, BoxBounds.unbounded(2))


def test_prox_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = 5
        v = rng.normal(scale=3.0, size=n)
        tau = float(rng.exponential(1.0))
        box = random_box(rng, n)
        ref = prox_l1_box_oracle(v, tau, box.lower, box.upper)
        np.testing.assert_allclose(prox_l1_box(v, tau, box), ref, atol=1e-6)


def test_prox_beats_random_feasible_points():
    rng = np.random.default_rng(4)
    for _ in range(5):
        n = 3
        v = rng.normal(scale=2.0, size=n)
        tau = float(rng.exponential(1.0))
        box = BoxBounds(-rng.exponential(1.5, n), rng.exponential(1.5, n))
        u = prox_l1_box(v, tau, box)
        obj = lambda U: tau * np.abs(U).sum(axis=-1) + 0.5 * ((U - v) ** 2).sum(axis=-1)  # noqa: E731
        U = rng.uniform(box.lower, box.upper, size=(200_000, n))
        assert obj(u) <= obj(U).min() + 1e-8
        # dense per-axis grid
        axes = [np.linspace(box.lower[j], box.upper[j], 101) for j in range(n)]
        G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        assert obj(u) <= obj(G).min() + 1e-8


@settings(max_examples=200, deadline=None)
@given(
    v=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
    w=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
    tau=st.floats(0, 10),
    lo=st.floats(-5, 0),
    hi=st.floats(0, 5),
)
def test_prox_nonexpansive(v, w, tau, lo, hi):
    box = BoxBounds.uniform(4, lo, hi)
    v, w = np.array(v), np.array(w)
    d = np.linalg.norm(prox_l1_box(v, tau, box) - prox_l1_box(w, tau, box))
    assert d <= np.linalg.norm(v - w) * (1 + 1e-12) + 1e-12


# --- losses --------------------------------------------------------------------


def test_quadratic_loss_examples():
    v, g = quadratic_loss(np.zeros(3))
    assert v == 0.0 and not np.any(g)
    v, g = quadratic_loss(np.array([3.0, 4.0]))
    assert v == 12.5
    np.testing.assert_array_equal(g, [3.0, 4.0])


def test_quadratic_loss_gradient_fd():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y = rng.standard_normal(7)
        fd = central_diff(lambda u: quadratic_loss(u)[0], y)
        g = quadratic_loss(y)[1]
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-6


def test_lorentzian_examples():
    assert lorentzian_loss(np.zeros(4), 0.02)[0] == 0.0
    for gamma in (0.02, 1.0, 7.5):
        assert lorentzian_loss(np.array([gamma]), gamma)[0] == pytest.approx(math.log(2.0), rel=1e-15)
    with pytest.raises(ValueError):
        lorentzian_loss(np.ones(2), 0.0)
    with pytest.raises(ValueError):
        LorentzianLoss(-1.0)


def test_lorentzian_gradient_fd():
    rng = np.random.default_rng(6)
    for _ in range(50):
        y = rng.standard_normal(7) * 0.05
        fd = central_diff(lambda u: lorentzian_loss(u, 0.02)[0], y)
        g = lorentzian_loss(y, 0.02)[1]
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-5


def test_lorentzian_small_argument_precision():
    y = np.array([1e-12])
    # log1p keeps the leading term y^2/gamma^2 = 2.5e-21 exactly
    assert lorentzian_loss(y, 0.02)[0] == pytest.approx(2.5e-21, rel=1e-12)


def test_project_sparse_examples():
    np.testing.assert_array_equal(project_sparse(np.array([5.0, -7.0, 1.0]), 1), [0.0, -7.0, 0.0])
    y = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(project_sparse(y, 3), y)
    np.testing.assert_array_equal(project_sparse(y, 0), np.zeros(3))
    with pytest.raises(ValueError):
        project_sparse(y, 4)


def test_project_sparse_tie_break_prefers_smaller_index():
    np.testing.assert_array_equal(project_sparse(np.array([1.0, -2.0, 2.0, 2.0]), 2), [0.0, -2.0, 2.0, 0.0])


def test_project_sparse_is_nearest_point():
    rng = np.random.default_rng(7)
    for _ in range(200):
        y = rng.standard_normal(6)
        t = project_sparse(y, 2)
        assert 0.5 * float((y - t) @ (y - t)) == pytest.approx(dist2_sparse_bruteforce(y, 2), abs=1e-14)


def test_robust_loss_with_zero_outliers_is_quadratic():
    y = np.array([1.0, -2.0, 0.5])
    q1, g1, q2, z = robust_distance_loss(y, 0)
    assert (q1, q2) == (quadratic_loss(y)[0], 0.0)
    np.testing.assert_array_equal(g1, y)
    assert not np.any(z)


def test_robust_loss_identity_and_nonnegativity():
    rng = np.random.default_rng(8)
    for _ in range(500):
        y = rng.standard_normal(9) * rng.exponential(2.0)
        q1, _, q2, t = robust_distance_loss(y, 3)
        assert q1 - q2 >= 0
        assert q1 - q2 == pytest.approx(0.5 * float((y - t) @ (y - t)), abs=1e-12 * (1 + q1))


def test_robust_loss_zero_iff_sparse():
    loss = RobustDistanceLoss(2)
    assert loss.value(np.array([0.0, 3.0, 0.0, -1.0])) == 0.0
    assert loss.value(np.array([0.0, 3.0, 1e-3, -1.0])) > 0.0
    assert loss.value(np.zeros(5)) == 0.0


def test_robust_subgradient_inequality():
    rng = np.random.default_rng(9)
    y = rng.standard_normal(8)
    assert len(set(np.abs(y))) == 8
    _, _, q2, t = robust_distance_loss(y, 3)
    W = y + rng.standard_normal((10_000, 8)) * rng.exponential(1.0, (10_000, 1))
    q2w = np.array([robust_distance_loss(w, 3)[2] for w in W])
    assert np.all(q2w >= q2 + (W - y) @ t - 1e-10 * (1 + q2))


def test_loss_from_kind():
    assert loss_from_kind("quadratic").kind == "quadratic"
    assert loss_from_kind("lorentzian", gamma=0.5).gamma == 0.5
    assert loss_from_kind("robust", outlier_count=3).outlier_count == 3
    with pytest.raises(ValueError):
        loss_from_kind("huber")


def test_lorentzian_and_quadratic_have_no_concave_part():
    for loss in (QuadraticLoss(), LorentzianLoss(0.3)):
        v, z = loss.q2(np.ones(3))
        assert v == 0.0 and not np.any(z)


# --- model and objective -------------------------------------------------------


def test_model_validation():
    A = np.ones((2, 3))
    with pytest.raises(ValueError):
        SquaredRatioModel(A, np.ones(3), 1.0, BoxBounds.unbounded(3))
    with pytest.raises(ValueError):
        SquaredRatioModel(A, np.ones(2), 1.0, BoxBounds.unbounded(4))
    with pytest.raises(ValueError):
        SquaredRatioModel(A, np.ones(2), 0.0, BoxBounds.unbounded(3))
    with pytest.raises(ValueError):
        SquaredRatioModel(A, np.ones(2), 1.0, BoxBounds.unbounded(3), RobustDistanceLoss(3))


def test_build_objective_example():
    model = SquaredRatioModel(np.eye(2), np.zeros(2), 1.0, BoxBounds.unbounded(2))
    assert evaluate_F(build_objective(model), np.array([1.0, 1.0])) == 3.0


def test_build_objective_zero_concave_part():
    rng = np.random.default_rng(10)
    for loss in (QuadraticLoss(), LorentzianLoss(0.02)):
        model = SquaredRatioModel(rng.standard_normal((3, 5)), rng.standard_normal(3), 0.1,
                                  BoxBounds.unbounded(5), loss)
        obj = build_objective(model)
        x = rng.standard_normal(5)
        assert obj.h2_value(x) == 0.0 and not np.any(obj.h2_subgrad(x))


@pytest.mark.parametrize("loss", [QuadraticLoss(), LorentzianLoss(0.02), RobustDistanceLoss(2)], ids=repr)
def test_h1_gradient_fd(loss):
    rng = np.random.default_rng(11)
    for _ in range(100):
        A = rng.standard_normal((8, 20))
        A /= np.linalg.norm(A, axis=0)
        model = SquaredRatioModel(A, rng.standard_normal(8), 0.1, BoxBounds.unbounded(20), loss)
        obj = build_objective(model)
        x = rng.standard_normal(20)
        g = obj.h1_grad(x)
        fd = central_diff(obj.h1_value, x)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-5


def _direct_acceptance_lhs(model, x_hat, x_k):
    # lam*||x_hat||_1^2/||x_hat||^2 + q1(A x_hat - b) - q2(A x_k - b) - <x_hat - x_k, z_k>
    A, b, lam, loss = model.A, model.b, model.lam, model.loss
    y_hat, y_k = A @ x_hat - b, A @ x_k - b
    q2_k, t_k = loss.q2(y_k)
    z_k = A.T @ t_k
    l1 = float(np.sum(np.abs(x_hat)))
    return lam * l1 * l1 / float(np.sum(x_hat ** 2)) + 0.5 * float(np.sum(y_hat ** 2)) - q2_k - float(
        np.sum((x_hat - x_k) * z_k))


def test_surrogate_agrees_with_specialized_acceptance_test():
    rng = np.random.default_rng(12)
    for _ in range(200):
        m, n = 6, 10
        model = SquaredRatioModel(rng.standard_normal((m, n)), rng.standard_normal(m), rng.exponential(0.5),
                                  BoxBounds.uniform(n, -3, 3), RobustDistanceLoss(2))
        obj = build_objective(model)
        x_k = model.box.project(rng.standard_normal(n))
        state = make_state(obj, x_k)
        x_hat = prox_gradient_candidate(obj, state, rng.exponential(0.3))
        if not np.any(x_hat):
            continue
        got = surrogate_H(obj, x_hat, x_k, state.z)
        ref = _direct_acceptance_lhs(model, x_hat, x_k)
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_F_matches_model_objective_along_iterates():
    rng = np.random.default_rng(13)
    for loss in (QuadraticLoss(), LorentzianLoss(0.5), RobustDistanceLoss(2)):
        A = rng.standard_normal((10, 25))
        model = SquaredRatioModel(A, rng.standard_normal(10), 0.05, BoxBounds.unbounded(25), loss)
        obj = build_objective(model)
        xs = []
        solve(obj, np.linalg.lstsq(A, model.b, rcond=None)[0], SolverConfig(max_outer_iters=200),
              callback=lambda s, rec: xs.append(s.x))
        for x in xs:
            assert evaluate_F(obj, x) == pytest.approx(model.objective_value(x), rel=1e-10)


def test_objective_oracles_are_reentrant():
    rng = np.random.default_rng(14)
    A = rng.standard_normal((30, 60))
    model = SquaredRatioModel(A, rng.standard_normal(30), 0.1, BoxBounds.unbounded(60), RobustDistanceLoss(3))
    obj = build_objective(model)
    points = [rng.standard_normal(60) for _ in range(8)]
    expected = [model.objective_value(x) for x in points]
    errors = []

    def worker(k):
        for _ in range(300):
            j = (k + _) % len(points)
            if evaluate_F(obj, points[j]) != pytest.approx(expected[j], rel=1e-12):
                errors.append(j)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_support_enumeration_oracle_sanity():
    # the enumeration oracle agrees with sorting for distinct magnitudes
    y = np.array([0.3, -2.0, 1.1, 0.05])
    expect = 0.5 * (0.3 ** 2 + 0.05 ** 2)
    assert dist2_sparse_bruteforce(y, 2) == pytest.approx(expect)
