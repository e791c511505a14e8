"""Squared L1/L2 regularized recovery models.

Oracles for ``lam * ||x||_1^2 / ||x||_2^2 + q(Ax - b)`` over a box, with the
loss split as ``q = q1 - q2`` (``q1`` smooth, ``q2`` convex). Three losses are
provided: quadratic, Lorentzian and the squared distance to the set of
``r``-sparse vectors (robust compressed sensing).
"""

from dataclasses import dataclass, field

import numpy as np

from .core import FractionalObjective

__all__ = [
    "BoxBounds",
    "QuadraticLoss",
    "LorentzianLoss",
    "RobustDistanceLoss",
    "SquaredRatioModel",
    "ratio_coefficient",
    "prox_l1_box",
    "quadratic_loss",
    "lorentzian_loss",
    "project_sparse",
    "robust_distance_loss",
    "build_objective",
    "effective_sparsity",
    "loss_from_kind",
]


@dataclass(frozen=True)
class BoxBounds:
    """Closed hyperrectangle ``lower <= x <= upper`` containing the origin.

    Infinite entries are allowed on either side.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("box bounds may not contain NaN")
        if np.any(lower > upper):
            raise ValueError("box requires lower <= upper")
        if np.any(lower > 0) or np.any(upper < 0):
            raise ValueError("box must contain the origin")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unbounded(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def uniform(cls, n, lo, hi):
        return cls(np.full(n, float(lo)), np.full(n, float(hi)))

    @property
    def size(self):
        return self.lower.shape[0]

    @property
    def is_unbounded(self):
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))

    def contains(self, x):
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def project(self, x):
        return np.maximum(np.minimum(x, self.upper), self.lower)


def ratio_coefficient(x, lam):
    """Return ``sqrt(lam) * ||x||_1 / ||x||_2^2``, the ratio ``f(x)/g(x)``."""
    x = np.asarray(x, dtype=float)
    sq = float(x @ x)
    if sq == 0.0:
        raise ValueError("ratio coefficient undefined at x = 0")
    return np.sqrt(lam) * np.abs(x).sum() / sq


def effective_sparsity(x):
    """Return ``||x||_1^2 / ||x||_2^2``, a lower bound on ``||x||_0``."""
    x = np.asarray(x, dtype=float)
    sq = float(x @ x)
    if sq == 0.0:
        raise ValueError("effective sparsity undefined at x = 0")
    return np.abs(x).sum() ** 2 / sq


def prox_l1_box(v, tau, box):
    """Minimize ``tau*||u||_1 + 0.5*||u - v||^2`` over ``box``.

    The problem is separable: soft-threshold each entry by `tau`, then clamp.
    The clamp order ``max(min(., upper), lower)`` is fixed.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    v = np.asarray(v, dtype=float)
    shrunk = np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)
    return np.maximum(np.minimum(shrunk, box.upper), box.lower)


def quadratic_loss(y):
    y = np.asarray(y, dtype=float)
    return 0.5 * float(y @ y), y.copy()


def lorentzian_loss(y, gamma):
    """Lorentzian norm ``sum(log(1 + y_i^2/gamma^2))`` and its gradient."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    y = np.asarray(y, dtype=float)
    g2 = gamma * gamma
    value = float(np.log1p(y * y / g2).sum())
    return value, 2.0 * y / (g2 + y * y)


def project_sparse(y, outlier_count):
    """Keep the `outlier_count` largest-magnitude entries of `y`.

    Ties in magnitude go to the smaller index, so the result is deterministic.
    """
    y = np.asarray(y, dtype=float)
    r = int(outlier_count)
    if r < 0 or r > y.shape[0]:
        raise ValueError("outlier_count must lie in [0, len(y)]")
    out = np.zeros_like(y)
    if r == 0:
        return out
    keep = np.argsort(-np.abs(y), kind="stable")[:r]
    out[keep] = y[keep]
    return out


def robust_distance_loss(y, outlier_count):
    """Split ``0.5*dist^2(y, S_r)`` into ``q1 - q2``.

    Returns
    -------
    q1_value, q1_gradient, q2_value, q2_subgradient
        ``q1 = 0.5||y||^2`` and ``q2 = 0.5||T_r(y)||^2`` with ``T_r(y)``
        returned as the element of the subdifferential of ``q2``.
    """
    y = np.asarray(y, dtype=float)
    t = project_sparse(y, outlier_count)
    return 0.5 * float(y @ y), y.copy(), 0.5 * float(t @ t), t


class QuadraticLoss:
    kind = "quadratic"
    has_concave_part = False

    def q1(self, y):
        return quadratic_loss(y)

    def q2(self, y):
        return 0.0, np.zeros_like(y)

    def value(self, y):
        return quadratic_loss(y)[0]

    def params(self):
        return {}

    def __repr__(self):
        return "QuadraticLoss()"


class LorentzianLoss:
    kind = "lorentzian"
    has_concave_part = False

    def __init__(self, gamma):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        self.gamma = float(gamma)

    def q1(self, y):
        return lorentzian_loss(y, self.gamma)

    def q2(self, y):
        return 0.0, np.zeros_like(y)

    def value(self, y):
        return lorentzian_loss(y, self.gamma)[0]

    def params(self):
        return {"gamma": self.gamma}

    def __repr__(self):
        return f"LorentzianLoss(gamma={self.gamma!r})"


class RobustDistanceLoss:
    kind = "robust"
    has_concave_part = True

    def __init__(self, outlier_count):
        if int(outlier_count) != outlier_count or outlier_count < 0:
            raise ValueError("outlier_count must be a nonnegative integer")
        self.outlier_count = int(outlier_count)

    def q1(self, y):
        return quadratic_loss(y)

    def q2(self, y):
        t = project_sparse(y, self.outlier_count)
        return 0.5 * float(t @ t), t

    def value(self, y):
        d = y - project_sparse(y, self.outlier_count)
        return 0.5 * float(d @ d)

    def params(self):
        return {"outlier_count": self.outlier_count}

    def __repr__(self):
        return f"RobustDistanceLoss(outlier_count={self.outlier_count})"


def loss_from_kind(kind, gamma=None, outlier_count=None):
    if kind == "quadratic":
        return QuadraticLoss()
    if kind == "lorentzian":
        return LorentzianLoss(gamma)
    if kind == "robust":
        return RobustDistanceLoss(outlier_count)
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class SquaredRatioModel:
    """``min_{x in box} lam*||x||_1^2/||x||_2^2 + q(Ax - b)``."""

    A: np.ndarray
    b: np.ndarray
    lam: float
    box: BoxBounds
    loss: object = field(default_factory=QuadraticLoss)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or b.ndim != 1:
            raise ValueError("A must be 2-d and b 1-d")
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has length {b.shape[0]}")
        if A.shape[1] != self.box.size:
            raise ValueError(f"A has {A.shape[1]} columns but box has size {self.box.size}")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if isinstance(self.loss, RobustDistanceLoss) and self.loss.outlier_count > A.shape[0]:
            raise ValueError("outlier_count exceeds number of measurements")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return self.A.shape

    def objective_value(self, x):
        """Direct evaluation of the model objective (``inf`` at 0 or off-box)."""
        x = np.asarray(x, dtype=float)
        if not np.any(x) or not self.box.contains(x):
            return np.inf
        return self.lam * effective_sparsity(x) + self.loss.value(self.A @ x - self.b)

    def loss_at_minus_b(self):
        return self.loss.value(-self.b)


class _ResidualCache:
    # One-entry memo of Ax - b; the line search re-evaluates the same point
    # through several oracles. The entry is a single tuple so concurrent
    # callers never see a point paired with another point's residual.
    __slots__ = ("A", "b", "_entry")

    def __init__(self, A, b):
        self.A = A
        self.b = b
        self._entry = None

    def __call__(self, x):
        entry = self._entry
        if entry is not None and entry[0].shape == x.shape and np.array_equal(entry[0], x):
            return entry[1]
        y = self.A @ x - self.b
        self._entry = (np.array(x, dtype=float, copy=True), y)
        return y


def build_objective(model):
    """Map a `SquaredRatioModel` onto the generic fractional-program oracles.

    ``f = sqrt(lam)*||x||_1``, ``g = ||x||_2^2``, ``h1 = q1(Ax-b)``,
    ``h2 = q2(Ax-b)`` and ``C`` is the box.
    """
    A, lam, box, loss = model.A, model.lam, model.box, model.loss
    sqrt_lam = np.sqrt(lam)
    residual = _ResidualCache(A, model.b)

    def f_value(x):
        return sqrt_lam * float(np.abs(x).sum())

    def g_value(x):
        return float(x @ x)

    def g_grad(x):
        return 2.0 * x

    def h1_value(x):
        return loss.q1(residual(x))[0]

    def h1_grad(x):
        return A.T @ loss.q1(residual(x))[1]

    if loss.has_concave_part:
        def h2_value(x):
            return loss.q2(residual(x))[0]

        def h2_subgrad(x):
            return A.T @ loss.q2(residual(x))[1]
    else:
        zero = np.zeros(A.shape[1])

        def h2_value(x):
            return 0.0

        def h2_subgrad(x):
            return zero.copy()

    def prox_scaled_f_box(v, tau):
        return prox_l1_box(v, tau * sqrt_lam, box)

    return FractionalObjective(
        f_value=f_value,
        g_value=g_value,
        g_grad=g_grad,
        h1_value=h1_value,
        h1_grad=h1_grad,
        h2_value=h2_value,
        h2_subgrad=h2_subgrad,
        prox_scaled_f_box=prox_scaled_f_box,
        in_constraint=box.contains,
    )
