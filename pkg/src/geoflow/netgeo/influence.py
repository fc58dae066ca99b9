"""Leave-one-out influence through a damped Hessian solve.

The parameter influence of upweighting a point z is -(H + delta I)^-1
grad L(z, theta_hat); the loss influence against a test point is the
corresponding bilinear form. H itself can be singular for
overparameterized networks, so every solve is damped; delta defaults
to 1e-3 * trace(H)/d and is reported alongside the results. A
brute-force retraining oracle is included for validating the linear
prediction on convex fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NetSpec, net_grad, per_point_grads, total_gradient, train
from .metrics import hessian

__all__ = [
    "InfluenceSolveError",
    "InfluenceReport",
    "default_damping",
    "influence_params",
    "influence_loss",
    "influence_report",
    "loo_retrain_oracle",
]


class InfluenceSolveError(RuntimeError):
    """The damped Hessian solve failed; carries a condition estimate."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


def default_damping(H: np.ndarray) -> float:
    return 1e-3 * float(np.trace(H)) / H.shape[0]


def _damped(H: np.ndarray, delta: float | None):
    if delta is None:
        delta = default_damping(H)
    return H + delta * np.eye(H.shape[0]), delta


def _solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise InfluenceSolveError(str(exc), float(np.linalg.cond(A))) from exc
    if not np.all(np.isfinite(sol)):
        raise InfluenceSolveError(
            "solution has non-finite entries", float(np.linalg.cond(A))
        )
    return sol


def influence_params(
    spec: NetSpec,
    dataset,
    theta_hat: np.ndarray,
    z,
    delta: float | None = None,
    l2: float = 0.0,
) -> np.ndarray:
    """Predicted parameter response to upweighting z, as a d-vector."""
    x, y = z
    A, _ = _damped(hessian(spec, dataset, theta_hat, l2), delta)
    return -_solve(A, net_grad(spec, theta_hat, x, y))


def influence_loss(
    spec: NetSpec,
    dataset,
    theta_hat: np.ndarray,
    z,
    z_test,
    delta: float | None = None,
    l2: float = 0.0,
) -> float:
    """Predicted test-loss response to upweighting z; bilinear and
    symmetric in (z, z_test) because the damped Hessian is symmetric."""
    x, y = z
    xt, yt = z_test
    A, _ = _damped(hessian(spec, dataset, theta_hat, l2), delta)
    v = _solve(A, net_grad(spec, theta_hat, x, y))
    return -float(net_grad(spec, theta_hat, xt, yt) @ v)


@dataclass
class InfluenceReport:
    directions: np.ndarray  # (n, d): per-training-point parameter influence
    self_influence: np.ndarray  # (n,)
    loss_table: np.ndarray  # (n, n_test)
    delta: float
    test_points: list = field(default_factory=list)


def influence_report(
    spec: NetSpec,
    dataset,
    theta_hat: np.ndarray,
    test_points=(),
    delta: float | None = None,
    l2: float = 0.0,
) -> InfluenceReport:
    """Influence of every training point in one factorization: parameter
    directions, self-influence, and the loss table against test_points."""
    G = per_point_grads(spec, theta_hat, dataset.features, dataset.labels)
    A, delta = _damped(hessian(spec, dataset, theta_hat, l2), delta)
    directions = -_solve(A, G.T).T
    self_influence = np.einsum("nd,nd->n", G, directions)
    tests = list(test_points)
    if tests:
        GT = np.stack([net_grad(spec, theta_hat, x, y) for x, y in tests])
        loss_table = directions @ GT.T
    else:
        loss_table = np.zeros((dataset.n, 0))
    return InfluenceReport(directions, self_influence, loss_table, delta, tests)


def loo_retrain_oracle(
    spec: NetSpec,
    dataset,
    i: int,
    theta_hat: np.ndarray | None = None,
    l2: float = 0.0,
    lr: float = 1.0,
    max_iters: int = 1000,
) -> np.ndarray:
    """Exact leave-one-out optimum by retraining, warm-started at
    theta_hat, driven to gradient norm < 1e-10. Intended for small
    convex fixtures where that optimum is unique.

    First-order descent cannot certify progress once the per-step loss
    decrement drops below the resolution of the loss itself, which
    happens well above the 1e-10 gradient target, so the tail is
    finished with damped-free Newton steps on the (tiny, dense)
    Hessian.
    """
    if theta_hat is None:
        theta_hat = train(spec, dataset, lr=lr, max_iters=max_iters, tol=1e-10, l2=l2).theta
    loo = dataset.drop(i)
    res = train(spec, loo, lr=lr, max_iters=max_iters, tol=1e-10, l2=l2, theta0=theta_hat)
    theta = res.theta
    gn = res.grad_norm
    for _ in range(50):
        if gn < 1e-10:
            return theta
        g = total_gradient(spec, theta, loo, l2)
        step = _solve(hessian(spec, loo, theta, l2), g)
        theta = theta - step
        gn = float(np.linalg.norm(total_gradient(spec, theta, loo, l2)))
    raise RuntimeError(f"leave-one-out retraining stalled at gradient norm {gn:.3e}")
