"""Curvature and geometry diagnostics for trained networks.

All matrices here are dense and d stays small (at most 2000
parameters), so everything is exactly checkable: the Hessian by
differencing the exact gradient, the gradient-outer-product metric by
direct summation, and input-output Jacobians by forward-mode push of
the standard basis.
"""

from __future__ import annotations

import numpy as np

from .model import (
    NetSpec,
    _unpack,
    layer_slices,
    param_count,
    per_point_grads,
    total_gradient,
)

__all__ = [
    "hessian",
    "fisher_metric",
    "fisher_rao_norm",
    "curve_complexity",
    "dynamic_isometry",
]

FD_STEP = 1e-4


def hessian(spec: NetSpec, dataset, theta: np.ndarray, l2: float = 0.0) -> np.ndarray:
    """Hessian of the weighted data loss by central differences of the
    exact gradient, plus the ridge term, symmetrized.

    The per-coordinate step is 1e-4 scaled by max(1, |theta_j|).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    d = param_count(spec)
    H = np.empty((d, d))
    for j in range(d):
        h = FD_STEP * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tp[j] += h
        tm = theta.copy()
        tm[j] -= h
        H[:, j] = (
            total_gradient(spec, tp, dataset) - total_gradient(spec, tm, dataset)
        ) / (2.0 * h)
    H = 0.5 * (H + H.T)
    if l2:
        H = H + l2 * np.eye(d)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("Hessian has non-finite entries")
    return H


def fisher_metric(spec: NetSpec, dataset, theta: np.ndarray) -> np.ndarray:
    """Weighted mean of per-point gradient outer products; symmetric
    positive semidefinite by construction."""
    G = per_point_grads(spec, theta, dataset.features, dataset.labels)
    return (G * dataset.weights[:, None]).T @ G


def fisher_rao_norm(spec: NetSpec, dataset, theta: np.ndarray) -> float:
    """Quadratic form of the gradient-outer-product metric at theta."""
    theta = np.asarray(theta, dtype=float).ravel()
    return float(theta @ fisher_metric(spec, dataset, theta) @ theta)


def curve_complexity(spec: NetSpec, dataset, theta: np.ndarray) -> float:
    """Discrete curve energy of a residual network: each block's
    parameters, zero-padded to the full vector, act as one velocity
    sample, and the metric is frozen at theta.

    Equals fisher_rao_norm for a single block.
    """
    if not spec.residual:
        raise ValueError("curve complexity is defined for residual specs only")
    theta = np.asarray(theta, dtype=float).ravel()
    metric = fisher_metric(spec, dataset, theta)
    total = 0.0
    for sl in layer_slices(spec):
        v = np.zeros_like(theta)
        v[sl] = theta[sl]
        total += float(v @ metric @ v)
    return total / spec.n_blocks


def dynamic_isometry(spec: NetSpec, theta: np.ndarray, x_probe: np.ndarray) -> np.ndarray:
    """Descending singular values of the input-output Jacobian at one
    probe point, built column-by-column in forward mode.

    For residual specs the map is the block stack (the mean readout is
    parameter-free and excluded), so an all-zero network is exactly the
    identity and returns a flat spectrum of ones.
    """
    x = np.asarray(x_probe, dtype=float).ravel()
    if x.shape[0] != spec.in_dim:
        raise ValueError("probe point does not match in_dim")
    layers = _unpack(spec, theta)
    a = x
    J = np.eye(spec.in_dim)
    if spec.residual:
        for w, b in layers:
            t = np.tanh(w @ a + b)
            J = J + ((1.0 - t * t)[:, None] * w) @ J
            a = a + t
    else:
        last = len(layers) - 1
        for l, (w, b) in enumerate(layers):
            z = w @ a + b
            J = w @ J
            if l != last:
                t = np.tanh(z)
                J = (1.0 - t * t)[:, None] * J
                a = t
            else:
                a = z
    return np.linalg.svd(J, compute_uv=False)
