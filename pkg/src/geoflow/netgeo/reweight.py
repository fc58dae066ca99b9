"""Two-level reweighted training.

Outer loop over sample weights, inner plain gradient step on the
weighted training loss. After each step a point's weight candidate is
the clipped alignment of its own loss gradient with the validation
gradient: points that pull the parameters the same way the clean
validation set does keep their weight, points that pull against it
are zeroed. Weights are renormalized to sum to one every iteration
(uniform fallback when everything clips to zero).
"""

from __future__ import annotations

import numpy as np

from .model import NetSpec, init_params, per_point_grads, total_gradient

__all__ = ["reweight_train"]


def reweight_train(
    spec: NetSpec,
    train_set,
    valid_set,
    outer_iters: int = 50,
    inner_lr: float = 0.1,
    seed: int = 0,
    l2: float = 0.0,
):
    """Returns (theta, eps) after outer_iters reweighting rounds.

    eps stays nonnegative and sums to one after every round;
    deterministic given the seed.
    """
    if valid_set.n == 0:
        raise ValueError("validation set is empty")
    n = train_set.n
    eps = np.full(n, 1.0 / n)
    theta = init_params(spec, seed)
    for _ in range(outer_iters):
        g = total_gradient(spec, theta, train_set.with_weights(eps), l2)
        theta = theta - inner_lr * g
        G = per_point_grads(spec, theta, train_set.features, train_set.labels)
        g_valid = total_gradient(spec, theta, valid_set)
        cand = np.maximum(0.0, G @ g_valid)
        s = cand.sum()
        eps = cand / s if s > 0 else np.full(n, 1.0 / n)
    return theta, eps
