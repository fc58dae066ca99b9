"""Tanh networks with hand-rolled exact backprop.

Two architectures share one flat parameter vector:

  * feed-forward: x -> tanh(W1 x + b1) -> ... -> W_L a + b_L, the last
    layer linear;
  * residual: width-preserving blocks a <- a + tanh(W a + b) with a
    parameterless mean readout, so every parameter belongs to exactly
    one block (the curve-length diagnostics integrate over blocks).

The scalar head feeds either binary cross-entropy on the logit or
squared error. Gradients are exact (they match finite differences to
round-off), which the curvature and influence diagnostics rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NetSpec",
    "TrainResult",
    "NetDivergenceError",
    "param_count",
    "param_layout",
    "init_params",
    "predict",
    "net_loss",
    "net_grad",
    "total_loss",
    "total_gradient",
    "per_point_grads",
    "train",
]

MAX_PARAMS = 2000


class NetDivergenceError(RuntimeError):
    """Training reached a non-finite loss."""


@dataclass(frozen=True)
class NetSpec:
    in_dim: int
    widths: tuple = ()
    loss: str = "bce"
    residual: bool = False
    bias: bool = True
    out_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_dim < 1 or any(w < 1 for w in self.widths) or self.out_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.loss not in ("bce", "mse"):
            raise ValueError("loss must be 'bce' or 'mse'")
        if self.residual and any(w != self.in_dim for w in self.widths):
            raise ValueError("residual blocks must preserve the input width")
        if self.residual and not self.widths:
            raise ValueError("a residual spec needs at least one block")
        if param_count(self) > MAX_PARAMS:
            raise ValueError(f"parameter count exceeds {MAX_PARAMS}")

    @property
    def n_blocks(self) -> int:
        return len(self.widths)


def _layer_dims(spec: NetSpec):
    if spec.residual:
        return [(spec.in_dim, spec.in_dim) for _ in spec.widths]
    dims = [spec.in_dim, *spec.widths, spec.out_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def param_layout(spec: NetSpec):
    """Flat-vector layout: (name, shape, slice) per tensor, layer order."""
    entries = []
    off = 0
    for l, (out, inp) in enumerate(_layer_dims(spec)):
        entries.append((f"W{l}", (out, inp), slice(off, off + out * inp)))
        off += out * inp
        if spec.bias:
            entries.append((f"b{l}", (out,), slice(off, off + out)))
            off += out
    return entries


def param_count(spec: NetSpec) -> int:
    total = 0
    for out, inp in _layer_dims(spec):
        total += out * inp + (out if spec.bias else 0)
    return total


def layer_slices(spec: NetSpec):
    """One slice of the flat vector per layer (weights and bias)."""
    per_layer = {}
    for name, _, sl in param_layout(spec):
        l = int(name[1:])
        lo, hi = per_layer.get(l, (sl.start, sl.stop))
        per_layer[l] = (min(lo, sl.start), max(hi, sl.stop))
    return [slice(lo, hi) for _, (lo, hi) in sorted(per_layer.items())]


def _unpack(spec: NetSpec, theta: np.ndarray):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != param_count(spec):
        raise ValueError("parameter vector length does not match the spec")
    layers = []
    entries = param_layout(spec)
    k = 0
    for o, _ in _layer_dims(spec):
        _, shape, sl = entries[k]
        w = theta[sl].reshape(shape)
        k += 1
        if spec.bias:
            _, _, bsl = entries[k]
            b = theta[bsl]
            k += 1
        else:
            b = np.zeros(o)
        layers.append((w, b))
    return layers


def init_params(spec: NetSpec, seed: int = 0) -> np.ndarray:
    """Layer-scaled uniform weights (half-width 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(param_count(spec))
    for name, shape, sl in param_layout(spec):
        if name.startswith("W"):
            limit = 1.0 / np.sqrt(shape[1])
            theta[sl] = rng.uniform(-limit, limit, size=shape[0] * shape[1])
    return theta


def _forward(spec: NetSpec, layers, X: np.ndarray):
    """Returns (outputs, cache); cache holds per-layer inputs and tanh values."""
    a = X
    cache = []
    if spec.residual:
        for w, b in layers:
            t = np.tanh(a @ w.T + b)
            cache.append((a, t))
            a = a + t
        return a, cache
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        z = a @ w.T + b
        if l == last:
            cache.append((a, None))
            a = z
        else:
            t = np.tanh(z)
            cache.append((a, t))
            a = t
    return a, cache


def feature_map(spec: NetSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Network output before the loss: (n, out_dim) for feed-forward
    specs, (n, width) block-stack state for residual ones."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out, _ = _forward(spec, _unpack(spec, theta), X)
    return out


def _logits(spec: NetSpec, layers, X: np.ndarray):
    out, cache = _forward(spec, layers, X)
    if spec.residual:
        return out.mean(axis=1), cache
    if spec.out_dim != 1:
        raise ValueError("loss operations need a scalar head (out_dim = 1)")
    return out[:, 0], cache


def predict(spec: NetSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f, _ = _logits(spec, _unpack(spec, theta), X)
    return f


def _loss_values(spec: NetSpec, f: np.ndarray, y: np.ndarray) -> np.ndarray:
    if spec.loss == "bce":
        return np.logaddexp(0.0, f) - y * f
    return 0.5 * (f - y) ** 2


def _loss_seeds(spec: NetSpec, f: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dL/df per point."""
    if spec.loss == "bce":
        return 1.0 / (1.0 + np.exp(-f)) - y
    return f - y


def _backprop(spec: NetSpec, layers, cache, seeds: np.ndarray, per_point: bool):
    """Gradient of sum_i seeds_i * f_i in the flat layout.

    per_point=True returns an (n, d) matrix instead (seeds then scale
    each point's own gradient row).
    """
    n = seeds.shape[0]
    d = param_count(spec)
    entries = param_layout(spec)
    if per_point:
        G = np.zeros((n, d))
    else:
        G = np.zeros(d)
    k = len(entries) - 1

    def put(sl, vals):
        if per_point:
            G[:, sl] = vals.reshape(n, -1)
        else:
            G[sl] = vals.ravel()

    if spec.residual:
        w0 = spec.in_dim
        delta = np.repeat(seeds[:, None] / w0, w0, axis=1)
        for l in range(len(layers) - 1, -1, -1):
            w, _ = layers[l]
            a_in, t = cache[l]
            dz = delta * (1.0 - t * t)
            if spec.bias:
                put(entries[2 * l + 1][2], dz if per_point else dz.sum(0))
            gw = (
                np.einsum("no,ni->noi", dz, a_in)
                if per_point
                else dz.T @ a_in
            )
            put(entries[(2 * l) if spec.bias else l][2], gw)
            delta = delta + dz @ w
        return G

    last = len(layers) - 1
    delta = None
    for l in range(last, -1, -1):
        w, _ = layers[l]
        a_in, t = cache[l]
        if l == last:
            dz = seeds[:, None] * np.ones((1, w.shape[0]))
            if spec.out_dim != 1:
                raise ValueError("loss operations need a scalar head")
        else:
            dz = delta * (1.0 - t * t)
        idx = (2 * l) if spec.bias else l
        if spec.bias:
            put(entries[idx + 1][2], dz if per_point else dz.sum(0))
        gw = np.einsum("no,ni->noi", dz, a_in) if per_point else dz.T @ a_in
        put(entries[idx][2], gw)
        delta = dz @ w
    return G


def net_loss(spec: NetSpec, theta: np.ndarray, x: np.ndarray, y: float) -> float:
    """Per-point loss L(z, theta)."""
    f = predict(spec, theta, x)
    return float(_loss_values(spec, f, np.asarray([y], dtype=float))[0])


def net_grad(spec: NetSpec, theta: np.ndarray, x: np.ndarray, y: float) -> np.ndarray:
    """Exact per-point gradient; matches finite differences of net_loss."""
    return per_point_grads(spec, theta, np.atleast_2d(x), np.asarray([y]))[0]


def per_point_grads(
    spec: NetSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray
) -> np.ndarray:
    """(n, d) matrix of per-point loss gradients."""
    layers = _unpack(spec, theta)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).ravel()
    f, cache = _logits(spec, layers, X)
    return _backprop(spec, layers, cache, _loss_seeds(spec, f, Y), True)


def total_loss(spec, theta, dataset, l2: float = 0.0) -> float:
    """Weighted data loss plus the ridge term (l2/2)|theta|^2."""
    f = predict(spec, theta, dataset.features)
    data = float(np.dot(dataset.weights, _loss_values(spec, f, dataset.labels)))
    return data + 0.5 * l2 * float(np.dot(theta, theta))


def total_gradient(spec, theta, dataset, l2: float = 0.0) -> np.ndarray:
    layers = _unpack(spec, theta)
    f, cache = _logits(spec, layers, dataset.features)
    seeds = dataset.weights * _loss_seeds(spec, f, dataset.labels)
    g = _backprop(spec, layers, cache, seeds, False)
    if l2:
        g = g + l2 * np.asarray(theta, dtype=float)
    return g


@dataclass
class TrainResult:
    theta: np.ndarray
    loss: float
    grad_norm: float
    iterations: int
    converged: bool


def train(
    spec: NetSpec,
    dataset,
    lr: float = 1.0,
    max_iters: int = 500,
    tol: float = 1e-8,
    l2: float = 0.0,
    seed: int = 0,
    theta0: np.ndarray | None = None,
) -> TrainResult:
    """Full-batch gradient descent with Armijo backtracking.

    Stops when the gradient norm falls below tol (converged) or the
    iteration budget runs out. Deterministic given the seed.
    """
    theta = init_params(spec, seed) if theta0 is None else np.array(theta0, dtype=float)
    loss = total_loss(spec, theta, dataset, l2)
    if not np.isfinite(loss):
        raise NetDivergenceError("initial loss is not finite")
    it = 0
    for it in range(1, max_iters + 1):
        g = total_gradient(spec, theta, dataset, l2)
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            raise NetDivergenceError(f"gradient diverged at iteration {it}")
        if gn < tol:
            return TrainResult(theta, loss, gn, it - 1, True)
        eta = lr
        accepted = False
        for _ in range(40):
            cand = theta - eta * g
            with np.errstate(over="ignore", invalid="ignore"):
                cl = total_loss(spec, cand, dataset, l2)
            if np.isfinite(cl) and cl <= loss - 1e-4 * eta * gn * gn:
                theta, loss = cand, cl
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
    g = total_gradient(spec, theta, dataset, l2)
    gn = float(np.linalg.norm(g))
    return TrainResult(theta, loss, gn, it, gn < tol)
