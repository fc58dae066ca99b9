"""Minimal reverse-mode tape over the package's field primitives.

The transport/matching forward passes are chains of a few primitive
operations (multilinear interpolation, central differences, spectral
multipliers, pointwise algebra, Jacobian determinants). Recording those
and replaying their hand-written vector-Jacobian products yields
gradients that are exact adjoints of the *implemented* discrete steps,
which is what the finite-difference gradient checks require; a
discretization of the continuous adjoint PDE would only agree up to
O(h^2 + dt^2).

Ops accept plain numpy arrays or Var handles and only record when at
least one input is a Var, so a single forward implementation serves
both plain evaluation and differentiation.
"""

from __future__ import annotations

import numpy as np

from .fields import Grid, _diff, _interp_weights

Array = np.ndarray


class Var:
    """A taped value: numpy array (or float) plus its parent links."""

    __slots__ = ("value", "parents", "tape")

    def __init__(self, value, tape, parents):
        self.value = value
        self.tape = tape
        self.parents = parents  # list of (Var, vjp callable)

    # convenience arithmetic so forward code reads like numpy
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    def __init__(self):
        self._nodes: list[Var] = []

    def leaf(self, value) -> Var:
        v = Var(np.asarray(value, dtype=float), self, [])
        self._nodes.append(v)
        return v

    def _record(self, value, parents) -> Var:
        v = Var(value, self, parents)
        self._nodes.append(v)
        return v

    def gradients(self, output: Var, leaves) -> list[Array]:
        """d output / d leaf for each leaf; output must be scalar.

        Single use: the walk frees parent links to release closures.
        """
        grads: dict[int, Array] = {id(output): np.asarray(1.0)}
        settled: dict[int, Array] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                settled[id(node)] = g
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
            node.parents = []  # free closures as we go
        out = []
        for leaf in leaves:
            g = settled.get(id(leaf))
            out.append(np.zeros_like(leaf.value) if g is None else g)
        return out


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: Array, shape) -> Array:
    """Sum g down to shape (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for a, n in enumerate(shape):
        if n == 1 and g.shape[a] != 1:
            g = g.sum(axis=a, keepdims=True)
    return g


def _binary(a, b, out, vjp_a, vjp_b):
    t = _tape_of(a, b)
    if t is None:
        return out
    parents = []
    if isinstance(a, Var):
        parents.append((a, vjp_a))
    if isinstance(b, Var):
        parents.append((b, vjp_b))
    return t._record(out, parents)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    sa = np.shape(av)
    sb = np.shape(bv)
    return _binary(a, b, out, lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    sa = np.shape(av)
    sb = np.shape(bv)
    return _binary(
        a, b, out, lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)
    )


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    sa = np.shape(av)
    sb = np.shape(bv)
    return _binary(
        a,
        b,
        out,
        lambda g: _unbroadcast(g * bv, sa),
        lambda g: _unbroadcast(g * av, sb),
    )


def scale(a, c: float):
    av = value(a)
    out = av * c
    t = _tape_of(a)
    if t is None:
        return out
    return t._record(out, [(a, lambda g: g * c)])


def svmul(s, v):
    """scalar field (S) times vector field ((dim,)+S), component-wise."""
    sv, vv = value(s), value(v)
    out = sv[None] * vv
    t = _tape_of(s, v)
    if t is None:
        return out
    parents = []
    if isinstance(s, Var):
        parents.append((s, lambda g: np.sum(g * vv, axis=0)))
    if isinstance(v, Var):
        parents.append((v, lambda g: g * sv[None]))
    return t._record(out, parents)


def sumsq(a) -> float | Var:
    av = value(a)
    out = float(np.sum(av * av))
    t = _tape_of(a)
    if t is None:
        return out
    return t._record(out, [(a, lambda g: (2.0 * float(g)) * av)])


def dot(a, b) -> float | Var:
    av, bv = value(a), value(b)
    out = float(np.sum(av * bv))
    return _binary(
        a, b, out, lambda g: float(g) * bv, lambda g: float(g) * av
    )


# ---------------------------------------------------------------------------
# field primitives


def grad_c(grid: Grid, f):
    """Central-difference gradient; adjoint is minus the divergence."""
    fv = value(f)
    out = np.stack([_diff(fv, a, grid.spacing[a]) for a in range(grid.dim)])
    t = _tape_of(f)
    if t is None:
        return out

    def vjp(g):
        acc = np.zeros(grid.shape)
        for a in range(grid.dim):
            acc -= _diff(g[a], a, grid.spacing[a])
        return acc

    return t._record(out, [(f, vjp)])


def div_c(grid: Grid, u):
    uv = value(u)
    out = np.zeros(grid.shape)
    for a in range(grid.dim):
        out += _diff(uv[a], a, grid.spacing[a])
    t = _tape_of(u)
    if t is None:
        return out

    def vjp(g):
        return -np.stack([_diff(g, a, grid.spacing[a]) for a in range(grid.dim)])

    return t._record(out, [(u, vjp)])


def spectral(grid: Grid, symbol: Array, f):
    """Real spectral multiplier; symmetric, so the VJP is itself."""
    fv = value(f)
    axes = tuple(range(-grid.dim, 0))
    out = np.fft.irfftn(np.fft.rfftn(fv, axes=axes) * symbol, s=grid.shape, axes=axes)
    t = _tape_of(f)
    if t is None:
        return out

    def vjp(g):
        return np.fft.irfftn(
            np.fft.rfftn(g, axes=axes) * symbol, s=grid.shape, axes=axes
        )

    return t._record(out, [(f, vjp)])


def _splat(grid: Grid, w, g: Array, lead: tuple[int, ...]) -> Array:
    """Transpose of interpolation: scatter g back to the corner nodes."""
    out = np.zeros(lead + grid.shape)
    if grid.dim == 1:
        (lo, hi, f) = w[0]
        for i in np.ndindex(lead):
            np.add.at(out[i], lo, g[i] * (1.0 - f))
            np.add.at(out[i], hi, g[i] * f)
        return out
    (lx, hx, fx), (ly, hy, fy) = w
    for i in np.ndindex(lead):
        np.add.at(out[i], (lx, ly), g[i] * (1.0 - fx) * (1.0 - fy))
        np.add.at(out[i], (lx, hy), g[i] * (1.0 - fx) * fy)
        np.add.at(out[i], (hx, ly), g[i] * fx * (1.0 - fy))
        np.add.at(out[i], (hx, hy), g[i] * fx * fy)
    return out


def interp(grid: Grid, f, pts):
    """Periodic multilinear interpolation, differentiable in both args.

    f: node values, shape lead + grid.shape (lead = () or (dim,));
    pts: physical points, shape (dim,) + Q.
    """
    fv, pv = value(f), value(pts)
    w = _interp_weights(grid, pv)
    lead = fv.shape[: fv.ndim - grid.dim]
    if grid.dim == 1:
        (lo, hi, fr) = w[0]
        c0, c1 = fv[..., lo], fv[..., hi]
        out = c0 * (1.0 - fr) + c1 * fr
        dg = [(c1 - c0) / grid.spacing[0]]
    else:
        (lx, hx, fx), (ly, hy, fy) = w
        v00 = fv[..., lx, ly]
        v01 = fv[..., lx, hy]
        v10 = fv[..., hx, ly]
        v11 = fv[..., hx, hy]
        out = (
            v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v10 * fx * (1.0 - fy)
            + v11 * fx * fy
        )
        dg = [
            ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) / grid.spacing[0],
            ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) / grid.spacing[1],
        ]
    t = _tape_of(f, pts)
    if t is None:
        return out
    parents = []
    if isinstance(f, Var):
        parents.append((f, lambda g: _splat(grid, w, np.broadcast_to(g, out.shape), lead)))
    if isinstance(pts, Var):
        # derivative of the interpolant in each point coordinate,
        # summed over any leading (component) axes of the field
        def vjp_pts(g):
            gb = np.broadcast_to(g, out.shape)
            sum_axes = tuple(range(len(lead)))
            return np.stack([np.sum(gb * d, axis=sum_axes) for d in dg])

        parents.append((pts, vjp_pts))
    return t._record(out, parents)


def _cubic_axis(n: int, h: float, coord: Array):
    """Per-axis Catmull-Rom taps: 4 wrapped index arrays, weights, d/dx weights."""
    g = coord / h
    r = np.rint(g)
    g = np.where(np.abs(g - r) < 1e-9, r, g)  # keep node evaluation exact
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    f2 = f * f
    f3 = f2 * f
    w = (
        -0.5 * f + f2 - 0.5 * f3,
        1.0 - 2.5 * f2 + 1.5 * f3,
        0.5 * f + 2.0 * f2 - 1.5 * f3,
        -0.5 * f2 + 0.5 * f3,
    )
    dw = (
        (-0.5 + 2.0 * f - 1.5 * f2) / h,
        (-5.0 * f + 4.5 * f2) / h,
        (0.5 + 4.0 * f - 4.5 * f2) / h,
        (-f + 1.5 * f2) / h,
    )
    idx = tuple((i0 + k) % n for k in (-1, 0, 1, 2))
    return idx, w, dw


def _scatter_cubic(grid: Grid, axes, vals: Array) -> Array:
    """Scatter point values to the nodes with the given cubic tap
    weights; one bincount over all taps (much faster than add.at)."""
    if grid.dim == 1:
        (ix, wx, _) = axes[0]
        idx = np.concatenate([ix[a].ravel() for a in range(4)])
        wts = np.concatenate([(vals * wx[a]).ravel() for a in range(4)])
        return np.bincount(idx, weights=wts, minlength=grid.shape[0]).reshape(
            grid.shape
        )
    (ix, wx, _), (iy, wy, _) = axes
    nx, ny = grid.shape
    idxs = []
    wts = []
    for a in range(4):
        base = ix[a] * ny
        for b in range(4):
            idxs.append((base + iy[b]).ravel())
            wts.append((vals * (wx[a] * wy[b])).ravel())
    return np.bincount(
        np.concatenate(idxs), weights=np.concatenate(wts), minlength=nx * ny
    ).reshape(grid.shape)


def interp_cubic(grid: Grid, f, pts):
    """Periodic Catmull-Rom interpolation, differentiable in both args.

    Same contract as interp() but with O(h^4) accuracy on smooth fields;
    not positivity-preserving (the kernel has negative lobes).
    """
    fv, pv = value(f), value(pts)
    lead = fv.shape[: fv.ndim - grid.dim]
    axes = [
        _cubic_axis(grid.shape[a], grid.spacing[a], pv[a]) for a in range(grid.dim)
    ]
    out = np.zeros(lead + pv.shape[1:])
    dg = [np.zeros(lead + pv.shape[1:]) for _ in range(grid.dim)]
    if grid.dim == 1:
        (ix, wx, dwx) = axes[0]
        for a in range(4):
            v = fv[..., ix[a]]
            out += v * wx[a]
            dg[0] += v * dwx[a]
    else:
        (ix, wx, dwx), (iy, wy, dwy) = axes
        for a in range(4):
            for b in range(4):
                v = fv[..., ix[a], iy[b]]
                out += v * (wx[a] * wy[b])
                dg[0] += v * (dwx[a] * wy[b])
                dg[1] += v * (wx[a] * dwy[b])
    t = _tape_of(f, pts)
    if t is None:
        return out
    parents = []
    if isinstance(f, Var):

        def vjp_f(g):
            gb = np.broadcast_to(g, out.shape)
            acc = np.zeros(lead + grid.shape)
            for i in np.ndindex(lead):
                acc[i] = _scatter_cubic(grid, axes, gb[i])
            return acc

        parents.append((f, vjp_f))
    if isinstance(pts, Var):

        def vjp_pts(g):
            gb = np.broadcast_to(g, out.shape)
            sum_axes = tuple(range(len(lead)))
            return np.stack([np.sum(gb * d, axis=sum_axes) for d in dg])

        parents.append((pts, vjp_pts))
    return t._record(out, parents)


def splat_cubic(grid: Grid, vals: Array, pts: Array) -> Array:
    """Scatter point values back to the nodes with Catmull-Rom weights.

    Exact transpose of interp_cubic in its field argument: for any node
    field f, sum(interp_cubic(f, pts) * vals) == sum(f * splat_cubic(vals, pts)).
    The weights at each point sum to 1, so sum(vals) is preserved exactly;
    this is the conservative (divergence-form) transfer used for densities.
    Plain arrays only, not tape-aware.
    """
    axes = [
        _cubic_axis(grid.shape[a], grid.spacing[a], pts[a]) for a in range(grid.dim)
    ]
    return _scatter_cubic(grid, axes, vals)


def jacdet_disp(grid: Grid, disp):
    """det(I + D disp) with central differences, differentiable in disp."""
    dv = value(disp)
    if grid.dim == 1:
        d00 = _diff(dv[0], 0, grid.spacing[0])
        out = 1.0 + d00
    else:
        d00 = _diff(dv[0], 0, grid.spacing[0])
        d01 = _diff(dv[0], 1, grid.spacing[1])
        d10 = _diff(dv[1], 0, grid.spacing[0])
        d11 = _diff(dv[1], 1, grid.spacing[1])
        out = (1.0 + d00) * (1.0 + d11) - d01 * d10
    t = _tape_of(disp)
    if t is None:
        return out

    def vjp(g):
        if grid.dim == 1:
            return np.stack([-_diff(g, 0, grid.spacing[0])])
        # adjoint of each D_b factor is -D_b
        g0 = -_diff(g * (1.0 + d11), 0, grid.spacing[0]) + _diff(
            g * d10, 1, grid.spacing[1]
        )
        g1 = -_diff(g * (1.0 + d00), 1, grid.spacing[1]) + _diff(
            g * d01, 0, grid.spacing[0]
        )
        return np.stack([g0, g1])

    return t._record(out, [(disp, vjp)])
