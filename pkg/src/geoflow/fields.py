"""Periodic grids, scalar/vector fields and deformation maps.

Conventions used throughout the package:

* grids are uniform and periodic in every axis; dim is 1 or 2,
* axis a of a 2-D array is the a-th spatial coordinate (values[ix, iy]),
* node i sits at physical coordinate i * spacing[a]; the domain has
  extent shape[a] * spacing[a] and wraps around,
* vector quantities (fields, point sets, displacements) are stored
  component-first: shape (dim,) + grid.shape,
* deformation maps are stored as displacements d with phi(x) = x + d(x).

Interpolation is periodic multilinear and exact at grid nodes; spatial
derivatives are periodic central differences, chosen so that grad and
-div are exact adjoints of each other under the plain node dot product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# fractional node offsets closer than this snap to the node itself, so
# points reconstructed as index*spacing interpolate exactly
_NODE_SNAP = 1e-9


class InversionError(RuntimeError):
    """Fixed-point inversion did not reach the requested tolerance.

    Carries the last composition residual (in cells) as .residual.
    """

    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid, 1-D or 2-D."""

    shape: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(h) for h in self.spacing)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        if len(shape) not in (1, 2):
            raise ValueError(f"grid must be 1-D or 2-D, got shape {shape}")
        if len(spacing) != len(shape):
            raise ValueError("spacing and shape must have equal length")
        if any(n < 4 for n in shape):
            raise ValueError(f"need at least 4 nodes per axis, got {shape}")
        if any(not np.isfinite(h) or h <= 0 for h in spacing):
            raise ValueError(f"spacing must be positive and finite, got {spacing}")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> tuple[float, ...]:
        return tuple(n * h for n, h in zip(self.shape, self.spacing))

    def coords(self) -> Array:
        """Node coordinates, shape (dim,) + shape."""
        axes = [np.arange(n) * h for n, h in zip(self.shape, self.spacing)]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def axis_coord(self, a: int) -> Array:
        return self.coords()[a]


def _check_values(grid: Grid, values: Array, lead: tuple[int, ...]) -> Array:
    values = np.asarray(values, dtype=float)
    want = lead + grid.shape
    if values.shape != want:
        raise ValueError(f"values shape {values.shape}, expected {want}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field values must be finite")
    return values


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: Array

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, ()))


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: Array  # (dim,) + grid.shape

    def __post_init__(self):
        object.__setattr__(
            self, "values", _check_values(self.grid, self.values, (self.grid.dim,))
        )


@dataclass(frozen=True)
class DeformationMap:
    """phi(x) = x + displacement(x), periodic in space."""

    grid: Grid
    displacement: VectorField

    def __post_init__(self):
        if self.displacement.grid != self.grid:
            raise ValueError("displacement lives on a different grid")

    def points(self) -> Array:
        """Mapped positions phi(x) at every node, shape (dim,) + shape."""
        return self.grid.coords() + self.displacement.values

    @property
    def is_diffeomorphic(self) -> bool:
        """True when the discrete Jacobian determinant is positive everywhere."""
        return bool(jacobian_det(self).values.min() > 0.0)


class TimePath:
    """Samples of a time-dependent quantity at t_k = k/steps, k = 0..steps.

    All samples must live on one grid (each sample exposes .grid).
    """

    def __init__(self, samples):
        samples = list(samples)
        if len(samples) < 2:
            raise ValueError("a time path needs at least 2 samples (steps >= 1)")
        g = samples[0].grid
        if any(s.grid != g for s in samples[1:]):
            raise ValueError("all samples of a time path must share one grid")
        self.samples = samples
        self.grid = g

    @property
    def steps(self) -> int:
        return len(self.samples) - 1

    @property
    def times(self) -> Array:
        return np.linspace(0.0, 1.0, len(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, k):
        return self.samples[k]

    def __iter__(self):
        return iter(self.samples)


def zeros(grid: Grid) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape))


def zeros_vector(grid: Grid) -> VectorField:
    return VectorField(grid, np.zeros((grid.dim,) + grid.shape))


def identity_map(grid: Grid) -> DeformationMap:
    return DeformationMap(grid, zeros_vector(grid))


def zero_path(grid: Grid, steps: int) -> TimePath:
    return TimePath([zeros_vector(grid) for _ in range(steps + 1)])


# ---------------------------------------------------------------------------
# interpolation


def _interp_weights(grid: Grid, points: Array):
    """Corner indices and weights of periodic multilinear interpolation.

    Returns per-axis (lo, hi, frac) with lo/hi wrapped integer indices.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] != grid.dim:
        raise ValueError(f"points must be ({grid.dim},)+..., got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("sample points must be finite")
    out = []
    for a in range(grid.dim):
        g = points[a] / grid.spacing[a]
        r = np.rint(g)
        g = np.where(np.abs(g - r) < _NODE_SNAP, r, g)
        lo = np.floor(g)
        frac = g - lo
        lo = lo.astype(np.int64) % grid.shape[a]
        hi = (lo + 1) % grid.shape[a]
        out.append((lo, hi, frac))
    return out


def interp_values(grid: Grid, values: Array, points: Array) -> Array:
    """Periodic multilinear interpolation of raw node values at points."""
    w = _interp_weights(grid, points)
    if grid.dim == 1:
        (lo, hi, f) = w[0]
        return values[..., lo] * (1.0 - f) + values[..., hi] * f
    (lx, hx, fx), (ly, hy, fy) = w
    v00 = values[..., lx, ly]
    v01 = values[..., lx, hy]
    v10 = values[..., hx, ly]
    v11 = values[..., hx, hy]
    return (
        v00 * (1.0 - fx) * (1.0 - fy)
        + v01 * (1.0 - fx) * fy
        + v10 * fx * (1.0 - fy)
        + v11 * fx * fy
    )


def sample(f, points: Array) -> Array:
    """Sample a ScalarField or VectorField at physical points.

    points has shape (dim,) + Q; the result has shape Q for scalar
    fields and (dim,) + Q for vector fields. Non-finite points are
    rejected.
    """
    return interp_values(f.grid, f.values, points)


# ---------------------------------------------------------------------------
# differential operators


def _diff(values: Array, axis: int, h: float) -> Array:
    # periodic central difference; adjoint of _diff is -_diff
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)


def grad(f: ScalarField) -> VectorField:
    """Central-difference gradient with periodic wrap."""
    g = f.grid
    comps = [_diff(f.values, a, g.spacing[a]) for a in range(g.dim)]
    return VectorField(g, np.stack(comps))


def div(u: VectorField) -> ScalarField:
    """Central-difference divergence; exact negative adjoint of grad."""
    g = u.grid
    out = np.zeros(g.shape)
    for a in range(g.dim):
        out += _diff(u.values[a], a, g.spacing[a])
    return ScalarField(g, out)


def displacement_jacobian_det(grid: Grid, disp: Array) -> Array:
    """det(I + central-difference Jacobian of the displacement)."""
    if grid.dim == 1:
        return 1.0 + _diff(disp[0], 0, grid.spacing[0])
    d00 = _diff(disp[0], 0, grid.spacing[0])
    d01 = _diff(disp[0], 1, grid.spacing[1])
    d10 = _diff(disp[1], 0, grid.spacing[0])
    d11 = _diff(disp[1], 1, grid.spacing[1])
    return (1.0 + d00) * (1.0 + d11) - d01 * d10


def jacobian_det(phi: DeformationMap) -> ScalarField:
    return ScalarField(phi.grid, displacement_jacobian_det(phi.grid, phi.displacement.values))


# ---------------------------------------------------------------------------
# composition and inversion


def compose(phi: DeformationMap, psi: DeformationMap) -> DeformationMap:
    """(phi o psi)(x) = psi(x) + d_phi(psi(x)).

    The displacement is resampled with the cubic interpolant: map
    composition is where resampling error is visible directly as a
    position error (compose with an inverse should return the
    identity), and the bilinear error budget does not hold 0.1 cell
    at registration-sized deformations.
    """
    if phi.grid != psi.grid:
        raise ValueError("maps live on different grids")
    from . import autodiff as ad

    g = phi.grid
    d_phi_at = ad.value(ad.interp_cubic(g, phi.displacement.values, psi.points()))
    return DeformationMap(g, VectorField(g, d_phi_at + psi.displacement.values))


def max_displacement_cells(phi: DeformationMap) -> float:
    """Largest node displacement magnitude, measured in cells per axis."""
    d = phi.displacement.values
    return float(
        max(np.abs(d[a]).max() / phi.grid.spacing[a] for a in range(phi.grid.dim))
    )


def invert(phi: DeformationMap, iters: int = 60, tol: float = 1e-7):
    """Fixed-point inverse d_inv(x) <- -d(x + d_inv(x)).

    Returns (inverse map, residual) where residual is
    ||phi o inverse - Id||_inf in cells. Raises InversionError carrying
    the residual if the iteration has not contracted below tol (update
    size in cells) within iters. phi must be diffeomorphic.
    """
    if not phi.is_diffeomorphic:
        raise ValueError("cannot invert a non-diffeomorphic map (det J <= 0 somewhere)")
    g = phi.grid
    x = g.coords()
    d = phi.displacement.values
    d_inv = np.zeros_like(d)
    h = np.array(g.spacing).reshape((g.dim,) + (1,) * g.dim)
    converged = False
    for _ in range(iters):
        upd = -interp_values(g, d, x + d_inv)
        step = np.abs((upd - d_inv) / h).max()
        d_inv = upd
        if step < tol:
            converged = True
            break
    inv = DeformationMap(g, VectorField(g, d_inv))
    residual = max_displacement_cells(compose(phi, inv))
    if not converged:
        raise InversionError(
            f"map inversion did not converge in {iters} iterations "
            f"(composition residual {residual:.3e} cells)",
            residual,
        )
    return inv, residual
