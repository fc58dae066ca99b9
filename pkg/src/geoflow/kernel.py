"""Sobolev metric operator L = (Id - alpha^2 Lap)^k and its inverse K.

Both are realized spectrally on the periodic grid. Lap is the standard
second-difference Laplacian, whose negative symbol per mode m is

    lambda_m = sum_axes (2 - 2 cos(2 pi m / N)) / h^2  >=  0,

so L multiplies mode m by (1 + alpha^2 lambda_m)^k >= 1 and K by its
reciprocal; K is a contraction in the node 2-norm. Real transforms are
used; the symbol is real and even, making both operators symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Array, Grid, ScalarField, VectorField

__all__ = [
    "SobolevKernel",
    "apply_L",
    "apply_K",
    "metric_inner",
    "metric_norm_sq",
    "default_alpha",
]


def default_alpha(grid: Grid) -> float:
    """Default smoothing length: twice the largest grid spacing."""
    return 2.0 * max(grid.spacing)


@dataclass(frozen=True)
class SobolevKernel:
    """Immutable spectral representation of L and K on one grid."""

    grid: Grid
    alpha: float
    power: int = 1

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if int(self.power) != self.power or self.power < 1:
            raise ValueError(f"kernel power must be an integer >= 1, got {self.power}")
        object.__setattr__(self, "power", int(self.power))
        lam = _laplacian_symbol(self.grid)
        sym = (1.0 + self.alpha**2 * lam) ** self.power
        object.__setattr__(self, "_symbol_L", sym)

    @property
    def symbol_L(self) -> Array:
        """Multiplier of L on the rfft mode grid (all entries >= 1)."""
        return self._symbol_L


def _laplacian_symbol(grid: Grid) -> Array:
    # rfft layout: full frequencies on leading axes, half on the last
    axes_freq = []
    for a, (n, h) in enumerate(zip(grid.shape, grid.spacing)):
        m = np.arange(n) if a < grid.dim - 1 else np.arange(n // 2 + 1)
        axes_freq.append((2.0 - 2.0 * np.cos(2.0 * np.pi * m / n)) / h**2)
    if grid.dim == 1:
        return axes_freq[0]
    return axes_freq[0][:, None] + axes_freq[1][None, :]


def spectral_apply(grid: Grid, symbol: Array, values: Array) -> Array:
    """Multiply (the trailing grid axes of) values by a real symbol."""
    spec = np.fft.rfftn(values, axes=tuple(range(-grid.dim, 0)))
    spec *= symbol
    return np.fft.irfftn(spec, s=grid.shape, axes=tuple(range(-grid.dim, 0)))


def _apply(kern: SobolevKernel, f, symbol: Array):
    if f.grid != kern.grid:
        raise ValueError("field and kernel live on different grids")
    out = spectral_apply(kern.grid, symbol, f.values)
    if isinstance(f, VectorField):
        return VectorField(f.grid, out)
    return ScalarField(f.grid, out)


def apply_L(kern: SobolevKernel, f):
    """Apply the metric operator L componentwise."""
    return _apply(kern, f, kern.symbol_L)


def apply_K(kern: SobolevKernel, f):
    """Apply the smoothing kernel K = L^-1 componentwise."""
    return _apply(kern, f, 1.0 / kern.symbol_L)


def metric_inner(kern: SobolevKernel, u: VectorField, v: VectorField) -> float:
    """<L u, v> summed over nodes and components, times cell volume."""
    lu = apply_L(kern, u)
    return float(np.sum(lu.values * v.values) * kern.grid.cell_volume)


def metric_norm_sq(kern: SobolevKernel, u: VectorField) -> float:
    """Squared Sobolev norm <L u, u>; non-negative by construction."""
    return metric_inner(kern, u, u)
