"""Joint deformation/appearance matching.

Metamorphosis relaxes pure advection with an appearance source z:

    dJ/dt + grad J . u = z,

and charges it quadratically, giving the energy

    E(u, z) = 1/2 trapz <L u_t, u_t>
            + 1/(2 sigma^2) trapz ||z_t||^2
            + beta ||J_1 - I1||^2.

sigma^2 interpolates between pure registration (sigma^2 -> 0 freezes z)
and pure appearance change (sigma^2 large: u stays near 0 and z carries
the residual). With z identically zero the energy and its u-gradient
are computed by exactly the same float operations as the registration
module, so the reduction is bit-for-bit.

Descent runs jointly in (u, z) by default: u moves along its Sobolev
gradient, z along its natural gradient in the (1/sigma^2)-weighted L2
metric (z + sigma^2 * adjoint source), one shared Armijo step. The
alternate flag switches to one u sweep then one z sweep per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _descent
from .fields import Grid, ScalarField, TimePath, VectorField
from .kernel import SobolevKernel
from .transport import DEFAULT_STEPS, integrate_flow

__all__ = ["MorphResult", "morph_energy", "morph_energy_parts", "morph_register"]


@dataclass
class MorphResult:
    u_path: TimePath  # velocity samples
    z_path: TimePath  # appearance source samples
    phi_path: TimePath  # forward maps of the final velocity
    energy_trace: list[tuple]  # (kinetic, source penalty, matching, total)
    converged: bool
    iterations: int


def _validate(image0, image1, kern, sigma2, beta):
    if image0.grid != image1.grid or kern.grid != image0.grid:
        raise ValueError("images and kernel must share one grid")
    if not np.isfinite(sigma2) or sigma2 <= 0:
        raise ValueError(f"sigma2 must be finite and > 0, got {sigma2}")
    if not np.isfinite(beta) or beta < 0:
        raise ValueError(f"beta must be finite and >= 0, got {beta}")


def morph_energy_parts(
    image0: ScalarField,
    image1: ScalarField,
    u_path: TimePath,
    z_path: TimePath,
    kern: SobolevKernel,
    beta: float = 1.0,
    sigma2: float = 1.0,
):
    """(kinetic, source penalty, matching, total)."""
    _validate(image0, image1, kern, sigma2, beta)
    if u_path.steps != z_path.steps:
        raise ValueError("u and z paths must share the time discretization")
    return _descent.energy_parts(
        image0.grid,
        kern,
        image0.values,
        image1.values,
        beta,
        [s.values for s in u_path],
        [s.values for s in z_path],
        sigma2,
    )


def morph_energy(image0, image1, u_path, z_path, kern, beta=1.0, sigma2=1.0) -> float:
    return morph_energy_parts(image0, image1, u_path, z_path, kern, beta, sigma2)[3]


def morph_register(
    image0: ScalarField,
    image1: ScalarField,
    kern: SobolevKernel,
    beta: float = 1.0,
    sigma2: float = 1.0,
    steps: int = DEFAULT_STEPS,
    max_iters: int = 200,
    tol: float = 1e-8,
    alternate: bool = False,
) -> MorphResult:
    """Minimize the metamorphosis energy from u = 0, z = 0."""
    _validate(image0, image1, kern, sigma2, beta)
    g: Grid = image0.grid
    u, z, trace, converged, iters = _descent.minimize_matching(
        g,
        kern,
        image0.values,
        image1.values,
        beta,
        steps,
        max_iters,
        tol,
        sigma2=sigma2,
        alternate=alternate,
    )
    u_path = TimePath([VectorField(g, a) for a in u])
    return MorphResult(
        u_path=u_path,
        z_path=TimePath([ScalarField(g, a) for a in z]),
        phi_path=integrate_flow(u_path).forward,
        energy_trace=trace,
        converged=converged,
        iterations=iters,
    )
