"""Joint deformation plus appearance change."""

import numpy as np
import pytest

from conftest import torus
from geoflow import lddmm
from geoflow.fields import Grid, ScalarField, TimePath, VectorField
from geoflow.kernel import SobolevKernel
from geoflow.metamorphosis import morph_energy, morph_energy_parts, morph_register


def cos_bump(grid: Grid, cx_cells, cy_cells, r_cells, amp=1.0):
    h = grid.spacing[0]
    x, y = grid.coords()
    r = np.hypot(x - cx_cells * h, y - cy_cells * h)
    rad = r_cells * h
    return ScalarField(grid, amp * np.where(r < rad, np.cos(np.pi * r / (2 * rad)) ** 2, 0.0))


def zero_u(grid: Grid, steps: int) -> TimePath:
    return TimePath([VectorField(grid, np.zeros((2,) + grid.shape)) for _ in range(steps + 1)])


def zero_z(grid: Grid, steps: int) -> TimePath:
    return TimePath([ScalarField(grid, np.zeros(grid.shape)) for _ in range(steps + 1)])


def test_all_zero_energy():
    g = torus(16)
    kern = SobolevKernel(g, alpha=2 / 16)
    i0 = ScalarField(g, np.random.default_rng(0).random(g.shape))
    assert morph_energy(i0, i0, zero_u(g, 8), zero_z(g, 8), kern, 1.0, 0.5) == 0.0


def test_frozen_appearance_reduces_to_registration_bitwise():
    n, steps = 8, 8
    g = torus(n)
    kern = SobolevKernel(g, alpha=2.0 / n)
    rng = np.random.default_rng(1)
    i0 = ScalarField(g, rng.random(g.shape))
    i1 = ScalarField(g, rng.random(g.shape))
    u_path = TimePath(
        [VectorField(g, 0.1 * rng.standard_normal((2,) + g.shape)) for _ in range(steps + 1)]
    )
    prob = lddmm.RegistrationProblem(i0, i1, kern, beta=1.3, steps=steps)
    kin_m, zpen, match_m, total_m = morph_energy_parts(i0, i1, u_path, zero_z(g, steps), kern, 1.3, 0.37)
    kin_l, match_l, total_l = lddmm.energy_parts(prob, u_path)
    assert zpen == 0.0
    assert kin_m == kin_l and match_m == match_l and total_m == total_l
    assert morph_energy(i0, i1, u_path, zero_z(g, steps), kern, 1.3, 0.37) == lddmm.energy(prob, u_path)


def test_pure_appearance_constant_source():
    # u = 0, z = I1 - I0 at every sample: transport integrates dt * z,
    # the final image equals the target, and only the source penalty pays
    n, steps = 8, 8
    g = torus(n)
    kern = SobolevKernel(g, alpha=2.0 / n)
    rng = np.random.default_rng(2)
    i0 = ScalarField(g, rng.random(g.shape))
    i1 = ScalarField(g, rng.random(g.shape))
    diff = i1.values - i0.values
    z_path = TimePath([ScalarField(g, diff.copy()) for _ in range(steps + 1)])
    sigma2 = 0.5
    kin, zpen, match, total = morph_energy_parts(i0, i1, zero_u(g, steps), z_path, kern, 1.0, sigma2)
    assert kin == 0.0
    assert np.sqrt(match) < 1e-12
    l2 = g.cell_volume * float(np.sum(diff**2))
    assert total == pytest.approx(l2 / (2 * sigma2), rel=1e-12)


def test_identical_images_stay_at_rest():
    g = torus(16)
    kern = SobolevKernel(g, alpha=2 / 16)
    i0 = ScalarField(g, np.random.default_rng(3).random(g.shape))
    res = morph_register(i0, i0, kern, beta=1.0, sigma2=1.0, steps=4, max_iters=20)
    assert res.converged
    assert max(np.abs(s.values).max() for s in res.u_path) < 1e-12
    assert max(np.abs(s.values).max() for s in res.z_path) < 1e-12


def test_disjoint_supports_resolve_through_appearance():
    # far-apart bumps: with a cheap source the flow stays essentially unused
    n = 32
    g = torus(n)
    kern = SobolevKernel(g, alpha=8.0 / n)
    i0 = cos_bump(g, 8, 16, 3, amp=0.4)
    i1 = cos_bump(g, 24, 16, 3, amp=0.4)

    def flat_u_norm(res):
        return np.sqrt(sum(np.sum(s.values**2) for s in res.u_path))

    hi = morph_register(i0, i1, kern, beta=4.0, sigma2=1e3, steps=16, max_iters=300, tol=1e-10)
    lo = morph_register(i0, i1, kern, beta=4.0, sigma2=1e-6, steps=16, max_iters=300, tol=1e-10)
    assert flat_u_norm(hi) < 1e-3 * flat_u_norm(lo)


def test_source_penalty_monotone_in_sigma2():
    # doubling sigma2 never increases the converged source penalty
    n = 32
    g = torus(n)
    kern = SobolevKernel(g, alpha=2.0 / n)
    fixtures = [
        (cos_bump(g, 12, 16, 6), cos_bump(g, 18, 16, 6)),
        (cos_bump(g, 16, 12, 7, amp=0.8), cos_bump(g, 16, 19, 6)),
        (
            ScalarField(g, cos_bump(g, 10, 10, 5).values + 0.5 * cos_bump(g, 22, 22, 4).values),
            ScalarField(g, cos_bump(g, 12, 12, 5).values + 0.7 * cos_bump(g, 20, 20, 4).values),
        ),
    ]
    for i0, i1 in fixtures:
        pens = []
        for sigma2 in (32.0, 64.0, 128.0, 256.0):
            res = morph_register(i0, i1, kern, beta=1.0, sigma2=sigma2, steps=8, max_iters=300, tol=1e-10)
            pens.append(res.energy_trace[-1][1])
        assert all(b <= a * (1 + 1e-9) for a, b in zip(pens, pens[1:])), pens


def test_alternate_updates_also_descend():
    n = 16
    g = torus(n)
    kern = SobolevKernel(g, alpha=2.0 / n)
    i0 = cos_bump(g, 7, 8, 3)
    i1 = cos_bump(g, 9, 8, 3)
    res = morph_register(i0, i1, kern, beta=1.0, sigma2=64.0, steps=4, max_iters=40, alternate=True)
    totals = [row[-1] for row in res.energy_trace]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(totals, totals[1:]))
    assert totals[-1] < totals[0]


def test_invalid_inputs_rejected():
    g = torus(8)
    kern = SobolevKernel(g, alpha=0.25)
    i0 = ScalarField(g, np.zeros(g.shape))
    with pytest.raises(ValueError):
        morph_register(i0, i0, kern, sigma2=0.0)
    with pytest.raises(ValueError):
        morph_register(i0, ScalarField(torus(16), np.zeros((16, 16))), kern)
