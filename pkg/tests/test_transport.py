"""Flow integration, advection, and conservative adjoint transport."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import torus
from geoflow.fields import Grid, ScalarField, TimePath, VectorField, interp_values
from geoflow.kernel import SobolevKernel, spectral_apply
from geoflow.transport import FlowBlowupError, advect, continuity, integrate_flow


def constant_path(grid: Grid, c, steps: int) -> TimePath:
    d = np.stack([np.full(grid.shape, c[0]), np.full(grid.shape, c[1])])
    return TimePath([VectorField(grid, d) for _ in range(steps + 1)])


def zero_path(grid: Grid, steps: int) -> TimePath:
    return TimePath([VectorField(grid, np.zeros((2,) + grid.shape)) for _ in range(steps + 1)])


def smooth_random_path(grid: Grid, steps: int, scale: float, seed: int) -> TimePath:
    """Velocity samples smoothed twice by the kernel so transport stays
    resolved on the grid; peak amplitude is scale."""
    rng = np.random.default_rng(seed)
    sm = SobolevKernel(grid, alpha=4 * grid.spacing[0])
    frames = []
    for _ in range(steps + 1):
        comp = []
        for _ in range(2):
            f = spectral_apply(grid, 1.0 / sm.symbol_L**2, rng.standard_normal(grid.shape))
            comp.append(scale * f / np.abs(f).max())
        frames.append(VectorField(grid, np.stack(comp)))
    return TimePath(frames)


def test_zero_field_gives_identity():
    g = torus(16)
    maps = integrate_flow(zero_path(g, 8))
    for phi in list(maps.forward) + list(maps.backward):
        assert np.all(phi.displacement.values == 0)


def test_constant_field_translates():
    g = torus(32)
    h = g.spacing[0]
    c = (3 * h, 2 * h)
    maps = integrate_flow(constant_path(g, c, 16))
    want = np.array(c).reshape(2, 1, 1)
    assert_allclose(maps.forward[-1].displacement.values, np.broadcast_to(want, (2,) + g.shape), atol=1e-12)

    # whole-cell translation lands on nodes, so advection is exact
    rng = np.random.default_rng(0)
    img = ScalarField(g, rng.standard_normal(g.shape))
    j = advect(img, constant_path(g, c, 16))
    assert np.all(j[0].values == img.values)
    # the blob moves by +c: the final frame is the input rolled 3 and 2 nodes
    rolled = np.roll(img.values, (3, 2), axis=(0, 1))
    assert_allclose(j[-1].values, rolled, atol=1e-10)


def test_rigid_rotation_matches_analytic_map():
    n = 32
    g = torus(n)
    x, y = g.coords()
    omega = 0.2
    u = VectorField(g, omega * np.stack([-(y - 0.5), x - 0.5]))
    maps = integrate_flow(TimePath([u] * 33))
    rot = np.array([[np.cos(omega), -np.sin(omega)], [np.sin(omega), np.cos(omega)]])
    centered = np.stack([x - 0.5, y - 0.5])
    want = np.einsum("ab,bij->aij", rot, centered) + 0.5
    got = np.stack([x, y]) + maps.forward[-1].displacement.values
    interior = np.hypot(*centered) < 0.25
    assert np.abs(got - want)[:, interior].max() / g.spacing[0] < 1e-3


def test_group_property_half_flows_compose():
    # flow of u over [0, 1] equals flow of u/2 applied twice (autonomous field)
    n = 32
    g = torus(n)
    x, y = g.coords()
    u = VectorField(g, 0.2 * np.stack([-(y - 0.5), x - 0.5]))
    full = integrate_flow(TimePath([u] * 33)).forward[-1].displacement.values
    half_path = TimePath([VectorField(g, 0.5 * u.values)] * 33)
    half = integrate_flow(half_path).forward[-1].displacement.values
    comp = half + interp_values(g, half, np.stack([x, y]) + half)
    interior = np.hypot(x - 0.5, y - 0.5) < 0.25
    assert np.abs(comp - full)[:, interior].max() / g.spacing[0] < 1e-3


class TestAdvect:
    def test_zero_field_keeps_image(self):
        g = torus(16)
        rng = np.random.default_rng(1)
        img = ScalarField(g, rng.standard_normal(g.shape))
        for frame in advect(img, zero_path(g, 8)):
            assert np.all(frame.values == img.values)

    def test_max_principle(self):
        # multilinear pullback is a convex combination: no overshoot at all
        g = torus(32)
        rng = np.random.default_rng(2)
        img = ScalarField(g, rng.random(g.shape))
        path = smooth_random_path(g, 16, 1.5 * g.spacing[0], seed=3)
        for frame in advect(img, path):
            assert frame.values.max() <= img.values.max() + 1e-6
            assert frame.values.min() >= img.values.min() - 1e-6

    def test_reversibility(self):
        g = torus(32)
        x = g.coords()
        img = ScalarField(g, np.exp(-((x[0] - 0.5) ** 2 + (x[1] - 0.45) ** 2) / (2 * 0.12**2)))
        path = smooth_random_path(g, 16, 1.5 * g.spacing[0], seed=0)
        fwd = advect(img, path)
        rev = TimePath([VectorField(g, -path[16 - k].values) for k in range(17)])
        back = advect(fwd[-1], rev)
        # error bounded by twice the one-resampling interpolation error
        interp_err = np.abs(
            img.values - interp_values(g, img.values, x + 0.5 * g.spacing[0])
        ).max()
        assert np.abs(back[-1].values - img.values).max() <= 2 * interp_err


class TestContinuity:
    def test_zero_field_keeps_density(self):
        g = torus(16)
        rng = np.random.default_rng(4)
        lam1 = ScalarField(g, rng.standard_normal(g.shape))
        for frame in continuity(lam1, zero_path(g, 8)):
            assert np.all(frame.values == lam1.values)

    def test_constant_field_translates_with_exact_mass(self):
        g = torus(32)
        h = g.spacing[0]
        rng = np.random.default_rng(5)
        lam1 = ScalarField(g, rng.random(g.shape))
        frames = continuity(lam1, constant_path(g, (2 * h, -1 * h), 16))
        assert np.all(frames[-1].values == lam1.values)
        # unit Jacobian: the earliest density is the translated input
        assert_allclose(frames[0].values, np.roll(lam1.values, (-2, 1), axis=(0, 1)), atol=1e-10)
        m1 = lam1.values.sum()
        assert abs(frames[0].values.sum() - m1) / abs(m1) < 1e-10

    def test_mass_conserved_on_smooth_flow(self):
        g = torus(32)
        x = g.coords()
        lam1 = ScalarField(g, 1.0 + 0.8 * np.exp(-((x[0] - 0.4) ** 2 + (x[1] - 0.6) ** 2) / (2 * 0.1**2)))
        path = smooth_random_path(g, 16, 1.5 * g.spacing[0], seed=0)
        frames = continuity(lam1, path)
        m1 = lam1.values.sum()
        drift = max(abs(f.values.sum() - m1) for f in frames) / abs(m1)
        assert drift < 1e-3


def test_blowup_raises_named_step():
    g = torus(8)
    bad = np.full((2,) + g.shape, 1e308)
    path = TimePath([VectorField(g, bad) for _ in range(5)])
    with pytest.raises(FlowBlowupError) as exc:
        integrate_flow(path)
    assert "step" in str(exc.value)
