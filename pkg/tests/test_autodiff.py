"""Reverse-mode tape: every primitive's adjoint against finite differences."""

import numpy as np
from numpy.testing import assert_allclose

from conftest import torus
from geoflow import autodiff as ad
from geoflow.kernel import SobolevKernel


def fd_check(build, leaves, eps=1e-6, rel=1e-6):
    """build(vars) -> scalar Var; leaves are the numpy seeds."""
    tape = ad.Tape()
    vs = [tape.leaf(a) for a in leaves]
    out = build(*vs)
    grads = tape.gradients(out, vs)
    rng = np.random.default_rng(99)
    for k, (a, g) in enumerate(zip(leaves, grads)):
        d = rng.standard_normal(a.shape)
        plus = [x.copy() for x in leaves]
        minus = [x.copy() for x in leaves]
        plus[k] = a + eps * d
        minus[k] = a - eps * d
        fp = ad.value(build(*plus))
        fm = ad.value(build(*minus))
        fd = (fp - fm) / (2 * eps)
        an = float(np.sum(g * d))
        assert abs(an - fd) <= rel * max(abs(fd), 1e-8), (an, fd)


def test_pointwise_ops():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    b = rng.standard_normal((6, 6))
    fd_check(lambda x, y: ad.sumsq(ad.add(ad.mul(x, y), ad.scale(x, 0.3))), [a, b])
    fd_check(lambda x, y: ad.dot(x, ad.sub(x, y)), [a, b])


def test_grid_calculus_ops():
    g = torus(8)
    rng = np.random.default_rng(1)
    f = rng.standard_normal(g.shape)
    u = rng.standard_normal((2,) + g.shape)
    fd_check(lambda x: ad.sumsq(ad.grad_c(g, x)), [f])
    fd_check(lambda x: ad.sumsq(ad.div_c(g, x)), [u])
    kern = SobolevKernel(g, alpha=0.3)
    fd_check(lambda x: ad.sumsq(ad.spectral(g, 1.0 / kern.symbol_L, x)), [f])


def test_interp_ops():
    g = torus(8)
    rng = np.random.default_rng(2)
    f = rng.standard_normal(g.shape)
    pts = g.coords() + 0.04 * rng.standard_normal((2,) + g.shape)
    fd_check(lambda x, p: ad.sumsq(ad.interp(g, x, p)), [f, pts])
    fd_check(lambda x, p: ad.sumsq(ad.interp_cubic(g, x, p)), [f, pts])


def test_jacdet_ops():
    g = torus(8)
    rng = np.random.default_rng(3)
    disp = 0.02 * rng.standard_normal((2,) + g.shape)
    fd_check(lambda d: ad.sumsq(ad.jacdet_disp(g, d)), [disp])


def test_svmul_ops():
    g = torus(8)
    rng = np.random.default_rng(4)
    s = rng.standard_normal(g.shape)
    v = rng.standard_normal((2,) + g.shape)
    fd_check(lambda a, b: ad.sumsq(ad.svmul(a, b)), [s, v])


def test_splat_is_transpose_of_cubic_interp():
    # <splat(vals, pts), phi> == <vals, interp_cubic(phi, pts)> for all inputs
    g = torus(8)
    rng = np.random.default_rng(5)
    vals = rng.standard_normal(g.shape)
    phi = rng.standard_normal(g.shape)
    pts = g.coords() + 0.3 * rng.standard_normal((2,) + g.shape)
    lhs = float(np.sum(ad.splat_cubic(g, vals, pts) * phi))
    rhs = float(np.sum(vals * ad.interp_cubic(g, phi, pts)))
    assert_allclose(lhs, rhs, rtol=1e-12)


def test_chained_transport_step():
    # one full semi-Lagrangian step, the shape of the production chains
    g = torus(8)
    rng = np.random.default_rng(6)
    img = rng.standard_normal(g.shape)
    u = 0.05 * rng.standard_normal((2,) + g.shape)
    x = g.coords()

    def step(j, vel):
        feet = ad.sub(x, ad.scale(vel, 0.25))
        moved = ad.interp_cubic(g, j, feet)
        weight = ad.jacdet_disp(g, ad.sub(feet, x))
        return ad.sumsq(ad.mul(moved, weight))

    fd_check(step, [img, u], rel=1e-5)
