"""Shared fixtures: unit-torus grids, Gaussian blob images, and the
converged 64x64 blob registration that several checks reuse."""

import time

import numpy as np
import pytest

from geoflow import lddmm
from geoflow.fields import Grid, ScalarField


def torus(n: int) -> Grid:
    h = 1.0 / n
    return Grid((n, n), (h, h))


def gaussian(grid: Grid, cx_cells: float, cy_cells: float, sigma_cells: float) -> ScalarField:
    h = grid.spacing[0]
    x, y = grid.coords()
    r2 = (x - cx_cells * h) ** 2 + (y - cy_cells * h) ** 2
    return ScalarField(grid, np.exp(-r2 / (2 * (sigma_cells * h) ** 2)))


@pytest.fixture(scope="session")
def blob_pair_64():
    """64x64 Gaussian blob (sigma = 6 cells) and its 3-cell translate."""
    g = torus(64)
    return g, gaussian(g, 32, 32, 6), gaussian(g, 35, 32, 6)


@pytest.fixture(scope="session")
def registration_64(blob_pair_64):
    """Converged registration of the blob pair; expensive, computed once."""
    g, i0, i1 = blob_pair_64
    prob = lddmm.default_problem(i0, i1, beta=1.0, steps=16, max_iters=200, tol=1e-8)
    t0 = time.monotonic()
    res = lddmm.register(prob)
    return {
        "grid": g,
        "problem": prob,
        "result": res,
        "elapsed": time.monotonic() - t0,
    }
