"""Shared forward model and line-search loop for the matching problems.

The transported image is computed by a stepwise semi-Lagrangian chain
(one RK4 backward foot-point solve per interval, then a pullback of the
current image), optionally with a source term z integrated along the
characteristics by the trapezoid rule:

    J_{k+1} = J_k(feet) + (dt/2) * (z_k(feet) + z_{k+1}).

With z = None the source branch is skipped entirely, so the pure
registration energy is the z = 0 special case of the metamorphosis
energy, executed as the exact same float operations.

The chain interpolates with the C1 Catmull-Rom kernel rather than the
C0 multilinear one used by the plain transport module: the energy must
be differentiable in u everywhere for descent to reach stationarity
(multilinear kinks stall the line search while the gradient is still a
double-digit percentage of u), and stationarity is what the optimality
residual diagnostics certify.

Gradients are exact reverse-mode adjoints of this chain. The raw
adjoint of the matching term, rescaled by the trapezoid weights, is the
discrete realization of the transported residual times the image
gradient; adding u and preconditioning by K turns it into the Sobolev
gradient, so descent directions read g = u + K(.) as in the
optimal-control stationarity condition.

The loop takes Barzilai-Borwein trial steps (secant ratio of successive
iterate/direction differences) guarded by Armijo backtracking, which in
practice drives the descent norm to round-off instead of crawling once
the quadratic regime is reached.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .fields import Grid
from .kernel import SobolevKernel, spectral_apply
from .transport import backstep_feet

ARMIJO_C = 1e-4
MAX_HALVINGS = 30
ETA_GROWTH = 1.5


def trapezoid_weights(steps: int) -> np.ndarray:
    w = np.full(steps + 1, 1.0 / steps)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def image_chain(grid: Grid, image0, u, z=None):
    """Run the semi-Lagrangian chain; u and z are lists of node arrays
    (or tape Vars), one per time sample.

    Returns (images, feet): images[k] is the transported image at t_k
    (images[0] is image0 itself), feet[k] the interval-k foot points.
    """
    n = len(u) - 1
    dt = 1.0 / n
    x = grid.coords()
    images = [image0]
    feet_list = []
    j = image0
    for k in range(n):
        feet = backstep_feet(grid, x, u[k], u[k + 1], dt)
        feet_list.append(feet)
        j_new = ad.interp_cubic(grid, j, feet)
        if z is not None:
            src = ad.add(ad.interp_cubic(grid, z[k], feet), z[k + 1])
            j_new = ad.add(j_new, ad.scale(src, 0.5 * dt))
        j = j_new
        images.append(j)
    return images, feet_list


def transported_image(grid: Grid, image0, u, z=None):
    """Final image of the chain (the t = 1 sample of image_chain)."""
    return image_chain(grid, image0, u, z)[0][-1]


def energy_parts(
    grid: Grid,
    kern: SobolevKernel,
    image0: np.ndarray,
    image1: np.ndarray,
    beta: float,
    u: list[np.ndarray],
    z: list[np.ndarray] | None = None,
    sigma2: float | None = None,
):
    """(kinetic, source penalty, matching, total); penalty is 0 without z."""
    w = trapezoid_weights(len(u) - 1)
    vol = grid.cell_volume
    kin = 0.5 * vol * sum(
        wk * float(np.sum(spectral_apply(grid, kern.symbol_L, uk) * uk))
        for wk, uk in zip(w, u)
    )
    zpen = 0.0
    if z is not None:
        zpen = (0.5 / sigma2) * vol * sum(
            wk * float(np.sum(zk * zk)) for wk, zk in zip(w, z)
        )
    j1 = transported_image(grid, image0, u, z)
    match = beta * vol * float(np.sum((image1 - j1) ** 2))
    total = kin + zpen + match
    return kin, zpen, match, total


def descent_directions(
    grid: Grid,
    kern: SobolevKernel,
    image0: np.ndarray,
    image1: np.ndarray,
    beta: float,
    u: list[np.ndarray],
    z: list[np.ndarray] | None = None,
    sigma2: float | None = None,
):
    """Natural-gradient directions and their squared descent norms.

    Returns (g_u, g_z, m_u, m_z): u directions are Sobolev gradients
    u + K(.), z directions z + sigma^2 * (.) (gradient in the
    (1/sigma^2)-weighted L2 metric); m_* are the corresponding metric
    norms, so a step -eta*g decreases the energy by eta*(m_u + m_z) to
    first order. g_z is None and m_z is 0 without z.
    """
    n = len(u) - 1
    w = trapezoid_weights(n)
    vol = grid.cell_volume
    tape = Tape()
    u_vars = [tape.leaf(a) for a in u]
    z_vars = [tape.leaf(a) for a in z] if z is not None else None
    j1 = transported_image(grid, image0, u_vars, z_vars)
    match = ad.scale(ad.sumsq(ad.sub(image1, j1)), beta * vol)
    raws = tape.gradients(match, u_vars + (z_vars if z is not None else []))

    g_u = []
    m_u = 0.0
    for k in range(n + 1):
        body = spectral_apply(grid, 1.0 / kern.symbol_L, raws[k] / (w[k] * vol))
        gk = u[k] + body
        g_u.append(gk)
        lg = spectral_apply(grid, kern.symbol_L, gk)
        m_u += w[k] * vol * float(np.sum(lg * gk))

    g_z = None
    m_z = 0.0
    if z is not None:
        g_z = []
        for k in range(n + 1):
            gk = z[k] + sigma2 * raws[n + 1 + k] / (w[k] * vol)
            g_z.append(gk)
            m_z += w[k] * vol * float(np.sum(gk * gk)) / sigma2
    return g_u, g_z, m_u, m_z


def _step(fields, directions, eta):
    return [f - eta * d for f, d in zip(fields, directions)]


def _backtrack(total_now, trial_parts, m, eta):
    """Armijo halving; returns (accepted eta or None, accepted parts).
    Overflow in a wildly long trial step just means rejection, so the
    usual warnings are suppressed around the trial evaluation."""
    for _ in range(MAX_HALVINGS):
        with np.errstate(over="ignore", invalid="ignore"):
            parts = trial_parts(eta)
        if np.isfinite(parts[-1]) and parts[-1] <= total_now - ARMIJO_C * eta * m:
            return eta, parts
        eta *= 0.5
    return None, None


def _flat(u, z):
    blocks = [a.ravel() for a in u]
    if z is not None:
        blocks += [a.ravel() for a in z]
    return np.concatenate(blocks)


def _bb_eta(cur_u, cur_z, dir_u, dir_z, prev):
    """Barzilai-Borwein trial step from the previous (iterate, direction)
    pair; None when no pair exists or the secant curvature is not
    positive (then the caller falls back to the grown last step)."""
    if prev is None:
        return None
    s = _flat(cur_u, cur_z) - prev[0]
    y = _flat(dir_u, dir_z) - prev[1]
    sy = float(s @ y)
    if sy <= 0.0 or not np.isfinite(sy):
        return None
    return float(s @ s) / sy


def minimize_matching(
    grid: Grid,
    kern: SobolevKernel,
    image0: np.ndarray,
    image1: np.ndarray,
    beta: float,
    steps: int,
    max_iters: int,
    tol: float,
    sigma2: float | None = None,
    alternate: bool = False,
):
    """Gradient descent from u = 0 (and z = 0 when sigma2 is given).

    Returns (u, z, trace, converged, iterations); trace rows are
    (kin, zpen, match, total) per accepted iterate, row 0 = start.
    Convergence means vanishing descent norm or relative energy
    decrease below tol; a failed line search stops unconverged.
    """
    with_z = sigma2 is not None
    shape = (grid.dim,) + grid.shape
    u = [np.zeros(shape) for _ in range(steps + 1)]
    z = [np.zeros(grid.shape) for _ in range(steps + 1)] if with_z else None

    def parts_of(u_t, z_t):
        return energy_parts(grid, kern, image0, image1, beta, u_t, z_t, sigma2)

    parts = parts_of(u, z)
    trace = [parts]
    converged = False
    iterations = 0

    if with_z and alternate:
        # Alternating block minimization, z first: the appearance
        # channel absorbs what it can before the flow moves, so a
        # pure-appearance problem parks at u = 0 exactly (once the
        # image residual is gone the u block's direction is u itself,
        # which is zero). Each block runs its own BB + Armijo descent
        # to inner stationarity; iterations counts accepted steps.
        eta_blk = {"z": 1.0, "u": 1.0}
        while iterations < max_iters:
            sweep_start = parts[-1]
            blocked = False
            for block in ("z", "u"):
                while iterations < max_iters:
                    g_u, g_z, m_u, m_z = descent_directions(
                        grid, kern, image0, image1, beta, u, z, sigma2
                    )
                    d, m = (g_z, m_z) if block == "z" else (g_u, m_u)
                    if not np.isfinite(m) or m <= 1e-30:
                        break
                    if block == "z":
                        stepper = lambda e: parts_of(u, _step(z, d, e))
                    else:
                        stepper = lambda e: parts_of(_step(u, d, e), z)
                    before = parts[-1]
                    eta, new_parts = _backtrack(before, stepper, m, eta_blk[block])
                    if eta is None:
                        blocked = True
                        break
                    if block == "z":
                        z = _step(z, d, eta)
                    else:
                        u = _step(u, d, eta)
                    parts = new_parts
                    trace.append(parts)
                    iterations += 1
                    eta_blk[block] = eta * ETA_GROWTH
                    rel = (before - parts[-1]) / max(abs(before), 1e-300)
                    if rel < tol:
                        break
            sweep_rel = (sweep_start - parts[-1]) / max(abs(sweep_start), 1e-300)
            if sweep_rel < tol:
                converged = not blocked
                break
        return u, z, trace, converged, iterations

    eta_u = 1.0
    prev_pair = None
    for iterations in range(1, max_iters + 1):
        g_u, g_z, m_u, m_z = descent_directions(
            grid, kern, image0, image1, beta, u, z, sigma2
        )
        m = m_u + m_z
        if not np.isfinite(m):
            break
        if m <= 1e-30:
            converged = True
            break
        total_before = parts[-1]
        trial = _bb_eta(u, z, g_u, g_z, prev_pair)
        eta, new_parts = _backtrack(
            parts[-1],
            lambda e: parts_of(
                _step(u, g_u, e), _step(z, g_z, e) if with_z else None
            ),
            m,
            trial if trial is not None else eta_u,
        )
        if eta is None:
            break
        prev_pair = (_flat(u, z), _flat(g_u, g_z))
        u = _step(u, g_u, eta)
        if with_z:
            z = _step(z, g_z, eta)
        parts = new_parts
        eta_u = eta * ETA_GROWTH
        trace.append(parts)
        rel = (total_before - parts[-1]) / max(abs(total_before), 1e-300)
        if rel < tol:
            converged = True
            break

    return u, z, trace, converged, iterations
