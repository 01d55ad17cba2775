"""Flux corrector and Bogovskii cell corrector built from the cell trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from .cell_corrector import CorrectorTrajectory, PermeabilityKernel
from .geometry import ConfigurationError
from .mac import MinNormDivergence, StaggeredGrid


def _check_shared(trajectories, kernel):
    trajectories = sorted(trajectories, key=lambda tr: tr.j)
    if [tr.j for tr in trajectories] != [0, 1]:
        raise ConfigurationError("need one trajectory per direction")
    for tr in trajectories:
        if len(tr.times) != len(kernel.times) or not np.allclose(tr.times, kernel.times):
            raise ConfigurationError("trajectories and kernel do not share one time grid")
    return trajectories


# --------------------------------------------------------- flux corrector


def periodic_poisson(rhs, h):
    """Zero-mean solution of the periodic 5-point Poisson problem ``Lap f = rhs``."""
    n = rhs.shape[0]
    k = np.arange(n)
    lam = -4.0 / h**2 * np.sin(np.pi * k / n) ** 2
    eig = lam[:, None] + lam[None, :]
    eig[0, 0] = 1.0
    c = fft.fft2(rhs)
    c /= eig
    c[0, 0] = 0.0
    return fft.ifft2(c).real


@dataclass(eq=False)
class FluxCorrector:
    """``Phi[k, a, i, j]`` on cell corners with ``div_a Phi[a, i, j] = b[i, j]``.

    In two dimensions only ``Phi_{21,j}`` is independent; ``phi21[k, j]``
    stores it on the corners ``(i h, j h)`` and ``Phi_{12,j} = -Phi_{21,j}``.
    ``bx[k, j]`` is ``b_1j`` on x-faces and ``by[k, j]`` is ``b_2j`` on y-faces.
    """

    times: np.ndarray
    h: float
    bx: np.ndarray
    by: np.ndarray
    phi21: np.ndarray

    def tensor(self, k):
        """Full array ``Phi[a, i, j]`` at node ``k``; antisymmetric in ``(a, i)``."""
        n = self.phi21.shape[-1]
        out = np.zeros((2, 2, 2, n, n))
        out[1, 0] = self.phi21[k]
        out[0, 1] = -self.phi21[k]
        return out

    def antisymmetry_defect(self):
        return float(max(np.abs(self.tensor(k) + np.swapaxes(self.tensor(k), 0, 1)).max()
                         for k in range(len(self.times))))

    def divergence_residual(self):
        """Per node ``max |div Phi - b|`` (relative to ``1 + max |b|``)."""
        h = self.h
        res = []
        for k in range(len(self.times)):
            worst = 0.0
            for j in range(self.phi21.shape[1]):
                p = self.phi21[k, j]
                r1 = (np.roll(p, -1, axis=1) - p) / h - self.bx[k, j]
                r2 = -(np.roll(p, -1, axis=0) - p) / h - self.by[k, j]
                scale = 1.0 + max(np.abs(self.bx[k, j]).max(), np.abs(self.by[k, j]).max())
                worst = max(worst, np.abs(r1).max() / scale, np.abs(r2).max() / scale)
            res.append(worst)
        return np.array(res)

    def flux_mean(self):
        """``max_ij |int_Y b_ij|`` per node."""
        a = self.h**2
        return np.array([max(np.abs(self.bx[k].sum(axis=(1, 2))).max(),
                             np.abs(self.by[k].sum(axis=(1, 2))).max()) * a
                         for k in range(len(self.times))])

    def flux_divergence(self):
        h = self.h
        return np.array([
            np.abs((np.roll(self.bx[k], -1, axis=1) - self.bx[k]) / h
                   + (np.roll(self.by[k], -1, axis=2) - self.by[k]) / h).max()
            for k in range(len(self.times))
        ])


def flux_from_fields(bx, by, h):
    """Corner potential ``Phi_21`` of one divergence-free flux column.

    Solves ``Lap f_i = b_i`` on the face grids and takes
    ``Phi_21 = d_2 f_1 - d_1 f_2``.
    """
    f1 = periodic_poisson(bx, h)
    f2 = periodic_poisson(by, h)
    return (f1 - np.roll(f1, 1, axis=1)) / h - (f2 - np.roll(f2, 1, axis=0)) / h


def flux_corrector(trajectories, kernel: PermeabilityKernel) -> FluxCorrector:
    """Flux ``b_ij = W_j . e_i - A_ij`` (W zero-extended) and its potential.

    At ``t = 0`` the wall faces carry the initial value ``e_j`` so the flux
    is not divergence-free there; the residual is reported, not enforced.
    """
    trajectories = _check_shared(trajectories, kernel)
    g = trajectories[0].grid
    M1 = len(kernel.times)
    n = g.n
    bx = np.zeros((M1, 2, n, n))
    by = np.zeros((M1, 2, n, n))
    phi = np.zeros((M1, 2, n, n))
    for tr in trajectories:
        j = tr.j
        for k in range(M1):
            bx[k, j] = tr.ux[k] - kernel.A[k, 0, j]
            by[k, j] = tr.uy[k] - kernel.A[k, 1, j]
            phi[k, j] = flux_from_fields(bx[k, j], by[k, j], g.h)
    return FluxCorrector(kernel.times.copy(), g.h, bx, by, phi)


# ----------------------------------------------------- Bogovskii corrector


@dataclass(eq=False)
class BogovskiiCorrector:
    """``phi[k, i, j]``: interior face vector with ``D phi = -W_ij + A_ij/|Y_f|``."""

    times: np.ndarray
    grid: StaggeredGrid = field(repr=False)
    phi: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    compatibility: np.ndarray

    def faces(self, k, i, j):
        return self.grid.scatter(self.phi[k, i, j])

    def total_variation(self):
        wx, wy = self.grid.face_weights()
        w = self.grid.gather(wx, wy)
        steps = np.sqrt((w * np.diff(self.phi, axis=0) ** 2).sum(axis=-1))
        return float(steps.sum())

    def norms(self):
        """``max_ij ||phi_ij(t_k)||_{L2}`` per node."""
        wx, wy = self.grid.face_weights()
        w = self.grid.gather(wx, wy)
        return np.sqrt((w * self.phi**2).sum(axis=-1)).max(axis=(1, 2))


def _component_cells(tr: CorrectorTrajectory, k, grid):
    cx, cy = tr.cell_average(k)
    return cx[grid.fluid], cy[grid.fluid]


def bogovskii_cell(trajectories, kernel: PermeabilityKernel, tol=1e-10) -> BogovskiiCorrector:
    """Minimum-norm periodic solutions of the cell divergence problem."""
    trajectories = _check_shared(trajectories, kernel)
    g = trajectories[0].grid
    solve = MinNormDivergence(g)
    Yf = kernel.fluid_fraction
    M1 = len(kernel.times)
    phi = np.zeros((M1, 2, 2, g.nfaces))
    rhs = np.zeros((M1, 2, 2, g.np))
    res = np.zeros(M1)
    comp = np.zeros(M1)
    for tr in trajectories:
        j = tr.j
        for k in range(M1):
            comps = _component_cells(tr, k, g)
            for i in range(2):
                r = -comps[i] + kernel.A[k, i, j] / Yf
                rhs[k, i, j] = r
                comp[k] = max(comp[k], abs(r.sum()) * g.h**2)
                v = solve(r, tol=tol, label=f"cell (i={i}, j={j}, node {k})")
                phi[k, i, j] = v
                res[k] = max(res[k], solve.residual(v, r))
    return BogovskiiCorrector(kernel.times.copy(), g, phi, rhs, res, comp)
