"""Unsteady Stokes flow with viscosity eps^2 on the perforated square."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell_corrector import TimeGrid
from .darcy_memory import BodyForce, MacroGrid
from .geometry import ConfigurationError, PerforatedDomain
from .mac import StaggeredGrid, StokesStepper


@dataclass(eq=False)
class FineScaleSolution:
    """Final state plus time histories of the eps-scale solve.

    Full fields are kept only when ``keep_fields`` was requested; the
    error norms are accumulated while stepping through a callback instead.
    """

    eps: float
    times: np.ndarray
    grid: StaggeredGrid = field(repr=False)
    u: np.ndarray
    p: np.ndarray
    kinetic: np.ndarray
    dissipation: np.ndarray
    divergence: np.ndarray
    force_norm2: float
    fields: list = None
    pcg_iterations: list = None

    def extended_velocity(self, u=None):
        """Zero extension to the full square: ``(ux, uy)`` face arrays."""
        return self.grid.scatter(self.u if u is None else u)

    def pressure_cells(self, p=None):
        return self.grid.cell_field(self.p if p is None else p)

    def energy_constant(self):
        """``(sup ||u||^2 + eps^2 int ||grad u||^2) / ||f||^2_{L2(L2)}``."""
        dt = np.diff(self.times)
        lhs = 2 * self.kinetic.max() + (dt * self.dissipation[1:]).sum()
        return float(lhs / self.force_norm2) if self.force_norm2 > 0 else 0.0

    def poincare_ratio(self):
        """``max_t ||u|| / (eps ||grad u||)``; ``dissipation`` already carries eps^2."""
        ok = self.dissipation > 0
        if not ok.any():
            return float("nan")
        return float(np.sqrt(2 * self.kinetic[ok] / self.dissipation[ok]).max())

    def energy_rows(self):
        return [(t, k, d) for t, k, d in zip(self.times, self.kinetic, self.dissipation)]


def fine_grid(dom: PerforatedDomain):
    return StaggeredGrid(dom.fluid, periodic=False)


def force_vectors(force: BodyForce, grid: StaggeredGrid):
    """Spatial modes of ``force`` gathered on the interior faces."""
    macro = MacroGrid(grid.n)
    return [grid.gather(fx, fy) for fx, fy in force.faces(macro)]


def solve_fine(dom: PerforatedDomain, force: BodyForce, grid: TimeGrid, callback=None,
               keep_fields=False, rtol=1e-10) -> FineScaleSolution:
    """Implicit Euler from ``u = 0`` with ``nu = eps^2`` and the force at the new time.

    ``callback(k, t_k, u, p)`` sees every node (``u`` interior face vector,
    ``p`` fluid cell vector).
    """
    if not grid.uniform:
        raise ConfigurationError("the fine-scale solve uses a uniform time grid")
    g = fine_grid(dom)
    t = grid.nodes
    dt = grid.T / grid.M
    modes = force_vectors(force, g)
    thetas = force.theta(t)
    wx, wy = g.face_weights()
    w = g.gather(wx, wy)
    stepper = StokesStepper(g, dom.eps**2, dt, rtol=rtol)
    D = g.divergence()

    def f_at(k):
        out = np.zeros(g.nfaces)
        for th, v in zip(thetas, modes):
            out += th[k] * v
        return out

    u = np.zeros(g.nfaces)
    p = np.zeros(g.np)
    M1 = len(t)
    kinetic = np.zeros(M1)
    diss = np.zeros(M1)
    div = np.zeros(M1)
    fnorm2 = 0.0
    fields = [] if keep_fields else None
    if callback:
        callback(0, t[0], u, p)
    if keep_fields:
        fields.append((u.copy(), p.copy()))
    for k in range(1, M1):
        fk = f_at(k)
        fnorm2 += dt * float(w @ fk**2)
        u, p = stepper.step(u, p, fk)
        kinetic[k] = 0.5 * float(w @ u**2)
        ux, uy = g.scatter(u)
        diss[k] = dom.eps**2 * sum(float((wt * v**2).sum()) for v, wt in g.edge_gradients(ux, uy).values())
        div[k] = float(np.abs(D @ u).max()) if g.np else 0.0
        if callback:
            callback(k, t[k], u, p)
        if keep_fields:
            fields.append((u.copy(), p.copy()))
    return FineScaleSolution(dom.eps, t, g, u, p, kinetic, diss, div, fnorm2, fields,
                             stepper.iterations)


def extend_pressure(p_cells, dom: PerforatedDomain):
    """Fill each hole with the fluid average over its own period cell.

    ``p_cells`` is an ``N x N`` array whose values on solid cells are ignored.
    """
    out = np.where(dom.fluid, p_cells, 0.0)
    if dom.fluid.all():
        return out
    m = dom.m
    for a, b in dom.kept:
        sl = np.s_[a * m:(a + 1) * m, b * m:(b + 1) * m]
        f = dom.fluid[sl]
        block = out[sl]
        block[~f] = block[f].mean()
    return out
