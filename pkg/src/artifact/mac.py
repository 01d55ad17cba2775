"""Staggered (MAC) grid operators and an implicit Euler Stokes stepper.

Cells are indexed ``[i, j]`` with ``i`` along x. x-faces sit at ``x = i h``
and y-faces at ``y = j h``. On a bounded square there are ``n + 1`` face
columns along the normal direction, on a periodic cell there are ``n``.

A face is *interior* when both neighbouring cells are fluid (these are the
unknowns), a *wall* face when exactly one is, and *inactive* otherwise.
Wall faces carry zero velocity; a tangential neighbour that is inactive or
outside the box is handled with the mirror ghost ``-u``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .linalg import CompatibilityError, Factorized, NeumannSolver, SolverError, pcg

INTERIOR, WALL, INACTIVE = 2, 1, 0


def _pad(a, periodic, fill):
    if periodic:
        return np.pad(a, 1, mode="wrap")
    return np.pad(a, 1, mode="constant", constant_values=fill)


class StaggeredGrid:
    """Index bookkeeping and sparse operators for one fluid mask."""

    def __init__(self, fluid, length=1.0, periodic=False):
        fluid = np.asarray(fluid, dtype=bool)
        if fluid.ndim != 2 or fluid.shape[0] != fluid.shape[1]:
            raise ValueError("fluid mask must be square")
        self.fluid = fluid
        self.n = n = fluid.shape[0]
        self.h = length / n
        self.periodic = periodic
        if periodic:
            left, right = np.roll(fluid, 1, axis=0), fluid
            below, above = np.roll(fluid, 1, axis=1), fluid
        else:
            zr = np.zeros((1, n), bool)
            zc = np.zeros((n, 1), bool)
            left, right = np.vstack([zr, fluid]), np.vstack([fluid, zr])
            below, above = np.hstack([zc, fluid]), np.hstack([fluid, zc])
        self.xcount = left.astype(np.int8) + right
        self.ycount = below.astype(np.int8) + above
        self.xshape = self.xcount.shape
        self.yshape = self.ycount.shape

        self.xidx = np.full(self.xshape, -1, dtype=np.int64)
        self.yidx = np.full(self.yshape, -1, dtype=np.int64)
        xi = self.xcount == INTERIOR
        yi = self.ycount == INTERIOR
        self.nu = int(xi.sum())
        self.nv = int(yi.sum())
        self.xidx[xi] = np.arange(self.nu)
        self.yidx[yi] = np.arange(self.nv)
        self.pidx = np.full(fluid.shape, -1, dtype=np.int64)
        self.np = int(fluid.sum())
        self.pidx[fluid] = np.arange(self.np)
        self._ops = {}

    # ----------------------------------------------------------- layout
    @property
    def nfaces(self):
        return self.nu + self.nv

    def scatter(self, vec, wall_value=0.0):
        """Interior unknown vector -> full face arrays ``(ux, uy)``."""
        ux = np.zeros(self.xshape)
        uy = np.zeros(self.yshape)
        if wall_value:
            ux[self.xcount == WALL] = wall_value[0]
            uy[self.ycount == WALL] = wall_value[1]
        ux[self.xidx >= 0] = vec[: self.nu]
        uy[self.yidx >= 0] = vec[self.nu :]
        return ux, uy

    def gather(self, ux, uy):
        return np.concatenate([ux[self.xidx >= 0], uy[self.yidx >= 0]])

    def cell_field(self, vec):
        out = np.zeros(self.fluid.shape)
        out[self.fluid] = vec
        return out

    def face_weights(self):
        """Quadrature weights of the face L2 norm (half weight on walls)."""
        a = self.h**2
        return self.xcount * (a / 2), self.ycount * (a / 2)

    def face_centres(self):
        h = self.h
        nodes_x = np.arange(self.xshape[0]) * h
        nodes_y = np.arange(self.yshape[1]) * h
        mids = (np.arange(self.n) + 0.5) * h
        return (
            np.meshgrid(nodes_x, mids, indexing="ij"),
            np.meshgrid(mids, nodes_y, indexing="ij"),
        )

    def cell_centres(self):
        c = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    # -------------------------------------------------------- operators
    def divergence(self):
        """Sparse D: interior faces -> fluid cells."""
        if "D" in self._ops:
            return self._ops["D"]
        n, h = self.n, self.h
        ci, cj = np.nonzero(self.fluid)
        row = self.pidx[ci, cj]
        ip = (ci + 1) % n if self.periodic else ci + 1
        jp = (cj + 1) % n if self.periodic else cj + 1
        entries = [
            (self.xidx[ip, cj], 1.0),
            (self.xidx[ci, cj], -1.0),
            (self.nu + np.where(self.yidx[ci, jp] >= 0, self.yidx[ci, jp], -self.nu - 1), 1.0),
            (self.nu + np.where(self.yidx[ci, cj] >= 0, self.yidx[ci, cj], -self.nu - 1), -1.0),
        ]
        rows, cols, vals = [], [], []
        for col, sign in entries:
            ok = col >= 0
            rows.append(row[ok])
            cols.append(col[ok])
            vals.append(np.full(ok.sum(), sign / h))
        D = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.np, self.nfaces),
        )
        self._ops["D"] = D
        return D

    def gradient(self):
        """G = -D^T: fluid cells -> interior faces."""
        if "G" not in self._ops:
            self._ops["G"] = sp.csr_matrix(-self.divergence().T)
        return self._ops["G"]

    def pressure_laplacian(self):
        """SPD Neumann operator G^T G on fluid cells."""
        if "Lp" not in self._ops:
            G = self.gradient()
            self._ops["Lp"] = sp.csr_matrix(G.T @ G)
        return self._ops["Lp"]

    def _component_laplacian(self, count, idx, normal_axis):
        h2 = self.h**2
        c = _pad(count, self.periodic, INACTIVE)
        k = _pad(idx, self.periodic, -1)
        fi, fj = np.nonzero(idx >= 0)
        row = idx[fi, fj]
        diag = np.zeros(len(row))
        rows, cols, vals = [], [], []
        for axis in (0, 1):
            for s in (-1, 1):
                ni = fi + 1 + (s if axis == 0 else 0)
                nj = fj + 1 + (s if axis == 1 else 0)
                st = c[ni, nj]
                nb = k[ni, nj]
                inner = st == INTERIOR
                rows.append(row[inner])
                cols.append(nb[inner])
                vals.append(np.full(inner.sum(), 1.0 / h2))
                ghost = (st == INACTIVE) & (axis != normal_axis)
                diag -= np.where(ghost, 2.0, 1.0) / h2
        rows.append(row)
        cols.append(row)
        vals.append(diag)
        m = int((idx >= 0).sum())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m, m),
        )

    def laplacians(self):
        """Vector Laplacians for the x and y unknowns (negative definite)."""
        if "L" not in self._ops:
            lx = self._component_laplacian(self.xcount, self.xidx, 0)
            ly = self._component_laplacian(self.ycount, self.yidx, 1)
            self._ops["L"] = (lx, ly)
        return self._ops["L"]

    # --------------------------------------------------------- analysis
    def divergence_of(self, ux, uy):
        """Cell divergence of full face arrays, zero in solid cells."""
        if self.periodic:
            dx = np.roll(ux, -1, axis=0) - ux
            dy = np.roll(uy, -1, axis=1) - uy
        else:
            dx = ux[1:, :] - ux[:-1, :]
            dy = uy[:, 1:] - uy[:, :-1]
        return np.where(self.fluid, (dx + dy) / self.h, 0.0)

    def edge_gradients(self, ux, uy):
        """Velocity gradient on the staggered edges.

        Returns a dict ``{(comp, axis): (values, weights)}``. ``(0, 0)`` and
        ``(1, 1)`` live at cell centres; the mixed entries live at cell
        corners. The weighted sum of squares equals ``-u.L.u h^2``.
        """
        out = {}
        for comp, (u, count) in enumerate(((ux, self.xcount), (uy, self.ycount))):
            for axis in (0, 1):
                out[(comp, axis)] = self._edge_diff(u, count, axis, comp)
        return out

    def _edge_diff(self, u, count, axis, normal_axis):
        h = self.h
        inter = count == INTERIOR
        val = np.where(count == INACTIVE, 0.0, u)
        if self.periodic:
            a, b = val, np.roll(val, -1, axis=axis)
            ia, ib = inter, np.roll(inter, -1, axis=axis)
            ca, cb = count, np.roll(count, -1, axis=axis)
        else:
            pad = [(0, 0), (0, 0)]
            pad[axis] = (1, 1)
            vp = np.pad(val, pad)
            ip_ = np.pad(inter, pad)
            cp = np.pad(count, pad)
            sl_a = [slice(None), slice(None)]
            sl_b = [slice(None), slice(None)]
            sl_a[axis] = slice(0, -1)
            sl_b[axis] = slice(1, None)
            a, b = vp[tuple(sl_a)], vp[tuple(sl_b)]
            ia, ib = ip_[tuple(sl_a)], ip_[tuple(sl_b)]
            ca, cb = cp[tuple(sl_a)], cp[tuple(sl_b)]
            if axis == normal_axis:
                # normal differences: keep only those inside the box
                a, b, ia, ib, ca, cb = (x[tuple(_inner(axis))] for x in (a, b, ia, ib, ca, cb))
        any_inner = ia | ib
        ghost = any_inner & (((ca == INACTIVE) & ib) | ((cb == INACTIVE) & ia))
        if axis == normal_axis:
            ghost = np.zeros_like(ghost)
        diff = (b - a) / h
        diff = np.where(ghost, 2.0 * diff, diff)
        w = np.where(any_inner, h * h, 0.0)
        w = np.where(ghost, 0.5 * h * h, w)
        return np.where(any_inner, diff, 0.0), w


def _inner(axis):
    sl = [slice(None), slice(None)]
    sl[axis] = slice(1, -1)
    return sl


class StokesStepper:
    """Implicit Euler for ``u_t - nu Lap u + grad p = f, div u = 0``.

    Each step starts from the previous pressure (incremental projection) and
    then solves the pressure Schur complement with PCG, preconditioned by
    the Cahouet-Chabard combination ``Lp^{-1}/dt + nu I``, so that the
    coupled implicit system is satisfied to ``rtol``.
    """

    def __init__(self, grid: StaggeredGrid, nu: float, dt: float, rtol=1e-10, maxiter=10_000):
        self.grid = grid
        self.nu = nu
        self.dt = dt
        self.rtol = rtol
        self.maxiter = maxiter
        lx, ly = grid.laplacians()
        self._hx = Factorized(sp.identity(grid.nu) / dt - nu * lx)
        self._hy = Factorized(sp.identity(grid.nv) / dt - nu * ly)
        self.G = grid.gradient()
        self.D = grid.divergence()
        self.lap_p = NeumannSolver(grid.pressure_laplacian())
        self.iterations = []

    def _hinv(self, r):
        nu_ = self.grid.nu
        return np.concatenate([self._hx(r[:nu_]), self._hy(r[nu_:])])

    def step(self, u, p, f=None):
        """Advance one step. ``u`` is the interior face vector, ``p`` cell vector."""
        r = u / self.dt
        if f is not None:
            r = r + f
        if self.grid.np == 0 or self.grid.nfaces == 0:
            return self._hinv(r), p
        G, D = self.G, self.D
        hr = self._hinv(r)
        rhs = -(D @ hr)

        def apply_s(q):
            return -(D @ self._hinv(G @ q))

        def precond(q):
            return self.lap_p(q) / self.dt + self.nu * q

        try:
            p_new, info = pcg(
                apply_s, rhs, precond, x0=p, rtol=self.rtol,
                maxiter=self.maxiter, project=self.lap_p.zero_mean,
            )
        except SolverError as exc:
            raise SolverError(f"Stokes step failed: {exc}", exc.residuals) from exc
        self.iterations.append(info["iterations"])
        u_new = hr - self._hinv(G @ p_new)
        return u_new, self.lap_p.zero_mean(p_new)


class MinNormDivergence:
    """Minimum-L2 solution of ``D v = g`` with zero values on every wall.

    The solution is ``v = D^T lam`` with ``D D^T lam = g``. ``g`` must have
    zero sum over the fluid cells of each connected component.
    """

    def __init__(self, grid: StaggeredGrid):
        self.grid = grid
        self.D = grid.divergence()
        self._solve = NeumannSolver(grid.pressure_laplacian()) if grid.np else None

    def __call__(self, g, tol=1e-10, label="domain"):
        g = np.asarray(g, float)
        if self._solve is None:
            return np.zeros(self.grid.nfaces)
        defect = abs(g.sum()) / max(len(g), 1)
        if defect > tol * (1.0 + np.abs(g).max()):
            raise CompatibilityError(f"divergence data on {label} has nonzero mean {defect:.3e}")
        return self.D.T @ self._solve(g)

    def residual(self, v, g):
        return float(np.abs(self.D @ v - g).max()) if len(g) else 0.0
