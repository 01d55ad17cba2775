"""Time-dependent Stokes cell problem, permeability kernel and diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CellGeometry, ConfigurationError
from .mac import StaggeredGrid, StokesStepper, WALL


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``t_k = T (k/M)^gamma``; ``gamma = 1`` is the uniform grid."""

    T: float = 2.0
    M: int = 128
    gamma: float = 2.0

    def __post_init__(self):
        if self.M < 1 or self.T <= 0:
            raise ConfigurationError("time grid needs M >= 1 and T > 0")
        if self.gamma < 1:
            raise ConfigurationError("grading exponent gamma must be >= 1")

    @property
    def nodes(self):
        return self.T * (np.arange(self.M + 1) / self.M) ** self.gamma

    @property
    def steps(self):
        return np.diff(self.nodes)

    @property
    def uniform(self):
        return self.gamma == 1


def cell_grid(cell: CellGeometry):
    return StaggeredGrid(cell.fluid, periodic=True)


@dataclass(eq=False)
class CorrectorTrajectory:
    """Sampled corrector ``(W_j, pi_j)`` on the periodic cell.

    ``ux[k]`` and ``uy[k]`` are full face arrays (zero on inactive faces),
    ``pi[k]`` a cell array with zero fluid mean.
    """

    j: int
    times: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    pi: np.ndarray
    grid: StaggeredGrid = field(repr=False)
    divergence: np.ndarray = None
    energy: np.ndarray = None
    dissipation: np.ndarray = None
    pcg_iterations: list = None

    @property
    def M(self):
        return len(self.times) - 1

    def cell_average(self, k):
        """Face values averaged to cell centres, components ``(2, n, n)``."""
        g = self.grid
        cx = 0.5 * (self.ux[k] + np.roll(self.ux[k], -1, axis=0))
        cy = 0.5 * (self.uy[k] + np.roll(self.uy[k], -1, axis=1))
        return np.where(g.fluid, cx, 0.0), np.where(g.fluid, cy, 0.0)


def initial_field(grid: StaggeredGrid, j: int):
    """``e_j`` on every face touching the fluid, wall faces included."""
    ux = np.zeros(grid.xshape)
    uy = np.zeros(grid.yshape)
    target = ux if j == 0 else uy
    count = grid.xcount if j == 0 else grid.ycount
    target[count >= WALL] = 1.0
    return ux, uy


def _energy(grid, ux, uy):
    wx, wy = grid.face_weights()
    return 0.5 * float((wx * ux**2).sum() + (wy * uy**2).sum())


def _dissipation(grid, ux, uy):
    return float(sum((w * v**2).sum() for v, w in grid.edge_gradients(ux, uy).values()))


def _run(grid, times, u0, p0, forcing=None, nu=1.0, rtol=1e-10):
    steppers = {}
    M = len(times) - 1
    ux = np.zeros((M + 1,) + grid.xshape)
    uy = np.zeros((M + 1,) + grid.yshape)
    pi = np.zeros((M + 1,) + grid.fluid.shape)
    ux[0], uy[0] = u0
    div = np.zeros(M + 1)
    u = grid.gather(*u0)
    p = p0
    iters = []
    for k in range(M):
        dt = float(times[k + 1] - times[k])
        key = round(dt, 15)
        if key not in steppers:
            steppers[key] = StokesStepper(grid, nu, dt, rtol=rtol)
        st = steppers[key]
        before = len(st.iterations)
        u, p = st.step(u, p, forcing)
        iters.extend(st.iterations[before:])
        ux[k + 1], uy[k + 1] = grid.scatter(u)
        pi[k + 1] = grid.cell_field(p)
        div[k + 1] = np.abs(grid.divergence() @ u).max() if grid.np else 0.0
    return ux, uy, pi, div, iters


def solve_corrector(cell: CellGeometry, j: int, grid: TimeGrid, rtol=1e-10) -> CorrectorTrajectory:
    """Run the cell problem from ``W_j(0) = e_j``."""
    if j not in (0, 1):
        raise ConfigurationError("direction index j must be 0 or 1")
    g = cell_grid(cell)
    times = grid.nodes
    u0 = initial_field(g, j)
    ux, uy, pi, div, iters = _run(g, times, u0, np.zeros(g.np), rtol=rtol)
    energy = np.array([_energy(g, ux[k], uy[k]) for k in range(len(times))])
    diss = np.array([_dissipation(g, ux[k], uy[k]) for k in range(len(times))])
    return CorrectorTrajectory(j, times, ux, uy, pi, g, div, energy, diss, iters)


def solve_correctors(cell, grid, rtol=1e-10):
    return [solve_corrector(cell, j, grid, rtol) for j in (0, 1)]


# -------------------------------------------------------------- kernel


@dataclass(eq=False)
class PermeabilityKernel:
    times: np.ndarray
    A: np.ndarray
    fluid_fraction: float

    @property
    def dA(self):
        """Centred differences in the interior, one-sided at both ends."""
        return np.gradient(self.A, self.times, axis=0, edge_order=1)

    def variation(self):
        """Cumulative ``int_0^t |A'|`` of the piecewise linear interpolant."""
        jumps = np.linalg.norm(np.diff(self.A, axis=0), ord=2, axis=(1, 2))
        return np.concatenate([[0.0], np.cumsum(jumps)])

    @property
    def l1_derivative(self):
        return float(self.variation()[-1])

    def symmetry_defect(self):
        return float(np.abs(self.A - np.swapaxes(self.A, 1, 2)).max())

    def min_eigenvalue(self):
        sym = 0.5 * (self.A + np.swapaxes(self.A, 1, 2))
        return float(np.linalg.eigvalsh(sym).min())

    def is_isotropic(self, tol=1e-8):
        a = 0.5 * (self.A[:, 0, 0] + self.A[:, 1, 1])
        dev = self.A - a[:, None, None] * np.eye(2)
        return float(np.abs(dev).max()) <= tol * max(1.0, float(np.abs(a).max()))

    def trace(self):
        return np.trace(self.A, axis1=1, axis2=2)

    def csv_rows(self):
        return [(t, a[0, 0], a[0, 1], a[1, 0], a[1, 1]) for t, a in zip(self.times, self.A)]


def permeability(trajectories) -> PermeabilityKernel:
    """``A_ij(t) = int_{Y_f} W_j . e_i`` by cell-midpoint quadrature."""
    trajectories = list(trajectories)
    if len(trajectories) != 2:
        raise ConfigurationError("need one trajectory per direction")
    t0 = trajectories[0].times
    for tr in trajectories[1:]:
        if len(tr.times) != len(t0) or not np.allclose(tr.times, t0, rtol=0, atol=1e-14):
            raise ConfigurationError("trajectories do not share one time grid")
    g = trajectories[0].grid
    area = g.h**2
    A = np.zeros((len(t0), 2, 2))
    for tr in trajectories:
        for k in range(len(t0)):
            cx, cy = tr.cell_average(k)
            A[k, 0, tr.j] = cx.sum() * area
            A[k, 1, tr.j] = cy.sum() * area
    return PermeabilityKernel(t0.copy(), A, float(g.np) * area)


# ---------------------------------------------------------- diagnostics


def _linear_fit(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def decay_diagnostics(traj: CorrectorTrajectory, kernel: PermeabilityKernel,
                      alphas=(0.5, 0.8, 1.0), early=0.1, min_nodes=8):
    """Early-time gradient exponent, weighted integrals and trace-decay fit."""
    t = traj.times
    T = t[-1]
    early_nodes = np.nonzero((t > 0) & (t <= early * T))[0]
    if len(early_nodes) < min_nodes:
        raise ConfigurationError(
            f"decay diagnostics need {min_nodes} nodes in (0, {early}T], got {len(early_nodes)}"
        )
    grad = np.sqrt(traj.dissipation)
    report = {}
    flat = bool(np.all(grad[1:] <= 1e-12))
    if flat:
        report["sigma"] = "flat"
    else:
        # power law times the exponential tail: log g = c - sigma log t - lam t
        tt = t[early_nodes]
        y = np.log(grad[early_nodes])
        X = np.column_stack([np.ones_like(tt), -np.log(tt), -tt])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        ss = ((y - y.mean()) ** 2).sum()
        report["sigma"] = float(coef[1])
        report["sigma_rate"] = float(coef[2])
        report["sigma_r2"] = float(1 - (resid**2).sum() / ss) if ss > 0 else 1.0
    g = traj.grid
    wx, wy = g.face_weights()
    dt = np.diff(t)
    dtw = np.array([
        ((wx * (traj.ux[k + 1] - traj.ux[k]) ** 2).sum() + (wy * (traj.uy[k + 1] - traj.uy[k]) ** 2).sum())
        for k in range(len(dt))
    ]) / dt**2
    pnorm = (traj.pi[1:] ** 2).sum(axis=(1, 2)) * g.h**2
    report["weighted_dtW"] = {a: 0.0 if flat else float((t[1:] ** a * dtw * dt).sum()) for a in alphas}
    report["weighted_pi"] = {a: 0.0 if flat else float((t[1:] ** a * pnorm * dt).sum()) for a in alphas}
    late = t >= T / 4
    tr = kernel.trace()
    if np.all(tr > 0):
        slope, intercept, r2 = _linear_fit(t[late], np.log(tr[late]))
        report["trace_rate"] = slope
        report["trace_r2"] = r2
    return report


def energy_residuals(traj: CorrectorTrajectory):
    """Per-step residual of ``d(E) + dt |grad W|^2`` for steps after the first.

    The first step starts from incompatible data (non-zero wall values) and
    is excluded.
    """
    dt = np.diff(traj.times)
    res = (traj.energy[1:] - traj.energy[:-1]) + dt * traj.dissipation[1:]
    return res[1:]


# ------------------------------------------------------ semigroup check


@dataclass
class SemigroupReport:
    times: np.ndarray
    discrepancy: np.ndarray
    relative: np.ndarray


def solve_integrated_corrector(cell: CellGeometry, j: int, grid: TimeGrid, rtol=1e-10):
    """Cell problem with zero initial data and constant forcing ``e_j``."""
    g = cell_grid(cell)
    zero = (np.zeros(g.xshape), np.zeros(g.yshape))
    ex, ey = initial_field(g, j)
    forcing = g.gather(ex, ey)
    ux, uy, pi, div, _ = _run(g, grid.nodes, zero, np.zeros(g.np), forcing, rtol=rtol)
    return ux, uy, g


def verify_semigroup_relation(cell: CellGeometry, grid: TimeGrid, j=0, rtol=1e-10):
    """Compare the centred time derivative of ``w_j`` with ``W_j``.

    Differences are taken with ``np.gradient`` (one-sided at the ends), so
    the discrepancy is a first-order consistency measure in the step size.
    """
    traj = solve_corrector(cell, j, grid, rtol)
    wx, wy, g = solve_integrated_corrector(cell, j, grid, rtol)
    t = grid.nodes
    dwx = np.gradient(wx, t, axis=0, edge_order=1)
    dwy = np.gradient(wy, t, axis=0, edge_order=1)
    fx, fy = g.face_weights()
    err = np.sqrt(((fx * (dwx - traj.ux) ** 2).sum(axis=(1, 2)) + (fy * (dwy - traj.uy) ** 2).sum(axis=(1, 2))))
    # scale by the initial size: W itself decays to round-off by t = T
    size = np.sqrt(2 * traj.energy[0])
    return SemigroupReport(t, err, err / size if size > 0 else err)
