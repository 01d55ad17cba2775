"""Volterra convolutions and the homogenized Darcy law with memory.

Tensor-valued histories are stored time first, then tensor indices, then
space: a vector field history on an ``N x N`` grid has shape
``(M + 1, 2, N, N)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft

from .cell_corrector import PermeabilityKernel, TimeGrid
from .geometry import ConfigurationError


class NonContractionError(RuntimeError):
    def __init__(self, message, ratios):
        super().__init__(message)
        self.ratios = list(ratios)


# ---------------------------------------------------- product quadrature


def _hat_values(nodes, points):
    """Values of all hat functions of ``nodes`` at ``points`` (dense)."""
    n = len(nodes)
    out = np.zeros((len(points), n))
    idx = np.clip(np.searchsorted(nodes, points, side="right") - 1, 0, n - 2)
    left, right = nodes[idx], nodes[idx + 1]
    w = np.clip((points - left) / (right - left), 0.0, 1.0)
    rows = np.arange(len(points))
    out[rows, idx] += 1.0 - w
    out[rows, idx + 1] += w
    return out


def _box_values(nodes, points):
    """Indicator of each kernel interval at interior ``points``."""
    n = len(nodes)
    out = np.zeros((len(points), n - 1))
    idx = np.clip(np.searchsorted(nodes, points, side="right") - 1, 0, n - 2)
    out[np.arange(len(points)), idx] = 1.0
    return out


def quadrature_weights(kernel_times, history_times, kind="linear"):
    """Weights ``Q[k, m, l]`` with ``(K * X)(t_k) = sum Q[k,m,l] K_l X_m``.

    ``linear``: kernel and history are piecewise linear in their grids and
    the integral is exact (Simpson on the merged breakpoints).
    ``derivative``: the kernel values are interval slopes (piecewise
    constant), for convolving with ``K'``.
    ``implicit``: the discrete Duhamel sum of implicit Euler on a shared
    uniform grid, ``sum_{m=1..k} dt K_{k-m+1} X_m``.
    """
    s = np.asarray(kernel_times, float)
    t = np.asarray(history_times, float)
    M = len(t) - 1
    if kind == "implicit":
        dt = np.diff(t)
        if len(s) < len(t) or not np.allclose(s[: len(t)], t) or not np.allclose(dt, dt[0]):
            raise ConfigurationError("implicit quadrature needs one shared uniform grid")
        Q = np.zeros((M + 1, M + 1, len(s)))
        for k in range(1, M + 1):
            m = np.arange(1, k + 1)
            Q[k, m, k - m + 1] = dt[0]
        return Q
    if t[-1] - t[0] > s[-1] - s[0] + 1e-12:
        raise ConfigurationError("kernel grid does not cover the history horizon")
    L = len(s) if kind == "linear" else len(s) - 1
    Q = np.zeros((M + 1, M + 1, L))
    for k in range(1, M + 1):
        tk = t[k]
        lags = tk - s[(s > 0) & (s < tk - t[0])]
        br = np.unique(np.concatenate([t[: k + 1], lags]))
        a, b = br[:-1], br[1:]
        keep = b - a > 1e-15 * max(1.0, tk)
        a, b = a[keep], b[keep]
        mid = 0.5 * (a + b)
        hist = [_hat_values(t, p) for p in (a, mid, b)]
        if kind == "linear":
            ker = [_hat_values(s, np.clip(tk - p, s[0], s[-1])) for p in (a, mid, b)]
            wts = [1.0, 4.0, 1.0]
            Q[k] = sum(
                w * (hist[i] * ((b - a) / 6.0)[:, None]).T @ ker[i] for i, w in enumerate(wts)
            )
        elif kind == "derivative":
            box = _box_values(s, np.clip(tk - mid, s[0], s[-1]))
            hsum = (hist[0] + 4 * hist[1] + hist[2]) * ((b - a) / 6.0)[:, None]
            Q[k] = hsum.T @ box
        else:
            raise ConfigurationError(f"unknown quadrature kind {kind!r}")
    return Q


def kernel_slopes(times, values):
    """Interval slopes of a piecewise linear kernel."""
    dt = np.diff(times).reshape((-1,) + (1,) * (values.ndim - 1))
    return np.diff(values, axis=0) / dt


_MODES = {
    "scalar": (0, None),
    "*": (2, 1),
    "*1": (1, 1),
    "*2": (2, 2),
    "*3": (3, 3),
}


def _contraction(mode, kernel_rank):
    if mode == "scalar":
        return "a...,a...->..."
    if mode == "*":
        return "aij...,aj...->i..."
    if mode == "*1":
        return "aj...,aj...->..."
    if mode == "*2":
        return "akj...,akj...->..." if kernel_rank == 2 else "aikj...,akj...->i..."
    if mode == "*3":
        return "aikj...,aikj...->..."
    raise TypeError(f"unknown contraction mode {mode!r}")


def _check_ranks(mode, kernel, history, kernel_rank, d=2):
    if mode not in _MODES:
        raise TypeError(f"unknown contraction mode {mode!r}")
    if mode == "*2" and kernel_rank not in (2, 3):
        raise TypeError("mode *2 needs a kernel of rank 2 or 3")
    hrank = _MODES[mode][1]
    if kernel.ndim - 1 < kernel_rank or any(n != d for n in kernel.shape[1:1 + kernel_rank]):
        raise TypeError(f"kernel of shape {kernel.shape[1:]} is not rank {kernel_rank} for mode {mode}")
    if hrank is not None and (
        history.ndim - 1 < hrank or any(n != d for n in history.shape[1:1 + hrank])
    ):
        raise TypeError(f"history of shape {history.shape[1:]} is not rank {hrank} for mode {mode}")


def volterra_convolve(kernel, history, mode="*", kernel_times=None, history_times=None,
                      kind="linear", kernel_rank=None, weights=None):
    """``(K * X)(t_k) = int_0^{t_k} K(t_k - s) X(s) ds`` with a tensor contraction.

    ``mode`` is one of ``scalar``, ``*`` (matrix-vector), ``*1`` (dot),
    ``*2`` (double contraction) and ``*3`` (triple contraction).
    """
    kernel = np.asarray(kernel, float)
    history = np.asarray(history, float)
    if kernel_rank is None:
        kernel_rank = _MODES.get(mode, (None,))[0]
        if kernel_rank is None:
            raise TypeError(f"unknown contraction mode {mode!r}")
    _check_ranks(mode, kernel, history, kernel_rank)
    if weights is None:
        if kernel_times is None:
            raise ConfigurationError("kernel_times are required")
        history_times = kernel_times if history_times is None else history_times
        weights = quadrature_weights(kernel_times, history_times, kind)
    spec = _contraction(mode, kernel_rank)
    out = []
    for k in range(weights.shape[0]):
        qk = weights[k]
        rows = np.nonzero(np.abs(qk).sum(axis=1))[0]
        cols = np.nonzero(np.abs(qk).sum(axis=0))[0]
        if len(rows) == 0:
            out.append(None)
            continue
        q = qk[np.ix_(rows, cols)]
        if kernel[0].size <= history[0].size:
            kk = np.tensordot(q, kernel[cols], axes=(1, 0))
            out.append(np.einsum(spec, kk, history[rows]))
        else:
            xx = np.tensordot(q.T, history[rows], axes=(1, 0))
            out.append(np.einsum(spec, kernel[cols], xx))
    shape = next(o.shape for o in out if o is not None) if any(o is not None for o in out) else ()
    return np.stack([np.zeros(shape) if o is None else o for o in out])


# ------------------------------------------------------ macro operators


class MacroGrid:
    """Cell-centred pressure and face fluxes on the unperforated unit square.

    Boundary faces carry no flux (the Neumann closure).
    """

    def __init__(self, N):
        self.N = N
        self.h = 1.0 / N
        k = np.arange(N)
        lam = -4.0 / self.h**2 * np.sin(np.pi * k / (2 * N)) ** 2
        self._eig = lam[:, None] + lam[None, :]
        self._eig[0, 0] = 1.0

    def gradient(self, p):
        h = self.h
        gx = np.zeros((self.N + 1, self.N))
        gy = np.zeros((self.N, self.N + 1))
        gx[1:-1] = (p[1:] - p[:-1]) / h
        gy[:, 1:-1] = (p[:, 1:] - p[:, :-1]) / h
        return gx, gy

    def divergence(self, fx, fy, boundary=False):
        """Cell divergence; boundary faces are dropped unless ``boundary``."""
        if not boundary:
            fx = fx.copy()
            fy = fy.copy()
            fx[[0, -1]] = 0.0
            fy[:, [0, -1]] = 0.0
        return (fx[1:] - fx[:-1] + fy[:, 1:] - fy[:, :-1]) / self.h

    def solve_neumann(self, rhs):
        """Zero-mean solution of the discrete Neumann problem ``DG p = rhs``.

        DCT-II diagonalises the 5-point Neumann Laplacian exactly.
        """
        b = fft.dctn(rhs - rhs.mean(), type=2, norm="ortho")
        b /= self._eig
        b[0, 0] = 0.0
        return fft.idctn(b, type=2, norm="ortho")

    def second_derivatives(self, p):
        """``(Dxx p, Dxy p, Dyy p)``: the cell fields used for anisotropic kernels."""
        h = self.h
        q = np.pad(p, 1, mode="edge")
        dxx = (q[2:, 1:-1] - 2 * p + q[:-2, 1:-1]) / h**2
        dyy = (q[1:-1, 2:] - 2 * p + q[1:-1, :-2]) / h**2
        dxy = (q[2:, 2:] - q[2:, :-2] - q[:-2, 2:] + q[:-2, :-2]) / (4 * h * h)
        return dxx, dxy, dyy

    def cell_centres(self):
        c = (np.arange(self.N) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    def face_centres(self):
        h = self.h
        nodes = np.arange(self.N + 1) * h
        mids = (np.arange(self.N) + 0.5) * h
        return np.meshgrid(nodes, mids, indexing="ij"), np.meshgrid(mids, nodes, indexing="ij")


def to_x_faces(fy):
    """Average a y-face array to x-face positions (edge padded)."""
    c = 0.5 * (fy[:, 1:] + fy[:, :-1])
    c = np.pad(c, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (c[1:] + c[:-1])


def to_y_faces(fx):
    c = 0.5 * (fx[1:] + fx[:-1])
    c = np.pad(c, ((0, 0), (1, 1)), mode="edge")
    return 0.5 * (c[:, 1:] + c[:, :-1])


# --------------------------------------------------------- body forces


@dataclass
class BodyForce:
    """Separable force ``f(x, t) = sum_s theta_s(t) f_s(x)``.

    Each spatial mode is a callable ``(x, y) -> (f1, f2)``; each temporal
    mode a callable of ``t``. ``smoothness`` is free-form metadata.
    """

    temporal: list
    spatial: list
    smoothness: str = "smooth"
    name: str = "custom"

    def theta(self, times):
        return np.array([[float(th(t)) for t in times] for th in self.temporal])

    def faces(self, macro: MacroGrid):
        """Each spatial mode sampled on its own faces: list of ``(fx, fy)``."""
        (xx, xy), (yx, yy) = macro.face_centres()
        out = []
        for f in self.spatial:
            fx = np.asarray(f(xx, xy)[0], float) * np.ones_like(xx)
            fy = np.asarray(f(yx, yy)[1], float) * np.ones_like(yx)
            out.append((fx, fy))
        return out

    def centres(self, macro: MacroGrid):
        x, y = macro.cell_centres()
        return [tuple(np.asarray(c, float) * np.ones_like(x) for c in f(x, y)) for f in self.spatial]

    def __add__(self, other):
        return BodyForce(self.temporal + other.temporal, self.spatial + other.spatial,
                         self.smoothness, f"{self.name}+{other.name}")

    def scaled(self, c):
        return BodyForce(self.temporal, [(lambda f: (lambda x, y: tuple(c * v for v in f(x, y))))(f)
                                         for f in self.spatial], self.smoothness, self.name)

    @classmethod
    def from_samples(cls, times, fields, rank_tol=1e-12, name="sampled"):
        """Compress a sampled history ``(M+1, 2, N, N)`` of cell values by SVD.

        Spatial modes are interpolated bilinearly between cell centres.
        """
        times = np.asarray(times, float)
        fields = np.asarray(fields, float)
        M1, _, N, _ = fields.shape
        U, S, Vt = np.linalg.svd(fields.reshape(M1, -1), full_matrices=False)
        r = int((S > rank_tol * max(S[0], 1e-300)).sum()) if S.size and S[0] > 0 else 0
        from scipy.interpolate import RegularGridInterpolator

        c = (np.arange(N) + 0.5) / N
        temporal, spatial = [], []
        for i in range(r):
            mode = (S[i] * Vt[i]).reshape(2, N, N)
            interps = [RegularGridInterpolator((c, c), mode[q], bounds_error=False, fill_value=None)
                       for q in range(2)]
            spatial.append(lambda x, y, it=interps: tuple(
                it[q](np.stack([np.ravel(x), np.ravel(y)], -1)).reshape(np.shape(x)) for q in range(2)))
            temporal.append(lambda t, ui=U[:, i]: np.interp(t, times, ui))
        return cls(temporal, spatial, "sampled", name)


def ramp_force(amplitude=1.0):
    """``f = t f0`` with ``f0 = curl(sin pi x sin pi y) + grad(cos 2 pi x cos pi y)``.

    ``f0 . n = 0`` on the boundary while the tangential part does not vanish.
    """
    pi = np.pi

    def f0(x, y):
        f1 = pi * np.sin(pi * x) * np.cos(pi * y) - 2 * pi * np.sin(2 * pi * x) * np.cos(pi * y)
        f2 = -pi * np.cos(pi * x) * np.sin(pi * y) - pi * np.cos(2 * pi * x) * np.sin(pi * y)
        return amplitude * f1, amplitude * f2

    return BodyForce([lambda t: t], [f0], "C-infinity", "ramp")


def gradient_force(q_cells_or_callable, theta=lambda t: 1.0):
    """Force equal to the discrete gradient of a cell-sampled potential."""
    return _GradientForce(q_cells_or_callable, theta)


class _GradientForce(BodyForce):
    def __init__(self, q, theta):
        super().__init__([theta], [None], "smooth", "gradient")
        self.q = q

    def _q(self, macro):
        x, y = macro.cell_centres()
        return self.q(x, y) if callable(self.q) else np.asarray(self.q, float)

    def faces(self, macro):
        return [macro.gradient(self._q(macro))]

    def centres(self, macro):
        g = np.gradient(self._q(macro), macro.h)
        return [(g[0], g[1])]


# ------------------------------------------------------ darcy solution


@dataclass(eq=False)
class HomogenizedSolution:
    times: np.ndarray
    p: np.ndarray
    macro: MacroGrid = field(repr=False)
    windows: list = field(default_factory=list)
    history: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    window_budget: float = np.nan
    operator_norm: float = np.nan
    single_node_windows: bool = False
    ux: np.ndarray = None
    uy: np.ndarray = None
    F_modes: list = None
    F_temporal: np.ndarray = None

    @property
    def max_ratio(self):
        return max((max(r) for r in self.ratios if r), default=0.0)


def operator_norm(macro: MacroGrid, fluid_fraction, iters=30, seed=0):
    """Power iteration for the norm of ``G L^{-1} D`` on face fields."""
    rng = np.random.default_rng(seed)
    fx = rng.standard_normal((macro.N + 1, macro.N))
    fy = rng.standard_normal((macro.N, macro.N + 1))
    fx[[0, -1]] = 0
    fy[:, [0, -1]] = 0
    est = 0.0
    for _ in range(iters):
        nrm = np.sqrt((fx**2).sum() + (fy**2).sum())
        fx, fy = fx / nrm, fy / nrm
        p = macro.solve_neumann(macro.divergence(fx, fy)) / fluid_fraction
        fx, fy = macro.gradient(p)
        est = np.sqrt((fx**2).sum() + (fy**2).sum())
    return float(est)


def _modes_of_force(force: BodyForce, macro, times):
    return force.theta(times), force.faces(macro)


def _apply_matrix(A, fx, fy):
    """Constant 2x2 matrix acting on a face field (cross terms averaged)."""
    if A[0, 1] == 0 and A[1, 0] == 0:
        return A[0, 0] * fx, A[1, 1] * fy
    return (A[0, 0] * fx + A[0, 1] * to_x_faces(fy), A[1, 0] * to_y_faces(fx) + A[1, 1] * fy)


def solve_pressure(kernel: PermeabilityKernel, force: BodyForce, N: int, grid: TimeGrid,
                   guess="instantaneous", tol=1e-10, maxiter=50, budget_factor=0.25,
                   iso_tol=1e-8, fast=True):
    """Windowed Picard iteration ``p <- f~ - K(p)`` for the memory Darcy law."""
    if not grid.uniform:
        raise ConfigurationError("the homogenized solve uses a uniform time grid")
    Yf = kernel.fluid_fraction
    if np.abs(kernel.A[0] - Yf * np.eye(2)).max() > 1e-8:
        raise ConfigurationError("kernel must satisfy A(0) = |Y_f| I")
    if not np.isfinite(kernel.l1_derivative):
        raise ConfigurationError("kernel derivative is not integrable")
    macro = MacroGrid(N)
    t = grid.nodes
    M = grid.M
    Qd = quadrature_weights(kernel.times, t, "derivative")
    slopes = kernel_slopes(kernel.times, kernel.A)
    # W[k, m] = sum_l Q'[k, m, l] A'_l, a 2x2 matrix per pair of nodes
    Wkm = np.einsum("kml,lij->kmij", Qd, slopes)
    iso = kernel.is_isotropic(iso_tol) and fast

    thetas, fmodes = _modes_of_force(force, macro, t)
    # f~ = L^{-1} D [A(0) f + A' * f]
    ftil = np.zeros((M + 1, N, N))
    div_modes = []
    for th, (fx, fy) in zip(thetas, fmodes):
        div_modes.append(macro.divergence(fx, fy))
    for k in range(M + 1):
        rhs = np.zeros((N, N))
        for s, (th, (fx, fy)) in enumerate(zip(thetas, fmodes)):
            rhs += Yf * th[k] * div_modes[s]
            C = np.einsum("mij,m->ij", Wkm[k], th)
            if iso:
                rhs += C[0, 0] * div_modes[s]
            else:
                ax, ay = _apply_matrix(C, fx, fy)
                rhs += macro.divergence(ax, ay)
        ftil[k] = macro.solve_neumann(rhs) / Yf

    C1 = operator_norm(macro, Yf)
    budget = budget_factor / C1
    var = kernel.variation()
    delta0 = float(np.interp(budget, var, kernel.times)) if var[-1] > budget else kernel.times[-1]
    dt = grid.T / M
    width = int(np.floor(delta0 / dt + 1e-12))
    single = width < 1
    width = max(width, 1)

    p = np.zeros((M + 1, N, N))
    p[0] = ftil[0]
    second = None if iso else np.zeros((M + 1, 3, N, N))
    if second is not None:
        second[0] = macro.second_derivatives(p[0])

    def apply_K(k):
        if iso:
            return np.tensordot(Wkm[k, : k + 1, 0, 0], p[: k + 1], axes=(0, 0)) / Yf
        w = Wkm[k, : k + 1]
        rhs = (np.tensordot(w[:, 0, 0], second[: k + 1, 0], axes=(0, 0))
               + np.tensordot(w[:, 0, 1] + w[:, 1, 0], second[: k + 1, 1], axes=(0, 0))
               + np.tensordot(w[:, 1, 1], second[: k + 1, 2], axes=(0, 0)))
        return macro.solve_neumann(rhs) / Yf

    sol = HomogenizedSolution(t, p, macro, window_budget=budget, operator_norm=C1,
                              single_node_windows=single)
    k0 = 0
    while k0 < M:
        k1 = min(M, k0 + width)
        idx = np.arange(k0 + 1, k1 + 1)
        if guess == "instantaneous":
            p[idx] = ftil[idx] - 0.0
            # exact for isotropic kernels: the memory term cancels
            for k in idx:
                rhs = np.zeros((N, N))
                for s, (th, _) in enumerate(zip(thetas, fmodes)):
                    rhs += th[k] * div_modes[s]
                p[k] = macro.solve_neumann(rhs)
        elif guess == "zero":
            p[idx] = 0.0
        else:
            raise ConfigurationError(f"unknown initial guess {guess!r}")
        if second is not None:
            for k in idx:
                second[k] = macro.second_derivatives(p[k])
        ratios, updates = [], []
        prev = None
        scale = max(np.sqrt((ftil[idx] ** 2).sum()), 1e-300)
        for it in range(maxiter):
            new = np.stack([ftil[k] - apply_K(k) for k in idx])
            upd = np.sqrt(((new - p[idx]) ** 2).sum())
            p[idx] = new
            if second is not None:
                for k in idx:
                    second[k] = macro.second_derivatives(p[k])
            updates.append(upd / scale)
            if prev is not None and prev > 1e3 * tol * scale:
                ratios.append(upd / prev)
                if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
                    raise NonContractionError(
                        f"fixed point iteration is not contracting on window {k0}-{k1} "
                        f"(ratio {ratios[-1]:.3f})", ratios)
            prev = upd
            if upd <= tol * scale:
                break
        sol.windows.append((float(t[k0]), float(t[k1])))
        sol.history.append(updates)
        sol.ratios.append(ratios)
        k0 = k1
    for k in range(M + 1):
        p[k] -= p[k].mean()
    return sol


def forcing_modes(sol: HomogenizedSolution, force: BodyForce, rank_tol=1e-12):
    """Low-rank face modes of ``F = f - grad p0``: ``(temporal (R, M+1), [(Fx, Fy)])``."""
    macro = sol.macro
    thetas, fmodes = _modes_of_force(force, macro, sol.times)
    M1, N = sol.p.shape[0], macro.N
    U, S, Vt = np.linalg.svd(sol.p.reshape(M1, -1), full_matrices=False)
    r = int((S > rank_tol * max(S[0], 1e-300)).sum()) if S[0] > 0 else 0
    temporal = list(thetas)
    spatial = [(fx.copy(), fy.copy()) for fx, fy in fmodes]
    for i in range(r):
        gx, gy = macro.gradient((S[i] * Vt[i]).reshape(N, N))
        temporal.append(U[:, i])
        spatial.append((-gx, -gy))
    for fx, fy in spatial:
        # no-flux closure on the boundary faces
        fx[[0, -1]] = 0.0
        fy[:, [0, -1]] = 0.0
    return np.array(temporal), spatial


def velocity_from_pressure(kernel: PermeabilityKernel, force: BodyForce, sol: HomogenizedSolution,
                           kind="linear"):
    """``u0 = A * (f - grad p0)`` on faces; stored on ``sol`` and returned."""
    temporal, spatial = forcing_modes(sol, force)
    Q = quadrature_weights(kernel.times, sol.times, kind)
    M1 = len(sol.times)
    N = sol.macro.N
    ux = np.zeros((M1, N + 1, N))
    uy = np.zeros((M1, N, N + 1))
    for th, (fx, fy) in zip(temporal, spatial):
        C = np.einsum("kml,lij,m->kij", Q, kernel.A, th)
        for k in range(M1):
            ax, ay = _apply_matrix(C[k], fx, fy)
            ux[k] += ax
            uy[k] += ay
    sol.ux, sol.uy = ux, uy
    sol.F_temporal, sol.F_modes = temporal, spatial
    return ux, uy


def check_homogenized(sol_or_fields, macro: MacroGrid = None):
    """Max interior divergence and boundary normal flux per time node."""
    if isinstance(sol_or_fields, HomogenizedSolution):
        ux, uy, macro = sol_or_fields.ux, sol_or_fields.uy, sol_or_fields.macro
    else:
        ux, uy = sol_or_fields
    div = np.array([np.abs(macro.divergence(ux[k], uy[k], boundary=True)).max() for k in range(len(ux))])
    flux = np.array([
        max(np.abs(ux[k][[0, -1]]).max(), np.abs(uy[k][:, [0, -1]]).max()) for k in range(len(ux))
    ])
    return {"divergence": div, "normal_flux": flux}
