"""Two-scale expansion, layer sources, boundary-layer correctors and error norms.

Everything lives on the fine ``N x N`` MAC grid of the perforated square.
Cell quantities are mapped with ``y = x / eps`` by periodic tiling, which
is exact because ``N = n_cell / eps``.

Time convolutions of cell fields use the discrete Duhamel rule of the
implicit Euler scheme, ``(K * theta)_k = dt sum_{m=1..k} K_{k-m+1} theta_m``,
so that in the periodic setting the expansion reproduces the fine scheme
step for step and the measured errors are free of time-stepping error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .aux_correctors import BogovskiiCorrector
from .cell_corrector import PermeabilityKernel
from .darcy_memory import (
    BodyForce, HomogenizedSolution, forcing_modes, quadrature_weights, to_x_faces,
    to_y_faces,
)
from .geometry import (
    ConfigurationError, CutoffFunction, LayerDecomposition, PerforatedDomain, boundary_distance,
)
from .linalg import CompatibilityError
from .mac import INTERIOR, MinNormDivergence, StaggeredGrid

# ------------------------------------------------------------- smoothing


def _zeta(r):
    """Radial bump supported in ``|r| < 1/2`` (unnormalised)."""
    r = np.asarray(r, float)
    s = (2 * r) ** 2
    out = np.zeros_like(r)
    inside = s < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside]))
    return out


def _dzeta(r):
    """``d zeta / dr`` and ``d^2 zeta / dr^2``."""
    r = np.asarray(r, float)
    s = (2 * r) ** 2
    d1 = np.zeros_like(r)
    d2 = np.zeros_like(r)
    ok = s < 1
    z = np.exp(-1.0 / (1.0 - s[ok]))
    q = 1.0 - s[ok]
    # d/dr exp(-1/(1 - 4 r^2)) = -8 r / q^2 * z
    rr = r[ok]
    d1[ok] = -8 * rr / q**2 * z
    # derivative of -8 r z / q^2
    dq = -8 * rr
    d2[ok] = (-8 * z / q**2) + (-8 * rr) * (d1[ok] / q**2 - 2 * z * dq / q**3)
    return d1, d2


class Smoother:
    """``S_delta f = zeta_delta * f`` on a lattice of spacing ``h``.

    ``zeta`` is a radial bump supported in ``B(0, 1/2)``, so ``S_delta``
    has support radius ``delta / 2``. Discrete kernels are normalised so
    that the operator and its first and second derivatives are exact on
    polynomials of the matching degree.
    """

    def __init__(self, delta, h):
        if delta < 2 * h:
            raise ConfigurationError(f"smoothing width delta={delta:g} is below two grid spacings")
        self.delta = delta
        self.h = h
        R = int(np.ceil(delta / (2 * h)))
        off = np.arange(-R, R + 1) * h
        X, Y = np.meshgrid(off, off, indexing="ij")
        r = np.hypot(X, Y) / delta
        base = _zeta(r)
        base /= base.sum()
        d1, d2 = _dzeta(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            ux = np.where(r > 0, X / (r * delta), 0.0)
            uy = np.where(r > 0, Y / (r * delta), 0.0)
            d1r = np.where(r > 0, d1 / (r * delta), 0.0)
        # zeta(|y|/delta): grad = zeta'(r) y / (|y| delta); Hessian from radial form
        kx = d1 * ux / delta
        ky = d1 * uy / delta
        kxx = d2 * ux * ux / delta**2 + d1r / delta * (1 - ux * ux)
        kyy = d2 * uy * uy / delta**2 + d1r / delta * (1 - uy * uy)
        kxy = d2 * ux * uy / delta**2 - d1r / delta * ux * uy
        c = r == 0
        kxx[c] = kyy[c] = -8.0 * np.exp(-1.0) / delta**2
        kxy[c] = 0.0
        # fix zeroth and second moments exactly with multiples of the base kernel
        basis = np.stack([base, base * X**2, base * Y**2])
        moments = np.array([[b.sum(), (X**2 / 2 * b).sum(), (Y**2 / 2 * b).sum()] for b in basis]).T

        def fixed(k, target):
            have = np.array([k.sum(), (X**2 / 2 * k).sum(), (Y**2 / 2 * k).sum()])
            coef = np.linalg.solve(moments, np.asarray(target, float) - have)
            return k + np.tensordot(coef, basis, axes=(0, 0))

        self.kernels = {
            "0": base,
            "x": kx / (-(X * kx).sum()),
            "y": ky / (-(Y * ky).sum()),
            "xx": fixed(kxx, (0.0, 1.0, 0.0)),
            "yy": fixed(kyy, (0.0, 0.0, 1.0)),
            "xy": kxy / ((X * Y * kxy).sum()),
        }
        self.radius = R

    def __call__(self, f, which="0"):
        return ndimage.convolve(np.asarray(f, float), self.kernels[which], mode="constant")


def smooth(field_, delta, h):
    return Smoother(delta, h)(field_)


def generic_cutoff(eps, x, y):
    """C^1 cut-off: 0 for ``dist < 3 eps / 8``, 1 for ``dist >= eps / 2``."""
    d = boundary_distance(x, y)
    s = np.clip((d - 3 * eps / 8) / (eps / 8), 0.0, 1.0)
    return s * s * (3 - 2 * s)


# --------------------------------------------------------- forcing fields


_LATTICES = ("x", "y", "c", "k")


def lattice_points(N, lattice):
    h = 1.0 / N
    nodes = np.arange(N + 1) * h
    mids = (np.arange(N) + 0.5) * h
    axes = {"x": (nodes, mids), "y": (mids, nodes), "c": (mids, mids), "k": (nodes, nodes)}[lattice]
    return np.meshgrid(*axes, indexing="ij")


def _face_mode_on(fx, fy, lattice):
    """Both components of a face field on one lattice."""
    if lattice == "x":
        return fx, to_x_faces(fy)
    if lattice == "y":
        return to_y_faces(fx), fy
    cx = 0.5 * (fx[1:] + fx[:-1])
    cy = 0.5 * (fy[:, 1:] + fy[:, :-1])
    if lattice == "c":
        return cx, cy
    px = np.pad(fx, ((0, 0), (1, 1)), mode="edge")
    py = np.pad(fy, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (px[:, 1:] + px[:, :-1]), 0.5 * (py[1:] + py[:-1])


@dataclass(eq=False)
class ForcingFields:
    """Low-rank ``F = f - grad p0`` and ``G = S_delta(phi_eps F)``.

    ``theta[r]`` is the temporal factor of mode ``r``. ``F[r][L]`` and
    ``G[r][L]`` hold the two components on lattice ``L``; ``dG[r][L]`` the
    first derivatives ``[k][j] = d_k G_j`` and ``d2G[r]`` the second
    derivatives at cell centres ``[a][k][j]``.
    """

    eps: float
    N: int
    times: np.ndarray
    theta: np.ndarray
    F: list
    G: list
    dG: list
    d2G: list
    smoother: Smoother = field(repr=False)
    cutoff: dict = field(repr=False)

    @property
    def rank(self):
        return len(self.theta)

    def support_gap(self):
        """Smallest boundary distance of a cell centre where ``G != 0``."""
        x, y = lattice_points(self.N, "c")
        d = boundary_distance(x, y)
        nz = np.zeros_like(d, bool)
        for r in range(self.rank):
            for j in range(2):
                nz |= self.G[r]["c"][j] != 0
        return float(d[nz].min()) if nz.any() else np.inf


def forcing_fields(sol: HomogenizedSolution, force: BodyForce, eps) -> ForcingFields:
    N = sol.macro.N
    h = 1.0 / N
    theta, modes = forcing_modes(sol, force)
    sm = Smoother(eps / 2, h)
    cut = {L: generic_cutoff(eps, *lattice_points(N, L)) for L in _LATTICES}
    F, G, dG, d2G = [], [], [], []
    for fx, fy in modes:
        Fr = {L: _face_mode_on(fx, fy, L) for L in _LATTICES}
        F.append(Fr)
        Gr, dGr = {}, {}
        for L in ("x", "y", "c"):
            masked = [cut[L] * Fr[L][j] for j in range(2)]
            Gr[L] = tuple(sm(masked[j]) for j in range(2))
            dGr[L] = [[sm(masked[j], which) for j in range(2)] for which in ("x", "y")]
        masked = [cut["c"] * Fr["c"][j] for j in range(2)]
        names = [["xx", "xy"], ["xy", "yy"]]
        d2G.append([[[sm(masked[j], names[a][k]) for j in range(2)] for k in range(2)] for a in range(2)])
        G.append(Gr)
        dG.append(dGr)
    return ForcingFields(eps, N, sol.times.copy(), theta, F, G, dG, d2G, sm, cut)


# ------------------------------------------------------ cell convolutions


def duhamel_matrix(times, theta):
    """``C[k, l]`` with ``(K * theta)_k = sum_l C[k, l] K_l`` (Duhamel rule)."""
    Q = quadrature_weights(times, times, "implicit")
    return np.einsum("kml,m->kl", Q, theta)


@dataclass(eq=False)
class CellConvolutions:
    """Cell correctors convolved in time with each temporal mode.

    ``Wx[r]`` has shape ``(M+1, 2, n, n)`` (direction ``j`` second), ``phix[r]``
    shape ``(M+1, 2, 2, n, n)`` for ``phi_{., k, j}``; ``A[r]`` is ``(M+1, 2, 2)``;
    ``grad[r][(comp, axis)]`` the cell edge differences of ``W * theta_r``.
    """

    times: np.ndarray
    n: int
    Wx: list
    Wy: list
    phix: list
    phiy: list
    A: list
    pi: list
    grad: list
    fluid_fraction: float


def cell_convolutions(trajectories, kernel: PermeabilityKernel, bog: BogovskiiCorrector,
                      theta) -> CellConvolutions:
    trajectories = sorted(trajectories, key=lambda tr: tr.j)
    t = kernel.times
    g = trajectories[0].grid
    ux = np.stack([tr.ux for tr in trajectories], axis=1)
    uy = np.stack([tr.uy for tr in trajectories], axis=1)
    pi = np.stack([tr.pi for tr in trajectories], axis=1)
    M1 = len(t)
    px = np.zeros((M1, 2, 2) + g.xshape)
    py = np.zeros((M1, 2, 2) + g.yshape)
    if bog is not None:
        for k in range(M1):
            for a in range(2):
                for j in range(2):
                    px[k, a, j], py[k, a, j] = bog.faces(k, a, j)
    out = dict(Wx=[], Wy=[], phix=[], phiy=[], A=[], pi=[], grad=[])
    for th in theta:
        C = duhamel_matrix(t, th)
        cw = [np.tensordot(C, arr, axes=(1, 0)) for arr in (ux, uy)]
        out["Wx"].append(cw[0])
        out["Wy"].append(cw[1])
        out["phix"].append(np.tensordot(C, px, axes=(1, 0)))
        out["phiy"].append(np.tensordot(C, py, axes=(1, 0)))
        out["A"].append(np.tensordot(C, kernel.A, axes=(1, 0)))
        out["pi"].append(np.tensordot(C, pi, axes=(1, 0)))
        grads = {key: np.zeros((M1, 2, g.n, g.n)) for key in ((0, 0), (0, 1), (1, 0), (1, 1))}
        for k in range(M1):
            for j in range(2):
                for key, (val, _) in g.edge_gradients(cw[0][k, j], cw[1][k, j]).items():
                    grads[key][k, j] = val
        out["grad"].append(grads)
    return CellConvolutions(t.copy(), g.n, fluid_fraction=kernel.fluid_fraction, **out)


def tile(a, K, lattice):
    """Periodic image of a cell array on the fine lattice."""
    t = np.tile(a, (K, K))
    if lattice == "x":
        return np.vstack([t, t[:1]])
    if lattice == "y":
        return np.hstack([t, t[:, :1]])
    if lattice in ("k01", "k10"):
        shift = (0, 1) if lattice == "k01" else (1, 0)
        t = np.tile(np.roll(a, shift, axis=(0, 1)), (K, K))
        return np.pad(t, ((0, 1), (0, 1)), mode="wrap")
    return t


def _edge_lattice(key):
    return {(0, 0): ("c", "c"), (1, 1): ("c", "c"), (0, 1): ("k01", "k"), (1, 0): ("k10", "k")}[key]


# ------------------------------------------------------------- expansion


class Expansion:
    """Evaluates ``W(x/eps) * X`` and its companions at one time node."""

    def __init__(self, cells: CellConvolutions, forcing: ForcingFields, eps, field_="F"):
        if field_ not in ("F", "G"):
            raise ConfigurationError("expansion field must be 'F' or 'G'")
        if forcing.N % cells.n or round(forcing.N / cells.n) != round(1 / eps):
            raise ConfigurationError(
                f"grid N={forcing.N} is not n_cell/eps for n_cell={cells.n}, eps={eps:g}"
            )
        if len(cells.times) != len(forcing.times) or not np.allclose(cells.times, forcing.times):
            raise ConfigurationError("cell and macro histories use different time grids")
        self.cells = cells
        self.forcing = forcing
        self.eps = eps
        self.K = forcing.N // cells.n
        self.field = field_
        self._X = forcing.F if field_ == "F" else forcing.G

    def _sample(self, r, lattice):
        if self.field == "G" and lattice == "k":
            # corner values of G from the cell-centred samples
            gx, gy = self._X[r]["c"]
            pad = [np.pad(v, 1, mode="edge") for v in (gx, gy)]
            return tuple(0.25 * (p[1:, 1:] + p[:-1, 1:] + p[1:, :-1] + p[:-1, :-1]) for p in pad)
        return self._X[r][lattice]

    def velocity(self, k):
        """``W^eps * X`` on x- and y-faces."""
        c, K = self.cells, self.K
        ex = 0.0
        ey = 0.0
        for r in range(self.forcing.rank):
            X = self._sample(r, "x")
            Y = self._sample(r, "y")
            for j in range(2):
                ex = ex + tile(c.Wx[r][k, j], K, "x") * X[j]
                ey = ey + tile(c.Wy[r][k, j], K, "y") * Y[j]
        return ex, ey

    def gradient(self, k):
        """``(grad_y W)(x/eps) * X`` on the staggered edges."""
        c, K = self.cells, self.K
        out = {}
        for key in ((0, 0), (0, 1), (1, 0), (1, 1)):
            lat, flat = _edge_lattice(key)
            acc = 0.0
            for r in range(self.forcing.rank):
                X = self._sample(r, flat)
                for j in range(2):
                    acc = acc + tile(c.grad[r][key][k, j], K, lat) * X[j]
            out[key] = acc
        return out

    def layer_field(self, k):
        """``V = W^eps * G + eps phi^eps *_2 dG`` and ``A * G`` on faces."""
        if self.field != "G":
            raise ConfigurationError("layer fields are built from G")
        c, K, fo = self.cells, self.K, self.forcing
        vw = [0.0, 0.0]
        vp = [0.0, 0.0]
        ag = [0.0, 0.0]
        for r in range(fo.rank):
            for comp, (lat, W, P) in enumerate((("x", c.Wx, c.phix), ("y", c.Wy, c.phiy))):
                G = fo.G[r][lat]
                dG = fo.dG[r][lat]
                for j in range(2):
                    vw[comp] = vw[comp] + tile(W[r][k, j], K, lat) * G[j]
                    ag[comp] = ag[comp] + c.A[r][k, comp, j] * G[j]
                    for kk in range(2):
                        vp[comp] = vp[comp] + tile(P[r][k, kk, j], K, lat) * dG[kk][j]
        return vw, [self.eps * v for v in vp], ag

    def formula_terms(self, k, psi_c):
        """Third and fourth terms of ``J_2`` evaluated from their closed form."""
        c, K, fo = self.cells, self.K, self.forcing
        t3 = 0.0
        t4 = 0.0
        for r in range(fo.rank):
            dG = fo.dG[r]["c"]
            for kk in range(2):
                for j in range(2):
                    t3 = t3 + c.A[r][k, kk, j] / c.fluid_fraction * dG[kk][j]
                    for a in range(2):
                        pc = 0.5 * (c.phix[r][k, kk, j] + np.roll(c.phix[r][k, kk, j], -1, 0)) if a == 0 \
                            else 0.5 * (c.phiy[r][k, kk, j] + np.roll(c.phiy[r][k, kk, j], -1, 1))
                        t4 = t4 + tile(pc, K, "c") * fo.d2G[r][a][kk][j]
        return psi_c * t3, self.eps * psi_c * t4


# ----------------------------------------------------------- error norms


@dataclass
class ErrorReport:
    """Per-eps norms over ``Omega_eps x (0, T)``.

    ``velocity``, ``gradient`` and ``time_derivative`` use ``F = f - grad p0``;
    the ``*_G`` variants use ``G``. ``pressure`` is realised with ``c`` equal
    to the space-time mean of ``p~ - p0``.
    """

    eps: float
    velocity: float
    gradient: float
    time_derivative: float
    pressure: float
    velocity_G: float
    gradient_G: float
    pressure_offset: float
    pressure_sums: tuple
    reference: dict

    def as_dict(self):
        return {
            "eps": self.eps, "velocity": self.velocity, "gradient": self.gradient,
            "time_derivative": self.time_derivative, "pressure": self.pressure,
            "velocity_G": self.velocity_G, "gradient_G": self.gradient_G,
            "pressure_offset": self.pressure_offset, "reference": self.reference,
        }

    def pressure_norm(self, c):
        """``||p~ - p0 - c||`` for any constant ``c``."""
        s0, s1, s2 = self.pressure_sums
        return float(np.sqrt(max(s2 - 2 * c * s1 + c * c * s0, 0.0)))


class ErrorAccumulator:
    """Fine-solve callback that streams the four error norms."""

    def __init__(self, dom: PerforatedDomain, grid: StaggeredGrid, expansions, p0, with_G=True):
        from .fine_scale import extend_pressure

        self._extend = extend_pressure
        self.dom = dom
        self.grid = grid
        self.exp_F, self.exp_G = expansions
        self.with_G = with_G and self.exp_G is not None
        self.p0 = p0
        self.times = self.exp_F.cells.times
        self.wx, self.wy = grid.face_weights()
        self.sums = dict(vel=0.0, grad=0.0, dt=0.0, velG=0.0, gradG=0.0, u=0.0, gu=0.0, du=0.0)
        self.psum = [0.0, 0.0, 0.0]
        self._prev = None

    def _norm2(self, ax, ay):
        return float((self.wx * ax**2).sum() + (self.wy * ay**2).sum())

    def __call__(self, k, t, u, p):
        eps = self.dom.eps
        ux, uy = self.grid.scatter(u)
        if k == 0:
            self._prev = (ux, uy, np.zeros_like(ux), np.zeros_like(uy))
            return
        dt = t - self.times[k - 1]
        ex, ey = self.exp_F.velocity(k)
        s = self.sums
        s["vel"] += dt * self._norm2(ux - ex, uy - ey)
        s["u"] += dt * self._norm2(ux, uy)
        edges = self.grid.edge_gradients(ux, uy)
        eg = self.exp_F.gradient(k)
        for key, (val, w) in edges.items():
            s["grad"] += dt * float((w * (eps * val - eg[key]) ** 2).sum())
            s["gu"] += dt * float((w * (eps * val) ** 2).sum())
        pux, puy, pex, pey = self._prev
        s["dt"] += dt * self._norm2((ux - pux - ex + pex) / dt, (uy - puy - ey + pey) / dt)
        s["du"] += dt * self._norm2((ux - pux) / dt, (uy - puy) / dt)
        self._prev = (ux, uy, ex, ey)
        if self.with_G:
            gx, gy = self.exp_G.velocity(k)
            s["velG"] += dt * self._norm2(ux - gx, uy - gy)
            egG = self.exp_G.gradient(k)
            for key, (val, w) in edges.items():
                s["gradG"] += dt * float((w * (eps * val - egG[key]) ** 2).sum())
        pt = self._extend(self.grid.cell_field(p), self.dom)
        diff = pt - self.p0[k]
        a = self.grid.h**2 * dt
        self.psum[0] += a * diff.size
        self.psum[1] += a * float(diff.sum())
        self.psum[2] += a * float((diff**2).sum())

    def report(self) -> ErrorReport:
        s = self.sums
        s0, s1, s2 = self.psum
        c = s1 / s0 if s0 else 0.0
        pn = float(np.sqrt(max(s2 - s1 * s1 / s0, 0.0))) if s0 else 0.0
        ref = {"u": np.sqrt(s["u"]), "eps_grad_u": np.sqrt(s["gu"]), "dt_u": np.sqrt(s["du"])}
        nan = float("nan")
        return ErrorReport(
            eps=self.dom.eps, velocity=float(np.sqrt(s["vel"])), gradient=float(np.sqrt(s["grad"])),
            time_derivative=float(np.sqrt(s["dt"])), pressure=pn,
            velocity_G=float(np.sqrt(s["velG"])) if self.with_G else nan,
            gradient_G=float(np.sqrt(s["gradG"])) if self.with_G else nan,
            pressure_offset=float(c), pressure_sums=(s0, s1, s2),
            reference={k: float(v) for k, v in ref.items()},
        )


def error_norms(dom, fine_grid, expansions, p0, run_fine):
    """Run ``run_fine(callback)`` and return the accumulated :class:`ErrorReport`."""
    acc = ErrorAccumulator(dom, fine_grid, expansions, p0)
    if acc.p0.shape[1:] != dom.fluid.shape:
        raise ConfigurationError("homogenized pressure and fine grid differ in resolution")
    run_fine(acc)
    return acc.report()


def golden_section_offset(report: ErrorReport, lo=-10.0, hi=10.0, tol=1e-10):
    """Minimise ``c -> ||p~ - p0 - c||`` by golden-section search."""
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(report.pressure_norm, bracket=(lo, hi), method="golden", tol=tol)
    return float(res.x), float(res.fun)


# ------------------------------------------------------------- rate fits


@dataclass
class RateFit:
    slope: float
    intercept: float
    residual: float
    ci95: tuple


def rate_fit(eps, errors) -> RateFit:
    """Least-squares slope of ``log error`` against ``log eps``."""
    eps = np.asarray(eps, float)
    errors = np.asarray(errors, float)
    if len(eps) < 3:
        raise ConfigurationError("rate fits need at least three eps values")
    if np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise ValueError("rate fits need positive errors")
    x, y = np.log(eps), np.log(errors)
    res = stats.linregress(x, y)
    resid = y - (res.slope * x + res.intercept)
    dof = len(x) - 2
    half = stats.t.ppf(0.975, dof) * res.stderr if dof > 0 else np.inf
    return RateFit(float(res.slope), float(res.intercept), float(np.sqrt((resid**2).sum())),
                   (float(res.slope - half), float(res.slope + half)))


# ----------------------------------------------------- layer sources


def conditional_average(J1, decomp: LayerDecomposition, fluid=None):
    """Broadcast the per-cell fluid mean of ``J1`` on every layer cell."""
    fluid = np.ones_like(J1, bool) if fluid is None else fluid
    out = np.zeros_like(J1)
    lab = decomp.labels
    ok = (lab >= 0) & fluid
    n = len(decomp.boxes)
    sums = np.bincount(lab[ok], weights=J1[ok], minlength=n)
    counts = np.bincount(lab[ok], minlength=n)
    means = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    out[ok] = means[lab[ok]]
    return out


@dataclass(eq=False)
class LayerSources:
    J1: np.ndarray
    J2: np.ndarray
    average: np.ndarray
    Pi: np.ndarray
    H: np.ndarray
    V: tuple = field(repr=False)
    formula_deviation: float = 0.0

    def compatibility(self, h, decomp: LayerDecomposition):
        a = h * h
        lab = decomp.labels
        per_cell = np.bincount(lab[lab >= 0], weights=self.Pi[lab >= 0], minlength=len(decomp.boxes))
        return {
            "J1+J2": float(abs((self.J1 + self.J2).sum()) * a),
            "Pi": float(abs(self.Pi.sum()) * a),
            "Pi_per_cell": float(np.abs(per_cell).max() * a) if len(per_cell) else 0.0,
            "H": float(abs(self.H.sum()) * a),
            "J1_outside": float(np.abs(self.J1[lab < 0]).max()) if (lab < 0).any() else 0.0,
        }


def _masked(grid: StaggeredGrid, fx, fy):
    return (np.where(grid.xcount == INTERIOR, fx, 0.0), np.where(grid.ycount == INTERIOR, fy, 0.0))


def grad_psi_dot(grid: StaggeredGrid, psi_faces, psi_c, fx, fy):
    """Discrete ``grad psi . X``: ``D(psi X) - psi D X`` cell by cell."""
    px, py = psi_faces
    h = grid.h
    # psi differences seen from the cell on each side of every face
    left = (px[1:] - psi_c) * fx[1:] - (px[:-1] - psi_c) * fx[:-1]
    low = (py[:, 1:] - psi_c) * fy[:, 1:] - (py[:, :-1] - psi_c) * fy[:, :-1]
    return np.where(grid.fluid, (left + low) / h, 0.0)


def assemble_J(cutoff: CutoffFunction, expansion: Expansion, grid: StaggeredGrid,
               decomp: LayerDecomposition, k) -> LayerSources:
    """Layer sources by the exact discrete product rule for ``div(psi V)``."""
    psi_f = cutoff.face_values()
    psi_c = cutoff.values
    vw, vp, ag = expansion.layer_field(k)
    vw = _masked(grid, *vw)
    vp = _masked(grid, *vp)
    ag = _masked(grid, *ag)
    Vx, Vy = vw[0] + vp[0], vw[1] + vp[1]
    J1 = grad_psi_dot(grid, psi_f, psi_c, vw[0] - ag[0], vw[1] - ag[1])
    divV = grid.divergence_of(Vx, Vy)
    J2 = (grad_psi_dot(grid, psi_f, psi_c, *ag) + grad_psi_dot(grid, psi_f, psi_c, *vp)
          + psi_c * divV)
    t3, t4 = expansion.formula_terms(k, psi_c)
    scale = max(float(np.abs(psi_c * divV).max()), 1e-300)
    dev = float(np.abs(np.where(grid.fluid, psi_c * divV - t3 - t4, 0.0)).max()) / scale
    avg = conditional_average(J1, decomp, grid.fluid)
    Pi = np.where(grid.fluid, J1 - avg, 0.0)
    H = np.where(grid.fluid, J2 + avg, 0.0)
    return LayerSources(J1, J2, avg, Pi, H, (Vx, Vy), dev)


# ------------------------------------------------ boundary-layer solves


class BoundaryLayerSolver:
    """Minimum-norm divergence solves for ``xi^`` on ``Omega_eps`` and ``eta^`` per layer cell."""

    def __init__(self, dom: PerforatedDomain, grid: StaggeredGrid, decomp: LayerDecomposition, tol=1e-9):
        self.dom = dom
        self.grid = grid
        self.decomp = decomp
        self.tol = tol
        self._global = MinNormDivergence(grid)
        self._local = {}
        self._subgrids = []
        for (i0, i1, j0, j1) in decomp.boxes:
            mask = dom.fluid[i0:i1, j0:j1]
            key = (mask.shape, mask.tobytes())
            if key not in self._local:
                sub = StaggeredGrid(mask, length=mask.shape[0] * grid.h)
                self._local[key] = (sub, MinNormDivergence(sub))
            self._subgrids.append(self._local[key])

    def xi_hat(self, H):
        v = self._global(H[self.grid.fluid], tol=self.tol, label="Omega_eps")
        return self.grid.scatter(v)

    def eta_hat(self, Pi):
        ex = np.zeros(self.grid.xshape)
        ey = np.zeros(self.grid.yshape)
        for idx, ((i0, i1, j0, j1), (sub, solve)) in enumerate(zip(self.decomp.boxes, self._subgrids)):
            rhs = Pi[i0:i1, j0:j1][sub.fluid]
            try:
                v = solve(rhs, tol=self.tol, label=f"layer cell {idx} ({self.decomp.kinds[idx]})")
            except CompatibilityError as exc:
                raise CompatibilityError(f"{exc}") from exc
            sx, sy = sub.scatter(v)
            ex[i0:i1 + 1, j0:j1] += sx
            ey[i0:i1, j0:j1 + 1] += sy
        return ex, ey

    def solve(self, H, Pi):
        return self.xi_hat(H), self.eta_hat(Pi)


def boundary_layer_solve(rhs, grid: StaggeredGrid, tol=1e-9, label="domain"):
    """Minimum-norm ``D v = rhs`` with zero boundary values on one mask."""
    v = MinNormDivergence(grid)(np.asarray(rhs)[grid.fluid], tol=tol, label=label)
    return grid.scatter(v)


def check_divergence_identity(grid: StaggeredGrid, psi_faces, V, xi, eta, u=None):
    """Residuals of ``div(psi V) = div xi^ + div eta^`` and of ``div w_eps``."""
    px, py = psi_faces
    dpv = grid.divergence_of(px * V[0], py * V[1])
    dxi = grid.divergence_of(*xi)
    deta = grid.divergence_of(*eta)
    out = {
        "identity": float(np.abs(dpv - dxi - deta).max()),
        "without_eta": float(np.abs(dpv - dxi).max()),
        "scale": float(np.abs(dpv).max()),
    }
    if u is not None:
        wx = u[0] - px * V[0] + xi[0] + eta[0]
        wy = u[1] - py * V[1] + xi[1] + eta[1]
        out["div_w"] = float(np.abs(grid.divergence_of(wx, wy)).max())
    return out


@dataclass
class LayerReport:
    eps: float
    xi_norm: float
    xi_grad: float
    eta_norm: float
    eta_grad: float
    xi_residual: float
    eta_residual: float
    identity: float
    without_eta: float
    compatibility: dict
    formula_deviation: float
    trapezoid_defect: float
    div_w: float = float("nan")

    @property
    def xi_total(self):
        return self.xi_norm + self.eps * self.xi_grad

    @property
    def eta_total(self):
        return self.eta_norm + self.eps * self.eta_grad

    def as_dict(self):
        d = dict(self.__dict__)
        d["xi_total"] = self.xi_total
        d["eta_total"] = self.eta_total
        return d


def _norms(grid, fx, fy):
    wx, wy = grid.face_weights()
    l2 = float((wx * fx**2).sum() + (wy * fy**2).sum())
    g2 = sum(float((w * v**2).sum()) for v, w in grid.edge_gradients(fx, fy).values())
    return l2, g2


def layer_analysis(dom: PerforatedDomain, grid: StaggeredGrid, cutoff: CutoffFunction,
                   decomp: LayerDecomposition, expansion: Expansion, u_final=None, tol=1e-9,
                   nodes=None) -> LayerReport:
    """Boundary-layer correctors at every node, with ``L2(0,T)`` norms."""
    solver = BoundaryLayerSolver(dom, grid, decomp, tol)
    t = expansion.cells.times
    M = len(t) - 1
    nodes = range(1, M + 1) if nodes is None else nodes
    acc = dict(xi=0.0, xig=0.0, eta=0.0, etag=0.0)
    worst = dict(xi=0.0, eta=0.0, identity=0.0, without_eta=0.0, dev=0.0, trap=0.0, div_w=float("nan"))
    comp = {}
    psi_f = cutoff.face_values()
    prev_hat = None
    prev_xi = None
    for k in nodes:
        dt = t[k] - t[k - 1]
        src = assemble_J(cutoff, expansion, grid, decomp, k)
        xi, eta = solver.solve(src.H, src.Pi)
        res_xi = float(np.abs(np.where(grid.fluid, grid.divergence_of(*xi) - src.H, 0)).max())
        res_eta = float(np.abs(np.where(grid.fluid, grid.divergence_of(*eta) - src.Pi, 0)).max())
        chk = check_divergence_identity(
            grid, psi_f, src.V, xi, eta, u_final if (u_final is not None and k == M) else None
        )
        for key, val in src.compatibility(grid.h, decomp).items():
            comp[key] = max(comp.get(key, 0.0), val)
        worst["xi"] = max(worst["xi"], res_xi)
        worst["eta"] = max(worst["eta"], res_eta)
        worst["identity"] = max(worst["identity"], chk["identity"])
        worst["without_eta"] = max(worst["without_eta"], chk["without_eta"])
        worst["dev"] = max(worst["dev"], src.formula_deviation)
        if "div_w" in chk:
            worst["div_w"] = chk["div_w"]
        for name, (fx, fy) in (("xi", xi), ("eta", eta)):
            l2, g2 = _norms(grid, fx, fy)
            acc[name] += dt * l2
            acc[name + "g"] += dt * g2
        # xi is recovered from xi^ by inverting the cumulative trapezoid rule
        if prev_hat is None:
            prev_hat = [np.zeros_like(a) for a in xi]
            prev_xi = [np.zeros_like(a) for a in xi]
        x_new = [2 * (a - b) / dt - c for a, b, c in zip(xi, prev_hat, prev_xi)]
        rebuilt = [b + 0.5 * dt * (c + d) for b, c, d in zip(prev_hat, prev_xi, x_new)]
        worst["trap"] = max(worst["trap"], max(float(np.abs(r - a).max()) for r, a in zip(rebuilt, xi)))
        prev_hat, prev_xi = xi, x_new
    return LayerReport(
        eps=dom.eps, xi_norm=np.sqrt(acc["xi"]), xi_grad=np.sqrt(acc["xig"]),
        eta_norm=np.sqrt(acc["eta"]), eta_grad=np.sqrt(acc["etag"]),
        xi_residual=worst["xi"], eta_residual=worst["eta"], identity=worst["identity"],
        without_eta=worst["without_eta"], compatibility=comp, formula_deviation=worst["dev"],
        trapezoid_defect=worst["trap"], div_w=worst["div_w"],
    )


# ------------------------------------------------------ Bogovskii probe


@dataclass
class BogovskiiProbe:
    eps: float
    poincare: float
    gradient: float
    residual: float
    v: tuple = field(repr=False, default=None)


def bogovskii_estimate_probe(dom: PerforatedDomain, g, tol=1e-9) -> BogovskiiProbe:
    """Minimum-norm ``div v = g`` on ``Omega_eps`` and the two ratios.

    ``poincare = ||v|| / (eps ||grad v||)``, ``gradient = eps ||grad v|| / ||g||``.
    """
    grid = StaggeredGrid(dom.fluid)
    g = np.asarray(g, float)
    if g.shape != dom.fluid.shape:
        raise ConfigurationError("probe data must live on the fine grid")
    solve = MinNormDivergence(grid)
    rhs = g[dom.fluid]
    v = solve(rhs, tol=tol, label="Omega_eps")
    fx, fy = grid.scatter(v)
    l2, g2 = _norms(grid, fx, fy)
    gn = float(np.sqrt((rhs**2).sum()) * grid.h)
    res = solve.residual(v, rhs)
    if gn == 0 or g2 == 0:
        return BogovskiiProbe(dom.eps, float("nan"), float("nan"), res, (fx, fy))
    return BogovskiiProbe(dom.eps, float(np.sqrt(l2 / g2) / dom.eps),
                          float(dom.eps * np.sqrt(g2) / gn), res, (fx, fy))


def probe_data(dom: PerforatedDomain):
    """Smooth zero-mean probe ``g = cos(pi x) cos(pi y)`` restricted to the fluid."""
    x, y = lattice_points(dom.N, "c")
    g = np.cos(np.pi * x) * np.cos(np.pi * y)
    g = np.where(dom.fluid, g, 0.0)
    g[dom.fluid] -= g[dom.fluid].mean()
    return g


__all__ = [
    "Smoother", "smooth", "generic_cutoff", "ForcingFields", "forcing_fields", "CellConvolutions",
    "cell_convolutions", "Expansion", "ErrorReport", "ErrorAccumulator", "error_norms",
    "golden_section_offset", "RateFit", "rate_fit", "conditional_average", "LayerSources",
    "assemble_J", "BoundaryLayerSolver", "boundary_layer_solve", "check_divergence_identity",
    "LayerReport", "layer_analysis", "BogovskiiProbe", "bogovskii_estimate_probe", "probe_data",
]
