"""Unit cell, perforated unit square, radial cut-off and layer cells."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, ndimage


class ConfigurationError(ValueError):
    pass


class DegeneratePerforation(ConfigurationError):
    """No lattice cell is admissible for the requested scale."""


class UnsupportedDomain(ConfigurationError):
    pass


def _is_integer(x, tol=1e-9):
    return abs(x - round(x)) <= tol * max(1.0, abs(x))


# ---------------------------------------------------------------- cell


@dataclass(frozen=True)
class CellGeometry:
    """Periodic unit cell ``Y = [0,1]^2`` with one centred obstacle.

    ``obstacle_extent`` is the side length of the square or the radius of
    the staircase disk.
    """

    obstacle_shape: str = "square"
    obstacle_extent: float = 0.25
    n_cell: int = 32

    def __post_init__(self):
        if self.obstacle_shape not in ("square", "disk"):
            raise ConfigurationError(f"unknown obstacle_shape {self.obstacle_shape!r}")
        if not 0.0 <= self.obstacle_extent < 0.5:
            raise ConfigurationError("obstacle_extent must lie in [0, 1/2)")
        if self.n_cell < 4:
            raise ConfigurationError("n_cell must be at least 4")
        solid = self.solid_mask(self.n_cell)
        if solid.any():
            rows = np.nonzero(solid.any(axis=1))[0]
            cols = np.nonzero(solid.any(axis=0))[0]
            span = min(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1)
            if span < 4:
                raise ConfigurationError(
                    "obstacle is under-resolved: fewer than 4 grid cells across it"
                )
            if rows[0] < 1 or cols[0] < 1 or rows[-1] > self.n_cell - 2 or cols[-1] > self.n_cell - 2:
                raise ConfigurationError("obstacle must keep one grid cell of clearance")
        labels, count = ndimage.label(~solid)
        if count != 1:
            raise ConfigurationError("fluid part of the cell is not connected")

    def solid_mask(self, n=None):
        """Boolean mask of solid cells on an ``n x n`` cell grid."""
        n = self.n_cell if n is None else n
        c = (np.arange(n) + 0.5) / n - 0.5
        x, y = np.meshgrid(c, c, indexing="ij")
        s = self.obstacle_extent
        if s == 0.0:
            return np.zeros((n, n), bool)
        if self.obstacle_shape == "square":
            half = s / 2 + 1e-12
            return (np.abs(x) < half) & (np.abs(y) < half)
        return x**2 + y**2 < s**2

    @cached_property
    def fluid(self):
        return ~self.solid_mask()

    @property
    def fluid_fraction(self):
        return float(self.fluid.sum()) / self.n_cell**2

    def digest(self):
        return f"{self.obstacle_shape}:{self.obstacle_extent!r}:{self.n_cell}"


# ---------------------------------------------------------- macro box


def boundary_distance(x, y):
    """Distance to the boundary of the unit square."""
    return np.minimum(np.minimum(x, 1.0 - x), np.minimum(y, 1.0 - y))


def inward_normal(x, y):
    """Unit inward normal of the nearest side, ties broken in a fixed order."""
    d = np.stack([x, 1.0 - x, y, 1.0 - y])
    k = np.argmin(d, axis=0)
    nx = np.select([k == 0, k == 1], [1.0, -1.0], 0.0)
    ny = np.select([k == 2, k == 3], [1.0, -1.0], 0.0)
    return nx, ny


@dataclass(frozen=True)
class Domain:
    """The unit square ``[0,1]^2``."""

    length: float = 1.0

    def distance(self, x, y):
        return boundary_distance(x, y)

    def co_layer(self, eps, x, y):
        """Indicator of ``Sigma_eps = {dist(x, boundary) >= eps}``."""
        return self.distance(x, y) >= eps


UNIT_SQUARE = Domain()


# --------------------------------------------------------- perforation


@dataclass(frozen=True, eq=False)
class PerforatedDomain:
    eps: float
    cell: CellGeometry
    kappa0: float
    N: int
    kept: tuple
    fluid: np.ndarray = field(repr=False)

    @property
    def m(self):
        """Grid cells per period."""
        return self.N // round(1 / self.eps)

    @property
    def h(self):
        return 1.0 / self.N

    @property
    def n_obstacles(self):
        return len(self.kept) if self.cell.obstacle_extent > 0 else 0

    def cell_of(self):
        """Lattice index of every grid cell, as two ``N x N`` arrays."""
        i = np.arange(self.N) // self.m
        return np.meshgrid(i, i, indexing="ij")

    def obstacle_margin(self):
        """Smallest distance between the boundary and a solid grid cell."""
        solid = ~self.fluid
        if not solid.any():
            return np.inf
        i, j = np.nonzero(solid)
        h = self.h
        return float(min(i.min() * h, 1 - (i.max() + 1) * h, j.min() * h, 1 - (j.max() + 1) * h))

    def is_connected(self):
        return ndimage.label(self.fluid)[1] == 1


def build_perforated(cell: CellGeometry, eps: float, kappa0: float = 2.0, N=None,
                     allow_degenerate=False, domain: Domain = UNIT_SQUARE):
    """Stamp scaled obstacles into the lattice cells admitted by the margin rule.

    A cell ``eps (Y + z)`` keeps its obstacle when it lies in the box and the
    obstacle is at least ``kappa0 * eps`` away from the boundary.
    """
    if domain.length != 1.0:
        raise UnsupportedDomain("only the unit square is supported")
    if not eps > 0 or not _is_integer(1.0 / eps):
        raise ConfigurationError(f"epsilon={eps!r}: 1/epsilon must be a positive integer")
    K = round(1.0 / eps)
    N = cell.n_cell * K if N is None else int(N)
    if N % K:
        raise ConfigurationError(f"N={N} is not a multiple of 1/epsilon={K}")
    m = N // K
    pattern = cell.solid_mask(m)
    if pattern.any():
        rows = np.nonzero(pattern.any(axis=1))[0]
        cols = np.nonzero(pattern.any(axis=0))[0]
        if min(rows[-1] - rows[0], cols[-1] - cols[0]) + 1 < 4:
            raise ConfigurationError(
                f"N={N} resolves the obstacle with fewer than 4 grid cells"
            )
        lo = min(rows[0], cols[0]) / m
        hi = (max(rows[-1], cols[-1]) + 1) / m
    kept = []
    fluid = np.ones((N, N), bool)
    if pattern.any():
        for a in range(K):
            for b in range(K):
                margin = min(
                    (a + lo) * eps, 1 - (a + hi) * eps, (b + lo) * eps, 1 - (b + hi) * eps
                )
                if margin >= kappa0 * eps - 1e-12:
                    kept.append((a, b))
                    fluid[a * m:(a + 1) * m, b * m:(b + 1) * m] &= ~pattern
        if not kept and not allow_degenerate:
            raise DegeneratePerforation(
                f"degenerate perforation: no cell admits an obstacle at epsilon={eps:g} "
                f"with kappa0={kappa0:g}"
            )
    dom = PerforatedDomain(eps=eps, cell=cell, kappa0=kappa0, N=N, kept=tuple(kept), fluid=fluid)
    if not dom.is_connected():
        raise ConfigurationError("perforated domain is not connected")
    return dom


# -------------------------------------------------------------- cut-off


def _bump(r):
    out = np.zeros_like(r, dtype=float)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


_BUMP_MASS = integrate.quad(lambda r: np.exp(-1.0 / (1.0 - r * r)), -1.0, 1.0)[0]


def mollifier(r, width):
    """Standard one-dimensional bump, normalised, supported in ``|r| < width``."""
    return _bump(np.asarray(r, float) / width) / (_BUMP_MASS * width)


def _simpson(values, dx, axis=-1):
    # composite Simpson on an even number of intervals
    v = np.moveaxis(values, axis, -1)
    return dx / 3.0 * (v[..., 0] + v[..., -1] + 4 * v[..., 1:-1:2].sum(-1) + 2 * v[..., 2:-1:2].sum(-1))


@dataclass(frozen=True)
class CutoffProfile:
    """``g_eps = eta_{eps/3} * ramp``, the ramp rising from 4eps/3 to 5eps/3."""

    eps: float
    points: int = 64

    def _ramp(self, d):
        a, b = 4 * self.eps / 3, 5 * self.eps / 3
        return np.clip((d - a) / (b - a), 0.0, 1.0)

    def value(self, d):
        d = np.asarray(d, float)
        w = self.eps / 3
        tau = np.linspace(-w, w, self.points + 1)
        integrand = mollifier(tau, w) * self._ramp(d[..., None] - tau)
        out = _simpson(integrand, tau[1] - tau[0])
        out = np.where(d <= self.eps, 0.0, out)
        return np.where(d >= 2 * self.eps, 1.0, out)

    def derivative(self, d):
        d = np.asarray(d, float)
        a, b = 4 * self.eps / 3, 5 * self.eps / 3
        s = np.linspace(a, b, self.points + 1)
        integrand = mollifier(d[..., None] - s, self.eps / 3) / (b - a)
        out = _simpson(integrand, s[1] - s[0])
        return np.where((d <= self.eps) | (d >= 2 * self.eps), 0.0, out)

    def second_derivative(self, d):
        d = np.asarray(d, float)
        a, b = 4 * self.eps / 3, 5 * self.eps / 3
        w = self.eps / 3
        # derivative of the mollifier convolved with the ramp slope
        return (mollifier(d - a, w) - mollifier(d - b, w)) / (b - a)


MAX_CUTOFF_EPS = np.sqrt(2.0) / 8


class CutoffFunction:
    """Radial cut-off ``psi_eps(x) = g_eps(dist(x, boundary))``."""

    def __init__(self, eps, N, points=64):
        if eps > MAX_CUTOFF_EPS:
            raise ConfigurationError(
                f"epsilon={eps:g} exceeds the admissible bound {MAX_CUTOFF_EPS:.4f} "
                "(1/8 of the box diameter)"
            )
        self.eps = eps
        self.N = N
        self.h = 1.0 / N
        self.profile = CutoffProfile(eps, points)

    def value(self, x, y):
        return self.profile.value(boundary_distance(x, y))

    def gradient(self, x, y):
        g = self.profile.derivative(boundary_distance(x, y))
        nx, ny = inward_normal(x, y)
        return g * nx, g * ny

    def hessian_bound(self, samples=2001):
        d = np.linspace(0, 3 * self.eps, samples)
        return float(np.abs(self.profile.second_derivative(d)).max())

    def cell_centres(self):
        c = (np.arange(self.N) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")

    @cached_property
    def values(self):
        return self.value(*self.cell_centres())

    @cached_property
    def gradients(self):
        return self.gradient(*self.cell_centres())

    def support(self):
        return self.values > 0

    def gradient_support(self):
        gx, gy = self.gradients
        return (gx != 0) | (gy != 0)

    def face_values(self):
        """psi sampled on x-faces ``(N+1, N)`` and y-faces ``(N, N+1)``."""
        h = self.h
        nodes = np.arange(self.N + 1) * h
        mids = (np.arange(self.N) + 0.5) * h
        xf = self.value(*np.meshgrid(nodes, mids, indexing="ij"))
        yf = self.value(*np.meshgrid(mids, nodes, indexing="ij"))
        return xf, yf


def radial_cutoff(eps, N=None, domain: Domain = UNIT_SQUARE, points=64):
    if domain.length != 1.0:
        raise UnsupportedDomain("only the unit square is supported")
    if N is None:
        N = max(64, round(32 / eps))
    return CutoffFunction(eps, N, points)


# ---------------------------------------------------- layer decomposition


@dataclass(frozen=True, eq=False)
class LayerDecomposition:
    """Side cylinders and corner cells covering ``{eps < dist < 2 eps}``.

    ``boxes[k] = (i0, i1, j0, j1)`` in grid-cell indices (half open), ``kinds``
    tags each box with ``bottom``/``top``/``left``/``right``/``corner``.
    """

    eps: float
    N: int
    boxes: tuple
    kinds: tuple
    labels: np.ndarray = field(repr=False)

    @property
    def n_cylinders(self):
        return sum(k != "corner" for k in self.kinds)

    @property
    def corners(self):
        return [b for b, k in zip(self.boxes, self.kinds) if k == "corner"]

    def area(self, k):
        i0, i1, j0, j1 = self.boxes[k]
        return (i1 - i0) * (j1 - j0) / self.N**2

    def covered(self):
        return self.labels >= 0


def decompose_layer(cutoff: CutoffFunction, domain: Domain = UNIT_SQUARE):
    if domain.length != 1.0:
        raise UnsupportedDomain("layer decomposition is implemented for the unit square only")
    eps, N = cutoff.eps, cutoff.N
    if not _is_integer(1 / eps) or not _is_integer(N * eps):
        raise ConfigurationError("layer decomposition needs N * eps and 1/eps to be integers")
    K = round(1 / eps)
    m = round(N * eps)
    boxes, kinds = [], []
    for k in range(2, K - 2):
        boxes.append((k * m, (k + 1) * m, m, 2 * m))
        kinds.append("bottom")
        boxes.append((k * m, (k + 1) * m, N - 2 * m, N - m))
        kinds.append("top")
        boxes.append((m, 2 * m, k * m, (k + 1) * m))
        kinds.append("left")
        boxes.append((N - 2 * m, N - m, k * m, (k + 1) * m))
        kinds.append("right")
    for i0 in (m, N - 2 * m):
        for j0 in (m, N - 2 * m):
            boxes.append((i0, i0 + m, j0, j0 + m))
            kinds.append("corner")
    labels = np.full((N, N), -1, dtype=np.int64)
    for idx, (i0, i1, j0, j1) in enumerate(boxes):
        if (labels[i0:i1, j0:j1] >= 0).any():
            raise RuntimeError("layer cells overlap")
        labels[i0:i1, j0:j1] = idx
    return LayerDecomposition(eps=eps, N=N, boxes=tuple(boxes), kinds=tuple(kinds), labels=labels)
