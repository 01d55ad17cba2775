import numpy as np
import pytest

from artifact.cell_corrector import TimeGrid
from artifact.darcy_memory import BodyForce, MacroGrid, ramp_force
from artifact.fine_scale import extend_pressure, solve_fine
from artifact.geometry import CellGeometry, ConfigurationError, build_perforated

pi = np.pi


def S(x):
    return np.sin(pi * x) ** 2


def S1(x):
    return pi * np.sin(2 * pi * x)


def S2(x):
    return 2 * pi**2 * np.cos(2 * pi * x)


def S3(x):
    return -4 * pi**3 * np.sin(2 * pi * x)


def velocity(x, y):
    """curl of psi = S(x) S(y); vanishes on the boundary of the square."""
    return S(x) * S1(y), -S1(x) * S(y)


def laplacian(x, y):
    return S2(x) * S1(y) + S(x) * S3(y), -(S3(x) * S(y) + S1(x) * S2(y))


def manufactured(N, M, eps=0.5, T=0.5):
    """u = sin(t) curl psi, p = 0, so f = cos(t) curl psi - eps^2 sin(t) Lap curl psi."""
    dom = build_perforated(CellGeometry(obstacle_extent=0.0, n_cell=8), eps, N=N)
    nu = eps**2
    f = BodyForce([np.cos, np.sin], [velocity, lambda x, y: tuple(-nu * v for v in laplacian(x, y))])
    return solve_fine(dom, f, TimeGrid(T, M, 1.0)), T


def _exact_error(sol, T):
    g = sol.grid
    ux, uy = g.scatter(sol.u)
    (xx, xy), (yx, yy) = MacroGrid(g.n).face_centres()
    ex = np.sin(T) * velocity(xx, xy)[0]
    ey = np.sin(T) * velocity(yx, yy)[1]
    wx, wy = g.face_weights()
    return np.sqrt((wx * (ux - ex) ** 2).sum() + (wy * (uy - ey) ** 2).sum())


def test_manufactured_solution_second_order_in_space():
    errs = [_exact_error(*manufactured(N, 256)) for N in (8, 16)]
    assert errs[0] / errs[1] > 3.5


def test_manufactured_solution_first_order_in_time():
    ref = manufactured(16, 1024)[0].u
    errs = [np.abs(manufactured(16, M)[0].u - ref).max() for M in (4, 8, 16)]
    assert 1.7 < errs[0] / errs[1] < 2.3 and 1.7 < errs[1] / errs[2] < 2.3


def test_zero_force_gives_zero_solution():
    dom = build_perforated(CellGeometry(n_cell=16), 0.25, kappa0=0.25)
    sol = solve_fine(dom, ramp_force(0.0), TimeGrid(1.0, 4, 1.0))
    assert np.abs(sol.u).max() == 0 and np.abs(sol.p).max() == 0


@pytest.fixture(scope="module")
def perforated_run():
    dom = build_perforated(CellGeometry(n_cell=16), 0.25, kappa0=0.25)
    seen = []
    sol = solve_fine(dom, ramp_force(), TimeGrid(1.0, 8, 1.0), keep_fields=True,
                     callback=lambda k, t, u, p: seen.append(k))
    return dom, sol, seen


def test_fine_invariants(perforated_run):
    dom, sol, seen = perforated_run
    assert seen == list(range(9))
    assert np.abs(sol.fields[0][0]).max() == 0
    assert sol.divergence.max() <= 1e-8
    ux, uy = sol.extended_velocity()
    # zero extension: same L2 norm on the full square
    wx, wy = sol.grid.face_weights()
    full = (ux**2).sum() + (uy**2).sum()
    assert full * dom.h**2 == pytest.approx(2 * sol.kinetic[-1], rel=1e-12)
    p = sol.pressure_cells()
    assert abs(p[dom.fluid].mean()) < 1e-10
    assert 0 < sol.energy_constant() < 1 and 0 < sol.poincare_ratio() < 1
    assert len(sol.energy_rows()) == 9


def test_fine_requires_uniform_grid():
    dom = build_perforated(CellGeometry(n_cell=16), 0.25, kappa0=0.25)
    with pytest.raises(ConfigurationError):
        solve_fine(dom, ramp_force(), TimeGrid(1.0, 4, 2.0))


def test_extend_pressure_constant():
    dom = build_perforated(CellGeometry(n_cell=16), 0.25, kappa0=0.25)
    p = np.where(dom.fluid, 3.5, -99.0)
    assert np.all(extend_pressure(p, dom) == 3.5)


def test_extend_pressure_single_hole_oracle():
    dom = build_perforated(CellGeometry(n_cell=16), 1 / 3, kappa0=1.0)
    assert dom.kept == ((1, 1),)
    x = (np.arange(dom.N) + 0.5) / dom.N
    p = np.repeat(x[:, None], dom.N, axis=1)
    pt = extend_pressure(p, dom)
    m = dom.m
    block = dom.fluid[m:2 * m, m:2 * m]
    oracle = p[m:2 * m, m:2 * m][block].mean()
    assert np.allclose(pt[~dom.fluid], oracle)
    assert np.array_equal(pt[dom.fluid], p[dom.fluid])
    # mean bookkeeping: fluid integral plus hole area times the cell average
    holes = (~dom.fluid).sum()
    assert pt.sum() == pytest.approx(p[dom.fluid].sum() + holes * oracle, rel=1e-14)
