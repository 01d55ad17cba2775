import numpy as np
import pytest

from artifact.aux_correctors import (bogovskii_cell, flux_corrector, flux_from_fields,
                                     periodic_poisson)
from artifact.cell_corrector import TimeGrid, permeability, solve_correctors
from artifact.geometry import CellGeometry, ConfigurationError
from artifact.linalg import CompatibilityError
from artifact.mac import MinNormDivergence, StaggeredGrid


@pytest.fixture(scope="module")
def default_cell():
    trs = solve_correctors(CellGeometry(n_cell=16), TimeGrid(2.0, 16, 2.0))
    return trs, permeability(trs)


def _centres(n):
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="ij")


def test_periodic_poisson_mode():
    n = 32
    h = 1 / n
    x, y = _centres(n)
    rhs = np.cos(2 * np.pi * x) * np.sin(4 * np.pi * y)
    f = periodic_poisson(rhs, h)
    lap = (np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1) - 4 * f) / h**2
    assert np.abs(lap - rhs).max() < 1e-10
    assert abs(f.mean()) < 1e-14


@pytest.mark.parametrize("n", [32, 64])
def test_flux_potential_fourier_oracle(n):
    h = 1 / n
    # b_11 on x-faces (x = i h, y = (j + 1/2) h), b_21 = 0
    y = (np.arange(n) + 0.5) * h
    bx = np.tile(np.sin(2 * np.pi * y), (n, 1))
    by = np.zeros((n, n))
    phi21 = flux_from_fields(bx, by, h)
    yc = np.arange(n) * h  # corners
    oracle = -np.cos(2 * np.pi * yc) / (2 * np.pi)
    err = np.abs(phi21 - oracle[None, :]).max()
    assert err < 2.0 * (np.pi * h) ** 2 / (2 * np.pi)


def test_flux_corrector_structure(default_cell):
    trs, K = default_cell
    flux = flux_corrector(trs, K)
    assert flux.antisymmetry_defect() == 0.0
    res = flux.divergence_residual()
    # t = 0 starts from e_j, which is not divergence free on the walls
    assert res[1:].max() < 1e-10
    assert flux.flux_divergence()[1:].max() < 1e-7
    assert flux.flux_mean()[1:].max() < 1e-12


def test_trivial_cell_correctors_vanish():
    trs = solve_correctors(CellGeometry(obstacle_extent=0.0, n_cell=8), TimeGrid(1.0, 4, 1.0))
    K = permeability(trs)
    assert np.abs(flux_corrector(trs, K).phi21).max() < 1e-12
    bog = bogovskii_cell(trs, K)
    assert np.abs(bog.phi).max() < 1e-12


def test_bogovskii_cell_invariants(default_cell):
    trs, K = default_cell
    bog = bogovskii_cell(trs, K)
    assert bog.residual.max() <= 1e-6
    assert bog.compatibility.max() < 1e-12
    g = bog.grid
    ux, uy = bog.faces(5, 0, 1)
    # zero on obstacle walls and inactive faces
    from artifact.mac import INTERIOR
    assert np.all(ux[g.xcount != INTERIOR] == 0) and np.all(uy[g.ycount != INTERIOR] == 0)
    assert np.isfinite(bog.total_variation()) and bog.total_variation() > 0
    assert bog.norms().shape == (len(K.times),)


def test_mismatched_inputs(default_cell):
    trs, K = default_cell
    with pytest.raises(ConfigurationError):
        bogovskii_cell(trs[:1], K)


@pytest.mark.parametrize("n", [32, 64])
def test_min_norm_divergence_torus_oracle(n):
    g = StaggeredGrid(np.ones((n, n), bool), periodic=True)
    x, _ = _centres(n)
    v = MinNormDivergence(g)(np.sin(2 * np.pi * x)[g.fluid])
    fx, fy = g.scatter(v)
    xf = np.arange(n) / n
    err = np.abs(fx - (-np.cos(2 * np.pi * xf) / (2 * np.pi))[:, None]).max()
    assert err < 0.3 / n**2
    assert np.abs(fy).max() < 1e-12


def test_min_norm_divergence_rejects_incompatible_data():
    g = StaggeredGrid(np.ones((8, 8), bool), periodic=True)
    with pytest.raises(CompatibilityError, match="nonzero mean"):
        MinNormDivergence(g)(np.ones(64), label="torus")
