import numpy as np
import pytest

from artifact.cell_corrector import (PermeabilityKernel, TimeGrid, decay_diagnostics,
                                     energy_residuals, permeability, solve_corrector,
                                     solve_correctors, verify_semigroup_relation)
from artifact.geometry import CellGeometry, ConfigurationError

GRID = TimeGrid(2.0, 32, 2.0)


@pytest.fixture(scope="module")
def small():
    cell = CellGeometry(n_cell=16)
    trs = solve_correctors(cell, GRID)
    return cell, trs, permeability(trs)


def test_time_grid_grading():
    t = TimeGrid(2.0, 4, 2.0).nodes
    assert np.allclose(t, [0, 0.125, 0.5, 1.125, 2.0])
    with pytest.raises(ConfigurationError):
        TimeGrid(1.0, 4, 0.5)


def test_no_obstacle_corrector_is_constant():
    cell = CellGeometry(obstacle_extent=0.0, n_cell=8)
    trs = solve_correctors(cell, TimeGrid(1.0, 8, 2.0))
    assert np.abs(trs[0].ux - 1).max() < 1e-12 and np.abs(trs[0].uy).max() < 1e-12
    assert np.abs(trs[1].uy - 1).max() < 1e-12
    assert np.abs(trs[0].pi).max() < 1e-12
    assert np.abs(permeability(trs).A - np.eye(2)).max() < 1e-12


def test_trajectory_invariants(small):
    cell, trs, _ = small
    for tr in trs:
        assert tr.divergence.max() <= 1e-8
        assert np.all(np.diff(tr.energy) < 0)
        assert tr.energy[-1] < tr.energy[0] == pytest.approx(0.5 * cell.fluid_fraction)
        assert np.abs(tr.pi[1:][:, cell.fluid].mean(axis=1)).max() < 1e-10
    # 90 degree rotation maps direction 1 to direction 2
    assert np.allclose(trs[0].energy, trs[1].energy, rtol=1e-9, atol=1e-14)


def test_kernel_structure_and_frozen_value(small):
    cell, _, K = small
    assert np.array_equal(K.A[0], cell.fluid_fraction * np.eye(2))
    assert K.symmetry_defect() <= 1e-10
    assert K.min_eigenvalue() > 0
    assert np.all(np.diff(K.trace()) <= 0)
    assert np.allclose(K.A[:, 0, 0], K.A[:, 1, 1], rtol=1e-8, atol=1e-14)
    k = np.searchsorted(GRID.nodes, 1.0)
    # frozen: n_cell = 16, T = 2, M = 32, gamma = 2
    assert K.A[k, 0, 0] == pytest.approx(3.3942789806490826e-05, rel=1e-6)
    assert K.l1_derivative == pytest.approx(K.A[0, 0, 0] - K.A[-1, 0, 0], rel=1e-6)


def test_mismatched_time_grids(small):
    cell, trs, _ = small
    other = solve_corrector(cell, 1, TimeGrid(2.0, 16, 2.0))
    with pytest.raises(ConfigurationError):
        permeability([trs[0], other])


def test_decay_diagnostics(small):
    _, trs, K = small
    d = decay_diagnostics(trs[0], K)
    assert 0 < d["sigma"] < 0.5
    assert d["sigma"] == pytest.approx(0.15826823541730672, rel=1e-5)
    assert d["trace_rate"] < 0 and d["trace_r2"] >= 0.99
    w = d["weighted_dtW"]
    assert w[0.5] > w[0.8] > w[1.0] > 0
    with pytest.raises(ConfigurationError):
        decay_diagnostics(trs[0], K, min_nodes=100)


def test_flat_diagnostics_without_obstacle():
    cell = CellGeometry(obstacle_extent=0.0, n_cell=8)
    trs = solve_correctors(cell, GRID)
    d = decay_diagnostics(trs[0], permeability(trs))
    assert d["sigma"] == "flat"
    assert all(v == 0 for v in d["weighted_dtW"].values())


def test_energy_identity_residual(small):
    _, trs, _ = small
    res = energy_residuals(trs[0])
    # implicit Euler dissipates exactly -1/2 ||W^k - W^{k-1}||^2 per step
    g = trs[0].grid
    wx, wy = g.face_weights()
    jumps = np.array([0.5 * ((wx * (trs[0].ux[k + 1] - trs[0].ux[k]) ** 2).sum()
                             + (wy * (trs[0].uy[k + 1] - trs[0].uy[k]) ** 2).sum())
                      for k in range(1, GRID.M)])
    assert np.allclose(res, -jumps, rtol=1e-6, atol=1e-14)


def test_grid_convergence_of_kernel():
    vals = []
    for n in (16, 32, 64):
        cell = CellGeometry(n_cell=n)
        g = TimeGrid(1.0, 16, 1.0)
        vals.append(permeability(solve_correctors(cell, g)).A[8, 0, 0])
    d1, d2 = abs(vals[0] - vals[1]), abs(vals[1] - vals[2])
    assert d1 <= 4 * d2 and d2 < d1


def test_semigroup_relation_trivial_and_default():
    flat = verify_semigroup_relation(CellGeometry(obstacle_extent=0.0, n_cell=8), TimeGrid(1.0, 8, 1.0))
    assert flat.discrepancy.max() < 1e-10
    T = 2.0
    errs = []
    for M in (16, 32):
        rep = verify_semigroup_relation(CellGeometry(n_cell=16), TimeGrid(T, M, 1.0))
        late = rep.times >= T / 4
        errs.append(rep.relative[late].max())
        assert errs[-1] < 5 * T / M
    assert errs[1] < errs[0] / 2


def test_kernel_type_roundtrip():
    t = np.linspace(0, 1, 5)
    K = PermeabilityKernel(t, np.exp(-t)[:, None, None] * np.eye(2), 1.0)
    assert K.is_isotropic()
    assert len(K.csv_rows()) == 5 and K.csv_rows()[0] == (0.0, 1.0, 0.0, 0.0, 1.0)
