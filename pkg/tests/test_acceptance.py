"""The ten acceptance criteria at their stated tolerances, one PASS/FAIL line each."""
import pytest

from artifact import acceptance, pipeline


@pytest.fixture(scope="module")
def fits(sweep):
    return pipeline.fit_rates(sweep[0])


def test_ac1_kernel_structure(default_config, report_check):
    assert report_check(acceptance.kernel_structure(default_config)).passed


def test_ac2_trivial_cell(default_config, report_check):
    assert report_check(acceptance.trivial_cell(default_config)).passed


def test_ac3_corrector_energy(default_config, report_check):
    assert report_check(acceptance.corrector_energy(default_config)).passed


def test_ac4_fixed_point_solver(default_config, report_check):
    assert report_check(acceptance.fixed_point_solver(default_config)).passed


def test_ac5_divergence_machinery(default_config, sweep, report_check):
    assert report_check(acceptance.divergence_machinery(default_config, sweep[0])).passed


def test_ac6_bogovskii_uniformity(default_config, sweep, report_check):
    assert report_check(acceptance.bogovskii_uniformity(default_config, sweep[0])).passed


def test_ac7_convergence_rate(default_config, sweep, fits, report_check):
    assert report_check(acceptance.convergence_rate(default_config, fits, sweep[1])).passed


def test_ac8_pressure_rate(default_config, fits, report_check):
    assert report_check(acceptance.pressure_rate(default_config, fits)).passed


def test_ac9_boundary_layer_scaling(default_config, sweep, report_check):
    assert report_check(acceptance.layer_scaling(default_config, sweep[0])).passed


def test_ac10_semigroup_relation(default_config, report_check):
    assert report_check(acceptance.semigroup_relation(default_config)).passed
