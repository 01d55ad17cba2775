"""Properties of the default three-epsilon sweep beyond the acceptance criteria."""
import json

import numpy as np
import pytest

from artifact import pipeline


def _spread(values):
    v = np.asarray(values, float)
    return v.max() / v.min()


def test_energy_constant_is_uniform_in_eps(sweep):
    consts = [r["fine"]["energy_constant"] for r in sweep[0]]
    assert all(c > 0 for c in consts)
    assert _spread(consts) <= 2.0


def test_poincare_scaling_is_stable(sweep):
    ratios = [r["fine"]["poincare"] for r in sweep[0]]
    assert all(0 < q < 1 for q in ratios)
    assert _spread(ratios) <= 2.0


def test_fine_and_homogenized_invariants(sweep):
    for r in sweep[0]:
        assert r["fine"]["max_divergence"] <= 1e-6
        assert r["darcy"]["max_ratio"] <= 0.6
        assert r["darcy"]["divergence"] <= 1e-6 and r["darcy"]["normal_flux"] <= 1e-12
        assert r["forcing_support_gap"] >= r["eps"] / 8 - 1 / r["N"]
        assert r["N"] == round(32 / r["eps"])


def test_errors_are_relatively_small_and_ordered(sweep):
    for r in sweep[0]:
        e, ref = r["errors"], r["reference"]
        assert e["velocity"] < ref["u"] and e["gradient"] < ref["eps_grad_u"]
        assert e["time_derivative"] < ref["dt_u"]
        # the smoothed, cut-off field G is the better corrector input
        assert e["velocity_G"] < e["velocity"] and e["gradient_G"] < e["gradient"]


def test_golden_section_reproduces_the_mean_offset(sweep):
    for r in sweep[0]:
        e = r["errors"]
        assert e["pressure_scan"] == pytest.approx(e["pressure"], rel=1e-6, abs=1e-12)
        assert e["pressure_scan_offset"] == pytest.approx(e["pressure_offset"], abs=1e-4)


def test_layer_invariants(sweep):
    layered = [r for r in sweep[0] if "layer" in r]
    assert [r["eps"] for r in layered] == [0.125, 0.0625]
    for r in layered:
        lay = r["layer"]
        assert lay["xi_residual"] <= 1e-6 and lay["eta_residual"] <= 1e-6
        assert lay["identity"] <= 1e-8
        assert lay["without_eta"] > 1e6 * lay["identity"]
        assert lay["trapezoid_defect"] <= 1e-12
        assert lay["compatibility"]["J1_outside"] == 0.0
        assert lay["div_w"] <= 1e-6


def test_report_is_deterministic(default_config, sweep):
    results = sweep[0]
    fits = pipeline.fit_rates(results)
    a = json.dumps(pipeline.build_report(default_config, results, fits), sort_keys=True)
    b = json.dumps(pipeline.build_report(default_config, json.loads(json.dumps(results)),
                                         pipeline.fit_rates(results)), sort_keys=True)
    assert a == b
    masks = [r["mask_sha256"] for r in results]
    assert len(set(masks)) == len(masks)
