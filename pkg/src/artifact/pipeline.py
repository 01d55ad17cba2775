"""Stage orchestration: cell, kernel, homogenized, fine and error stages.

Each per-epsilon result is cached as JSON under ``<out>/cache`` keyed by a
hash of every config block it depends on, so unchanged configs reuse it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import io
from .aux_correctors import bogovskii_cell, flux_corrector
from .cell_corrector import (decay_diagnostics, energy_residuals, permeability,
                             solve_correctors)
from .config import RunConfig
from .darcy_memory import (BodyForce, check_homogenized, gradient_force, ramp_force,
                           solve_pressure, velocity_from_pressure)
from .expansion_error import (Expansion, bogovskii_estimate_probe, cell_convolutions,
                              error_norms, forcing_fields, golden_section_offset, layer_analysis,
                              probe_data, rate_fit)
from .fine_scale import fine_grid, solve_fine
from .geometry import build_perforated, decompose_layer, radial_cutoff

log = logging.getLogger(__name__)

NORMS = ("velocity", "gradient", "time_derivative", "pressure", "velocity_G", "gradient_G")


def make_force(cfg: RunConfig) -> BodyForce:
    f = cfg.raw["forcing"]
    amp = float(f["amplitude"])
    if f["name"] == "ramp":
        return ramp_force(amp)
    if f["name"] == "gradient":
        return gradient_force(lambda x, y: amp * np.cos(np.pi * x) * np.cos(2 * np.pi * y),
                              lambda t: t)
    return ramp_force(0.0)


@lru_cache(maxsize=4)
def _cell_stage(cfg_blob, which):
    cfg = RunConfig.from_dict(json.loads(cfg_blob))
    grid = cfg.kernel_grid if which == "kernel" else cfg.time_grid
    tol = cfg.tol["linear"]
    trs = solve_correctors(cfg.cell, grid, rtol=tol)
    kernel = permeability(trs)
    return trs, kernel


def cell_stage(cfg: RunConfig, which="macro"):
    """Corrector trajectories and kernel on the kernel grid or the shared macro grid."""
    return _cell_stage(json.dumps(cfg.raw, sort_keys=True), which)


def kernel_summary(cfg: RunConfig):
    trs, kernel = cell_stage(cfg, "kernel")
    diag = decay_diagnostics(trs[0], kernel)
    eig = np.linalg.eigvalsh(0.5 * (kernel.A + np.swapaxes(kernel.A, 1, 2)))
    return {
        "fluid_fraction": kernel.fluid_fraction,
        "A0_defect": float(np.abs(kernel.A[0] - kernel.fluid_fraction * np.eye(2)).max()),
        "symmetry_defect": kernel.symmetry_defect(),
        "min_eigenvalue": float(eig.min()),
        "l1_derivative": kernel.l1_derivative,
        "trace_rate": diag.get("trace_rate"),
        "trace_r2": diag.get("trace_r2"),
        "sigma": diag["sigma"],
        "energy_residual_sum": float(sum(np.abs(energy_residuals(tr)).sum() for tr in trs)),
        "max_divergence": float(max(tr.divergence.max() for tr in trs)),
    }


def aux_summary(cfg: RunConfig):
    trs, kernel = cell_stage(cfg, "macro")
    flux = flux_corrector(trs, kernel)
    bog = bogovskii_cell(trs, kernel, tol=cfg.tol["linear"])
    return {
        "flux_antisymmetry": flux.antisymmetry_defect(),
        "flux_residual_late": float(np.max(flux.divergence_residual()[1:])),
        "bogovskii_residual": float(np.max(bog.residual)),
        "bogovskii_compatibility": float(np.max(np.abs(bog.compatibility))),
        "bogovskii_variation": float(bog.total_variation()),
    }


def _digest(cfg: RunConfig, eps, layers):
    blob = json.dumps({"cfg": {k: cfg.raw[k] for k in
                               ("geometry", "time", "forcing", "tolerances")},
                       "eps": eps, "layers": layers, "stage": 1}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def homogenize(cfg: RunConfig, eps, trs=None, kernel=None):
    if kernel is None:
        trs, kernel = cell_stage(cfg, "macro")
    dom = build_perforated(cfg.cell, eps, kappa0=cfg.kappa0)
    force = make_force(cfg)
    sol = solve_pressure(kernel, force, dom.N, cfg.time_grid, tol=cfg.tol["linear"])
    velocity_from_pressure(kernel, force, sol)
    return dom, force, sol


def epsilon_stage(cfg: RunConfig, eps, layers=False, out=None):
    """Full pipeline at one epsilon; returns a JSON-ready dict."""
    t0 = time.perf_counter()
    trs, kernel = cell_stage(cfg, "macro")
    bog = bogovskii_cell(trs, kernel, tol=cfg.tol["linear"])
    dom, force, sol = homogenize(cfg, eps, trs, kernel)
    chk = check_homogenized(sol)
    ff = forcing_fields(sol, force, eps)
    cc = cell_convolutions(trs, kernel, bog, ff.theta)
    exp_F = Expansion(cc, ff, eps, "F")
    exp_G = Expansion(cc, ff, eps, "G")
    g = fine_grid(dom)
    holder = {}

    def run(cb):
        holder["fine"] = solve_fine(dom, force, cfg.time_grid, callback=cb, rtol=cfg.tol["linear"])

    rep = error_norms(dom, g, (exp_F, exp_G), sol.p, run)
    fine = holder["fine"]
    c_scan, p_scan = golden_section_offset(rep)
    probe = bogovskii_estimate_probe(dom, probe_data(dom))
    result = {
        "eps": eps,
        "N": dom.N,
        "n_obstacles": dom.n_obstacles,
        "mask_sha256": hashlib.sha256(np.packbits(dom.fluid).tobytes()).hexdigest()[:16],
        "darcy": {
            "windows": len(sol.windows),
            "max_ratio": sol.max_ratio,
            "operator_norm": sol.operator_norm,
            "divergence": float(np.max(chk["divergence"])),
            "normal_flux": float(np.max(chk["normal_flux"])),
        },
        "errors": {**{k: v for k, v in rep.as_dict().items() if k != "reference"},
                   "pressure_scan_offset": c_scan, "pressure_scan": p_scan},
        "reference": rep.reference,
        "fine": {
            "energy_constant": fine.energy_constant(),
            "poincare": fine.poincare_ratio(),
            "max_divergence": float(fine.divergence.max()),
        },
        "probe": {"poincare": probe.poincare, "gradient": probe.gradient,
                  "residual": probe.residual},
        "forcing_support_gap": ff.support_gap(),
    }
    if layers:
        cut = radial_cutoff(eps, dom.N)
        dec = decompose_layer(cut)
        lr = layer_analysis(dom, g, cut, dec, exp_G, u_final=g.scatter(fine.u))
        result["layer"] = {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                           for k, v in lr.as_dict().items()}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        tag = f"eps{round(1 / eps)}"
        io.write_energy_csv(out / f"energy_{tag}.csv", fine.energy_rows())
        io.write_pgm(out / f"mask_{tag}.pgm", dom.fluid)
    log.info("eps=%g done in %.1fs", eps, time.perf_counter() - t0)
    return result


def cached_epsilon(cfg: RunConfig, eps, layers, out):
    out = Path(out)
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / f"eps-{_digest(cfg, eps, layers)}.json"
    if path.exists():
        log.info("eps=%g: cached %s", eps, path.name)
        return json.loads(path.read_text())
    t0 = time.perf_counter()
    res = epsilon_stage(cfg, eps, layers, out)
    # compute time lives next to the result so reports stay deterministic
    path.with_suffix(".seconds").write_text(f"{time.perf_counter() - t0:.3f}\n")
    # round-trip through JSON so fresh and cached results are identical
    res = json.loads(json.dumps(res, sort_keys=True, default=io._jsonable))
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(res, sort_keys=True, indent=1))
    tmp.replace(path)
    return res


def stage_seconds(cfg: RunConfig, out):
    """Recorded compute time of every epsilon stage of the sweep (NaN if unknown)."""
    layer_set = set(cfg.layer_epsilons)
    total = 0.0
    for e in cfg.epsilons:
        side = Path(out) / "cache" / f"eps-{_digest(cfg, e, e in layer_set)}.seconds"
        total += float(side.read_text()) if side.exists() else float("nan")
    return total


def _worker(args):
    raw, eps, layers, out = args
    return cached_epsilon(RunConfig.from_dict(raw), eps, layers, out)


def sweep(cfg: RunConfig, out, jobs=1):
    eps_list = cfg.epsilons
    layer_set = set(cfg.layer_epsilons)
    tasks = [(cfg.raw, e, e in layer_set, str(out)) for e in eps_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_worker, tasks))
    else:
        results = [_worker(t) for t in tasks]
    return results


def fit_rates(results):
    eps = [r["eps"] for r in results]
    fits = {}
    for name in NORMS:
        fit = rate_fit(eps, [r["errors"][name] for r in results])
        fits[name] = {"slope": fit.slope, "intercept": fit.intercept,
                      "residual": fit.residual, "ci95": list(fit.ci95)}
    return fits


def layer_factors(results):
    rows = sorted((r for r in results if "layer" in r), key=lambda r: -r["eps"])
    out = {}
    for a, b in zip(rows, rows[1:]):
        key = f"{a['eps']:g}->{b['eps']:g}"
        out[key] = {
            "xi": a["layer"]["xi_total"] / b["layer"]["xi_total"],
            "eta": a["layer"]["eta_total"] / b["layer"]["eta_total"],
        }
    return out


def write_rates(out, results, fits):
    """rates.csv, two-column plot data per norm and rates.png."""
    from .plotting import plot_rates

    out = Path(out)
    eps = [r["eps"] for r in results]
    rows = [[r["eps"]] + [r["errors"][n] for n in NORMS] for r in results]
    rows.append(["slope"] + [fits[n]["slope"] for n in NORMS])
    io.write_csv(out / "rates.csv", ("eps",) + NORMS, rows)
    for n in NORMS:
        io.write_plot_data(out / f"plot_{n}.dat", eps, [r["errors"][n] for r in results])
    plot_rates(out / "rates.png", eps, {n: [r["errors"][n] for r in results]
                                        for n in ("velocity", "gradient", "time_derivative", "pressure")})


def build_report(cfg: RunConfig, results, fits=None):
    """Deterministic report: no timings, sorted keys."""
    return {
        "schema_version": cfg.raw["schema_version"],
        "config_sha256": cfg.section_hash(*sorted(cfg.raw)),
        "geometry": {"cell": cfg.cell.digest(), "kappa0": cfg.kappa0,
                     "masks": {f"{r['eps']:g}": r["mask_sha256"] for r in results}},
        "tolerances": cfg.tol,
        "epsilons": results,
        "slopes": fits or {},
        "layer_factors": layer_factors(results),
    }
