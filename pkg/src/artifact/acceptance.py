"""The ten acceptance checks, shared by ``artifact verify`` and the test suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aux_correctors import bogovskii_cell, flux_corrector
from .cell_corrector import (PermeabilityKernel, TimeGrid, decay_diagnostics, energy_residuals, permeability,
                             solve_correctors, verify_semigroup_relation)
from .config import RunConfig
from .darcy_memory import (MacroGrid, gradient_force, ramp_force, solve_pressure,
                           velocity_from_pressure)
from .geometry import CellGeometry
from . import pipeline


@dataclass
class Check:
    number: int
    title: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} AC{self.number} {self.title}: {self.detail}"


def kernel_structure(cfg: RunConfig):
    t0 = time.perf_counter()
    trs, kernel = pipeline.cell_stage(cfg, "kernel")
    elapsed = time.perf_counter() - t0
    diag = decay_diagnostics(trs[0], kernel)
    a0 = float(np.abs(kernel.A[0] - kernel.fluid_fraction * np.eye(2)).max())
    sym = kernel.symmetry_defect()
    lam = kernel.min_eigenvalue()
    rate, r2 = diag["trace_rate"], diag["trace_r2"]
    ok = a0 <= 1e-8 and sym <= 1e-6 and lam > 0 and rate < 0 and r2 >= 0.99 and elapsed <= 120
    return Check(1, "kernel structure", ok,
                 f"|A(0)-|Y_f|I|={a0:.1e} asym={sym:.1e} min eig={lam:.3e} "
                 f"log-trace slope={rate:.3f} R2={r2:.4f} time={elapsed:.0f}s",
                 dict(A0=a0, symmetry=sym, min_eig=lam, rate=rate, r2=r2, seconds=elapsed))


def trivial_cell(cfg: RunConfig, M=16):
    cell = CellGeometry("square", 0.0, cfg.cell.n_cell)
    grid = TimeGrid(cfg.kernel_grid.T, M, cfg.kernel_grid.gamma)
    trs = solve_correctors(cell, grid, rtol=cfg.tol["linear"])
    kernel = permeability(trs)
    w = 0.0
    for tr in trs:
        ex = 1.0 if tr.j == 0 else 0.0
        w = max(w, float(np.abs(tr.ux - ex).max()), float(np.abs(tr.uy - (1 - ex)).max()))
    a = float(np.abs(kernel.A - np.eye(2)).max())
    phi = float(np.abs(bogovskii_cell(trs, kernel).phi).max())
    flux = flux_corrector(trs, kernel)
    Phi = float(np.abs(flux.phi21).max())
    worst = max(w, a, phi, Phi)
    return Check(2, "trivial-cell oracle", worst <= 1e-8,
                 f"|W-e_j|={w:.1e} |A-I|={a:.1e} |phi|={phi:.1e} |Phi|={Phi:.1e}",
                 dict(W=w, A=a, phi=phi, Phi=Phi))


def corrector_energy(cfg: RunConfig):
    trs, _ = pipeline.cell_stage(cfg, "kernel")
    dtmax = float(cfg.kernel_grid.steps.max())
    total = 0.0
    dE = -np.inf
    bound = 0.0
    for tr in trs:
        total = max(total, float(np.abs(energy_residuals(tr)).sum()))
        dE = max(dE, float(np.diff(tr.energy).max()))
        # O(dt) with the natural constant ||W(0)||^2
        bound = 2 * tr.energy[0] * dtmax
    ok = total <= bound and dE < 0
    return Check(3, "corrector energy", ok,
                 f"summed residual={total:.3e} <= ||W0||^2 dt_max={bound:.3e}; "
                 f"max energy increment={dE:.2e}", dict(residual=total, bound=bound, max_dE=dE))


def fixed_point_solver(cfg: RunConfig, N=32):
    _, kernel = pipeline.cell_stage(cfg, "macro")
    grid = cfg.time_grid
    tol = cfg.tol["linear"]
    force = ramp_force()
    sol = solve_pressure(kernel, force, N, grid, guess="zero", tol=tol)
    ratio = sol.max_ratio

    macro = MacroGrid(N)
    x, y = macro.cell_centres()
    q = np.cos(np.pi * x) * np.cos(2 * np.pi * y) + x * y
    gsol = solve_pressure(kernel, gradient_force(q, lambda t: 1.0 + t), N, grid, tol=tol)
    velocity_from_pressure(kernel, gradient_force(q, lambda t: 1.0 + t), gsol)
    theta = 1.0 + grid.nodes
    qm = q - q.mean()
    perr = float(max(np.abs(gsol.p[k] - theta[k] * qm).max() for k in range(len(theta))))
    u0 = float(max(np.abs(gsol.ux).max(), np.abs(gsol.uy).max()))

    # scalar kernel a(t) I: the memory terms cancel and one Poisson solve remains
    t = kernel.times
    iso = PermeabilityKernel(t, (np.exp(-t) * 0.7)[:, None, None] * np.eye(2), 0.7)
    isol = solve_pressure(iso, force, N, grid, tol=tol, fast=False)
    thetas = force.theta(grid.nodes)
    oracle = 0.0
    for k in range(len(grid.nodes)):
        rhs = sum(th[k] * macro.divergence(fx, fy) for th, (fx, fy) in zip(thetas, force.faces(macro)))
        oracle = max(oracle, float(np.abs(isol.p[k] - macro.solve_neumann(rhs)).max()))
    ok = ratio <= cfg.tol["contraction"] and u0 <= 1e-8 and perr <= 1e-6 and oracle <= 1e-6
    return Check(4, "fixed-point solver", ok,
                 f"max contraction ratio={ratio:.3f} |u0| (grad q)={u0:.1e} "
                 f"|p0-q|={perr:.1e} isotropic oracle={oracle:.1e}",
                 dict(ratio=ratio, u0=u0, p_error=perr, oracle=oracle))


def divergence_machinery(cfg: RunConfig, results):
    trs, kernel = pipeline.cell_stage(cfg, "macro")
    bog = bogovskii_cell(trs, kernel, tol=cfg.tol["linear"])
    phi = float(np.max(bog.residual))
    lay = [r["layer"] for r in results if "layer" in r]
    if not lay:
        return Check(5, "divergence machinery", False, "no layer analysis in the sweep")
    xi = max(l["xi_residual"] for l in lay)
    eta = max(l["eta_residual"] for l in lay)
    comp = max(max(l["compatibility"]["J1+J2"], l["compatibility"]["Pi_per_cell"]) for l in lay)
    quad = 10 * cfg.tol["linear"]
    lim = cfg.tol["divergence"]
    ok = phi <= lim and xi <= lim and eta <= lim and comp <= quad
    return Check(5, "divergence machinery", ok,
                 f"div residual phi={phi:.1e} xi^={xi:.1e} eta^={eta:.1e}; "
                 f"compatibility={comp:.1e} (limit {quad:.0e})",
                 dict(phi=phi, xi=xi, eta=eta, compatibility=comp))


def _spread(values):
    v = np.asarray(values, float)
    return float(v.max() / v.min())


def bogovskii_uniformity(cfg: RunConfig, results):
    a = [r["probe"]["poincare"] for r in results]
    b = [r["probe"]["gradient"] for r in results]
    sa, sb = _spread(a), _spread(b)
    lim = cfg.tol["uniformity"]
    return Check(6, "Bogovskii eps-uniformity", sa <= lim and sb <= lim,
                 f"poincare ratios {np.round(a, 4).tolist()} spread {sa:.2f}; "
                 f"gradient ratios {np.round(b, 3).tolist()} spread {sb:.2f}",
                 dict(poincare=a, gradient=b, spreads=(sa, sb)))


def convergence_rate(cfg: RunConfig, fits, seconds=None):
    g = fits["gradient"]["slope"]
    v = fits["velocity"]["slope"]
    m = cfg.tol["min_slope"]
    ok = g >= m and v >= m and (seconds is None or seconds <= 1800)
    extra = "" if seconds is None else f" sweep time={seconds:.0f}s"
    return Check(7, "convergence rate", ok,
                 f"gradient slope={g:.3f} velocity slope={v:.3f} (need >= {m}){extra}",
                 dict(gradient=g, velocity=v, seconds=seconds))


def pressure_rate(cfg: RunConfig, fits):
    p = fits["pressure"]["slope"]
    m = cfg.tol["min_slope"]
    return Check(8, "pressure rate", p >= m, f"pressure slope={p:.3f} (need >= {m})",
                 dict(pressure=p))


def layer_scaling(cfg: RunConfig, results):
    factors = pipeline.layer_factors(results)
    need = cfg.tol["layer_factor"]
    if not factors:
        return Check(9, "boundary-layer scaling", False, "fewer than two layer runs")
    ok = all(f["xi"] >= need and f["eta"] >= need for f in factors.values())
    text = "; ".join(f"{k}: xi x{f['xi']:.3f} eta x{f['eta']:.3f}" for k, f in factors.items())
    return Check(9, "boundary-layer scaling", ok, f"{text} (need >= {need:.3f})", factors)


def semigroup_relation(cfg: RunConfig, Ms=(32, 64)):
    T = cfg.time_grid.T
    errs = []
    for M in Ms:
        rep = verify_semigroup_relation(cfg.cell, TimeGrid(T, M, 1.0), rtol=cfg.tol["linear"])
        errs.append(float(rep.relative[rep.times >= T / 4].max()))
    order = float(np.log2(errs[0] / errs[1]))
    below = all(e <= 5 * T / M for e, M in zip(errs, Ms))
    return Check(10, "semigroup relation", order >= 1.0 and below,
                 f"late discrepancy {errs[0]:.2e} -> {errs[1]:.2e} (order {order:.2f}), "
                 f"below 5 dt: {below}", dict(errors=errs, order=order))


def run_sweep(cfg: RunConfig, out, jobs=1):
    t0 = time.perf_counter()
    results = pipeline.sweep(cfg, out, jobs)
    wall = time.perf_counter() - t0
    # serial compute time of the stages, also valid when results come from the cache
    recorded = pipeline.stage_seconds(cfg, out)
    return results, recorded if np.isfinite(recorded) else wall


def all_checks(cfg: RunConfig, out, jobs=1):
    results, seconds = run_sweep(cfg, out, jobs)
    fits = pipeline.fit_rates(results)
    return [
        kernel_structure(cfg), trivial_cell(cfg), corrector_energy(cfg),
        fixed_point_solver(cfg), divergence_machinery(cfg, results),
        bogovskii_uniformity(cfg, results), convergence_rate(cfg, fits, seconds),
        pressure_rate(cfg, fits), layer_scaling(cfg, results), semigroup_relation(cfg),
    ], results, fits
