"""Command line front end: ``artifact <subcommand> [--config PATH] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 failed acceptance check under ``verify --strict``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .config import RunConfig
from .geometry import ConfigurationError
from .linalg import CompatibilityError, SolverError
from .darcy_memory import NonContractionError

OUT_ENV = "ARTIFACT_OUT"
log = logging.getLogger("artifact")


def output_dir(args, cfg: RunConfig) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or cfg.raw["output"]
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_cell(cfg, out, args):
    trs, kernel = pipeline.cell_stage(cfg, "macro")
    t = kernel.times
    for tr in trs:
        header = dict(direction=tr.j + 1, n_cell=cfg.cell.n_cell, T=float(t[-1]), M=len(t) - 1,
                      geometry=cfg.cell.digest())
        io.write_field(out / f"W{tr.j + 1}_x.txt", tr.ux, **header, component="x-faces", index="k,i,j")
        io.write_field(out / f"W{tr.j + 1}_y.txt", tr.uy, **header, component="y-faces", index="k,i,j")
        io.write_field(out / f"pi{tr.j + 1}.txt", tr.pi, **header, component="cells", index="k,i,j")
    io.write_pgm(out / "cell_mask.pgm", cfg.cell.fluid)
    summary = pipeline.aux_summary(cfg)
    io.write_json(out / "cell.json", summary)
    for k, v in summary.items():
        print(f"{k}: {v:.3e}")


def cmd_kernel(cfg, out, args):
    from .plotting import plot_kernel

    _, kernel = pipeline.cell_stage(cfg, "kernel")
    io.write_kernel_csv(out / "kernel.csv", kernel)
    plot_kernel(out / "kernel.png", kernel)
    summary = pipeline.kernel_summary(cfg)
    io.write_json(out / "kernel.json", summary)
    for k, v in summary.items():
        print(f"{k}: {v}")


def cmd_homogenize(cfg, out, args):
    trs, kernel = pipeline.cell_stage(cfg, "macro")
    for eps in cfg.epsilons:
        dom, force, sol = pipeline.homogenize(cfg, eps, trs, kernel)
        tag = f"eps{round(1 / eps)}"
        norms = np.sqrt((sol.p**2).sum(axis=(1, 2))) / dom.N
        io.write_csv(out / f"p0_{tag}.csv", ("t", "p0_l2"), zip(sol.times, norms))
        io.write_field(out / f"p0_final_{tag}.txt", sol.p[-1], N=dom.N, T=float(sol.times[-1]),
                       component="cells")
        print(f"eps={eps:g} N={dom.N} windows={len(sol.windows)} max ratio={sol.max_ratio:.3f}")


def cmd_fine(cfg, out, args):
    for r in pipeline.sweep(cfg, out, args.jobs):
        e = r["errors"]
        print(f"eps={r['eps']:g} obstacles={r['n_obstacles']} energy C={r['fine']['energy_constant']:.4f} "
              f"velocity={e['velocity']:.4f} gradient={e['gradient']:.4f} pressure={e['pressure']:.4f}")


def cmd_rates(cfg, out, args):
    results = pipeline.sweep(cfg, out, args.jobs)
    fits = pipeline.fit_rates(results)
    pipeline.write_rates(out, results, fits)
    io.write_json(out / "report.json", pipeline.build_report(cfg, results, fits))
    for name, f in fits.items():
        print(f"{name}: slope {f['slope']:.3f} (95% CI {f['ci95'][0]:.2f}..{f['ci95'][1]:.2f})")


def cmd_verify(cfg, out, args):
    from .acceptance import all_checks

    checks, results, fits = all_checks(cfg, out, args.jobs)
    pipeline.write_rates(out, results, fits)
    report = pipeline.build_report(cfg, results, fits)
    report["acceptance"] = {f"AC{c.number}": c.passed for c in checks}
    io.write_json(out / "report.json", report)
    lines = [c.line() for c in checks]
    (out / "acceptance.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if args.strict and not all(c.passed for c in checks):
        return 3
    return 0


COMMANDS = {
    "cell": cmd_cell, "kernel": cmd_kernel, "homogenize": cmd_homogenize,
    "fine": cmd_fine, "rates": cmd_rates, "verify": cmd_verify,
}


def build_parser():
    p = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration (defaults reproduce the acceptance suite)")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel epsilon pipelines")
    p.add_argument("--strict", action="store_true", help="verify: exit 3 when a check fails")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be at least 1")
        out = output_dir(args, cfg)
        status = COMMANDS[args.command](cfg, out, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, NonContractionError, CompatibilityError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
