"""Command-line driver: load a problem, run the pipeline, write artifacts.

Modes
-----
run              single level: validate, assemble, audit, solve, export
convergence      error table across refinement levels
audit-monotone   sign audits only, one report per level
audit-coercivity seeded randomized coercivity property run

Exit status: 0 all requested checks passed; 2 bad usage or malformed input;
3 an audit failed (or a run was refused because of failing audits);
1 unexpected internal error.  Verbosity via the HJBFEM_LOG environment
variable (quiet, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import analysis, assembly, controls, mesh as meshmod, monotonicity, stepping

__all__ = ["main", "builtin_problems", "RunConfig", "run"]

log = logging.getLogger("hjbfem")

_BUILTINS = {
    "HEAT": (
        "single control, unit explicit diffusion, separable exact solution",
        """
[problem]
name = heat
T = 0.1
K = 1.0
theta = 0.25
alpha_hat = none
timestep = auto

[domain]
dim = 2
box = 0 1 0 1

[controls]
count = 1
control_0 = 0.0

[coefficients]
a = 1
b1 = 0
b2 = 0
c = 0
f = 0
v_T = sin(pi*x1)*sin(pi*x2)

[splitting]
a = explicit
b = explicit
c = explicit

[reference]
v_exact = exp(2*pi*pi*(t - T))*sin(pi*x1)*sin(pi*x2)
""",
    ),
    "HEAT_IMPLICIT": (
        "single control, unit implicit diffusion with diagnostics control",
        """
[problem]
name = heat_implicit
T = 0.1
K = 1.0
theta = 0.25
alpha_hat = 0
timestep = fixed 0.01

[domain]
dim = 2
box = 0 1 0 1

[controls]
count = 1
control_0 = 0.0

[coefficients]
a = 1
b1 = 0
b2 = 0
c = 0
f = 0
v_T = sin(pi*x1)*sin(pi*x2)

[splitting]
a = implicit
b = implicit
c = implicit

[reference]
v_exact = exp(2*pi*pi*(t - T))*sin(pi*x1)*sin(pi*x2)
""",
    ),
    "DEGEN2": (
        "two controls with genuinely degenerate diffusion branch, fully "
        "implicit, diagnostics control on the non-degenerate branch",
        """
[problem]
name = degen2
T = 0.5
K = 1.0
theta = 0.25
alpha_hat = 1
timestep = fixed 0.05

[domain]
dim = 2
box = 0 1 0 1

[controls]
count = 2
control_0 = 0.0
control_1 = 1.0

[coefficients]
a = alpha1
b1 = 0
b2 = 0
c = 0
f = 16*x1*(1-x1)*x2*(1-x2)
v_T = sin(pi*x1)^2*sin(pi*x2)^2

[splitting]
a = implicit
b = implicit
c = implicit
""",
    ),
    "ADVECT": (
        "single control, constant explicit drift, stabilized by nonzero "
        "artificial diffusion",
        """
[problem]
name = advect
T = 0.1
K = 1.0
theta = 0.25
alpha_hat = none
timestep = auto

[domain]
dim = 2
box = 0 1 0 1

[controls]
count = 1
control_0 = 0.0

[coefficients]
a = 0
b1 = 1
b2 = 0.5
c = 0
f = 16*x1*(1-x1)*x2*(1-x2)
v_T = sin(pi*x1)*sin(pi*x2)

[splitting]
a = explicit
b = explicit
c = explicit
""",
    ),
}


def builtin_problems():
    """Catalog of shipped problems: name -> (description, problem text)."""
    return dict(_BUILTINS)


def load_any_problem(spec):
    """Load 'builtin:NAME' or a problem file path."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in _BUILTINS:
            raise controls.ProblemFormatError(
                f"unknown builtin {name!r}; available: {', '.join(sorted(_BUILTINS))}")
        return controls.parse_problem_text(_BUILTINS[name][1], name=name)
    return controls.load_problem(spec)


@dataclass
class RunConfig:
    problem: str
    levels: list
    mode: str = "run"
    pattern: str = "acute"
    h: str | None = None
    seed: int = 0
    out: str = "out"
    override_audits: bool = False
    samples: int = 100
    quadrature_order: int = 2


def _parse_levels(text):
    if ".." in text:
        a, b = text.split("..", 1)
        levels = list(range(int(a), int(b) + 1))
    else:
        levels = [int(v) for v in text.split(",")]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"levels must be non-empty and increasing: {text!r}")
    if any(lv < 0 for lv in levels):
        raise ValueError("levels must be non-negative")
    return levels


def _apply_step_override(p, h_flag):
    if h_flag is None:
        return p
    if h_flag == "auto":
        return replace(p, timestep="auto")
    return replace(p, timestep=f"fixed {float(h_flag)}")


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _mode_run(p, cfg):
    level = cfg.levels[0]
    if len(cfg.levels) > 1:
        log.info("run mode uses a single level; taking %d", level)
    msh = meshmod.generate_structured_mesh(p.box, level, cfg.pattern)
    report = controls.validate_problem(p, msh)
    _write(os.path.join(cfg.out, "validation.txt"), str(report) + "\n")
    if not report.passed:
        print(report)
        return 3
    hd = meshmod.compute_hat_data(msh)
    ops = assembly.assemble_operators(p, msh, hd=hd,
                                      quadrature_order=cfg.quadrature_order)
    audit = monotonicity.run_audits(ops)
    monotonicity.export_report(audit, os.path.join(cfg.out, "monotonicity_report.txt"))
    monotonicity.export_violations_csv(audit, os.path.join(cfg.out, "violations.csv"))
    assembly.export_nu_table(ops, os.path.join(cfg.out, "nu_table.csv"))
    for alpha in range(ops.n_controls):
        assembly.export_triplets(ops.explicit[alpha],
                                 os.path.join(cfg.out, f"operator_explicit_{alpha}.txt"))
        assembly.export_triplets(ops.implicit[alpha],
                                 os.path.join(cfg.out, f"operator_implicit_{alpha}.txt"))
    if not audit.passed and not cfg.override_audits:
        print(audit)
        return 3
    if not audit.passed:
        _write(os.path.join(cfg.out, "UNAUDITED"),
               "monotonicity audits failed; run was forced by --override-audits\n")
        log.warning("UNAUDITED run: %s", audit)
    grid = stepping.resolve_time_grid(p, ops)
    solution, runlog = stepping.solve(p, ops, grid,
                                      override_audits=cfg.override_audits)
    solution.export_csv(os.path.join(cfg.out, "solution.csv"))
    runlog.export(os.path.join(cfg.out, "runlog.txt"))
    nodes, coords, values = stepping.boundary_control_diagnostic(
        p, ops, grid, override_audits=cfg.override_audits)
    with open(os.path.join(cfg.out, "boundary_diagnostic.csv"), "w",
              encoding="utf-8") as fh:
        axes = "".join(f",x{j + 1}" for j in range(msh.dim))
        fh.write(f"node_index{axes},value\n")
        for i, node in enumerate(nodes):
            xs = ",".join(format(c, ".17g") for c in coords[i])
            fh.write(f"{node},{xs},{format(values[i], '.17g')}\n")
    print(f"level {level}: {audit}")
    print(f"steps {grid.n_steps}, policy iterations {runlog.total_iterations()}, "
          f"min value {solution.min_value():.3e}")
    return 0


def _mode_convergence(p, cfg):
    table = analysis.error_study(p, cfg.levels, pattern=cfg.pattern,
                                 quadrature_order=cfg.quadrature_order)
    path = os.path.join(cfg.out, "error_table.csv")
    table.to_csv(path)
    rates_sup = table.rates("err_sup")
    print("level dx h err_sup err_wh1")
    for i in range(len(table.levels)):
        print(f"{table.levels[i]} {table.dx[i]:.6g} {table.h[i]:.6g} "
              f"{table.err_sup[i]:.6e} {table.err_wh1[i]:.6e}")
    print("observed sup rates:", " ".join(f"{r:.3f}" for r in rates_sup))
    return 0


def _mode_audit_monotone(p, cfg):
    status = 0
    for level in cfg.levels:
        msh = meshmod.generate_structured_mesh(p.box, level, cfg.pattern)
        report = controls.validate_problem(p, msh)
        if not report.passed:
            print(f"level {level}: {report}")
            status = 3
            continue
        ops = assembly.assemble_operators(p, msh,
                                          quadrature_order=cfg.quadrature_order)
        audit = monotonicity.run_audits(ops)
        monotonicity.export_report(
            audit, os.path.join(cfg.out, f"monotonicity_report_L{level}.txt"))
        monotonicity.export_violations_csv(
            audit, os.path.join(cfg.out, f"violations_L{level}.csv"))
        print(f"level {level}: {audit}")
        if not audit.passed:
            status = 3
    return status


def _mode_audit_coercivity(p, cfg):
    level = cfg.levels[0]
    msh = meshmod.generate_structured_mesh(p.box, level, cfg.pattern)
    ops = assembly.assemble_operators(p, msh, quadrature_order=cfg.quadrature_order)
    sob = analysis.audit_sobolev_conditions(p)
    print(sob)
    weight = analysis.weight_from_problem(p, ops, level_adjusted=True)
    cprime, parts = analysis.compute_cprime(p, ops, weight)
    grid = stepping.resolve_time_grid(p, ops)
    passed, reports = analysis.coercivity_property_run(
        p, ops, weight, cprime, grid=grid, n_samples=cfg.samples, seed=cfg.seed)
    solution, _ = stepping.solve(p, ops, grid, override_audits=cfg.override_audits)
    stability = analysis.stability_bound_report(p, ops, solution, weight, cprime)
    lines = [f"coercivity property run: {'PASS' if passed else 'FAIL'} "
             f"({cfg.samples} samples, seed {cfg.seed}, level {level})",
             f"cprime {format(cprime, '.17g')}"]
    lines += [f"cprime_part {k} {format(v, '.17g')}" for k, v in sorted(parts.items())]
    lines += [f"trial {i} lhs {format(r.lhs, '.17g')} rhs {format(r.rhs, '.17g')} "
              f"{'PASS' if r.passed else 'FAIL'}" for i, r in enumerate(reports)]
    lines.append(f"stability lhs {format(stability['lhs'], '.17g')} "
                 f"bracket {format(stability['bracket'], '.17g')} "
                 f"constant {format(stability['constant'], '.17g')}")
    _write(os.path.join(cfg.out, "coercivity_report.txt"), "\n".join(lines) + "\n")
    print(lines[0])
    if not sob.passed or not passed:
        return 3
    return 0


_MODES = {
    "run": _mode_run,
    "convergence": _mode_convergence,
    "audit-monotone": _mode_audit_monotone,
    "audit-coercivity": _mode_audit_coercivity,
}


def run(cfg):
    """Execute a configured pipeline; returns the process exit status."""
    np.random.seed(cfg.seed)  # module-level consumers; explicit RNGs dominate
    os.makedirs(cfg.out, exist_ok=True)
    try:
        p = load_any_problem(cfg.problem)
        p = _apply_step_override(p, cfg.h)
    except (controls.ProblemFormatError, controls.ExpressionError, OSError) as exc:
        print(f"error [controls.load]: {exc}", file=sys.stderr)
        return 2
    try:
        return _MODES[cfg.mode](p, cfg)
    except (assembly.AssemblyError, stepping.SolverError) as exc:
        print(f"error [{cfg.mode}]: {exc}", file=sys.stderr)
        return 3
    except (meshmod.MeshError, controls.ProblemFormatError, ValueError) as exc:
        print(f"error [{cfg.mode}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error [{cfg.mode}]: {exc!r}", file=sys.stderr)
        return 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hjbfem",
        description="Monotone P1 finite element pipelines for degenerate "
                    "Bellman problems")
    parser.add_argument("--problem", help="problem file path or builtin:NAME")
    parser.add_argument("--levels", default="2",
                        help="refinement levels, e.g. 2 or 1..3 or 1,2,3")
    parser.add_argument("--mode", default="run", choices=sorted(_MODES))
    parser.add_argument("--pattern", default="acute",
                        choices=("acute", "crisscross"),
                        help="structured mesh family")
    parser.add_argument("--h", default=None,
                        help="override step policy: auto or a fixed value")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="artifact directory")
    parser.add_argument("--override-audits", action="store_true",
                        help="run even when monotonicity audits fail "
                             "(outputs are stamped UNAUDITED)")
    parser.add_argument("--samples", type=int, default=100,
                        help="sample count for audit-coercivity")
    parser.add_argument("--quadrature-order", type=int, default=2)
    parser.add_argument("--list-builtins", action="store_true")
    args = parser.parse_args(argv)

    level_name = os.environ.get("HJBFEM_LOG", "info").lower()
    logging.basicConfig(
        level={"quiet": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}.get(level_name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")

    if args.list_builtins:
        for name, (desc, _) in sorted(builtin_problems().items()):
            print(f"{name}: {desc}")
        return 0
    if not args.problem:
        parser.error("--problem is required")
    try:
        levels = _parse_levels(args.levels)
    except ValueError as exc:
        print(f"error [cli.levels]: {exc}", file=sys.stderr)
        return 2
    cfg = RunConfig(problem=args.problem, levels=levels, mode=args.mode,
                    pattern=args.pattern, h=args.h, seed=args.seed,
                    out=args.out, override_audits=args.override_audits,
                    samples=args.samples, quadrature_order=args.quadrature_order)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
