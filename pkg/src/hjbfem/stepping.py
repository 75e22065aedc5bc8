"""Backward time stepping for the discrete Bellman system.

The value at the final time is the nodal interpolant of the final data; each
earlier level solves the rowwise sup system

    sup_alpha [ (h E - Id) v_next + (h I + Id) v_now - h F ]_l = 0

by Howard policy iteration: fix a per-row control assignment, solve the mixed
linear system, reassign each row to the control with the largest row
residual (ties keep the current control, initial assignment is control 0),
and repeat until the assignment is stable.  On audited monotone operator
sets the iterates decrease monotonically and terminate after finitely many
assignments; the residual history is recorded in the run log.

Boundary values are identically zero: boundary columns multiply known zeros
and drop out, so the linear solves are restricted to interior columns after
the final data has been checked to vanish on the boundary.  Everything here
is deterministic: identical inputs give bit-identical solutions and logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import monotonicity
from .mesh import locate_points, nodal_interpolate

__all__ = [
    "TimeGrid",
    "SpaceTimeSolution",
    "RunLog",
    "SolverError",
    "make_time_grid",
    "resolve_time_grid",
    "solve",
    "solve_linear_control",
    "boundary_control_diagnostic",
]

FINAL_DATA_TOL = 1e-10
DEFAULT_TOL = 1e-10
DEFAULT_MAX_POLICY_ITER = 50


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with an exact integer number of steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise SolverError("time grid needs at least one step")

    @property
    def h(self):
        return self.horizon / self.n_steps

    def times(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def make_time_grid(T, h):
    """Grid with step h; T/h must be an integer within 1e-9 relative."""
    ratio = T / h
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise SolverError(f"T/h = {ratio!r} is not an integer")
    return TimeGrid(horizon=T, n_steps=n)


def resolve_time_grid(p, ops):
    """Grid from the operator set's resolved step."""
    if ops.h is None:
        raise SolverError("operator set carries no resolved time step")
    return make_time_grid(p.horizon, ops.h)


@dataclass
class SpaceTimeSolution:
    """Nodal values on the time grid with affine-in-time evaluation.

    ``values[k]`` holds the nodal vector at time ``k * h`` (all nodes;
    boundary entries are identically zero).  Between grid times the solution
    is the linear interpolant of the two neighbouring levels.
    """

    mesh: object
    grid: TimeGrid
    values: np.ndarray

    def freeze(self):
        self.values.flags.writeable = False
        return self

    def at_time(self, t):
        """Nodal vector at time t (affine between grid levels)."""
        T, n = self.grid.horizon, self.grid.n_steps
        if not (-1e-12 <= t <= T + 1e-12):
            raise ValueError(f"time {t} outside [0, {T}]")
        s = min(max(t, 0.0), T) / self.grid.h
        k = min(int(math.floor(s)), n - 1)
        theta = (k + 1) - s  # weight of the earlier level
        return theta * self.values[k] + (1.0 - theta) * self.values[k + 1]

    def __call__(self, t, points):
        """Evaluate at time t and arbitrary points of the mesh domain."""
        nodal = self.at_time(t)
        cells, bary = locate_points(self.mesh, points)
        return np.einsum("pj,pj->p", nodal[self.mesh.cells[cells]], bary)

    def min_value(self):
        return float(self.values.min())

    def export_csv(self, path):
        coords = self.mesh.vertices
        axes = "".join(f",x{j + 1}" for j in range(self.mesh.dim))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"step_index,node_index{axes},value\n")
            for k in range(self.values.shape[0]):
                for node in range(self.mesh.n_nodes):
                    xs = ",".join(format(c, ".17g") for c in coords[node])
                    fh.write(f"{k},{node},{xs},{format(self.values[k, node], '.17g')}\n")


@dataclass
class StepRecord:
    step: int
    iterations: int
    residuals: list
    assignment_counts: dict


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def note(self, message):
        self.notes.append(message)

    def total_iterations(self):
        return sum(s.iterations for s in self.steps)

    def to_text(self):
        lines = list(self.notes)
        for rec in self.steps:
            hist = " ".join(f"{alpha}:{count}" for alpha, count in
                            sorted(rec.assignment_counts.items()))
            resid = " ".join(format(r, ".6e") for r in rec.residuals)
            lines.append(f"step {rec.step} iterations {rec.iterations} "
                         f"controls [{hist}] residuals {resid}")
        return "\n".join(lines) + "\n"

    def export(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _final_values(p, mesh):
    """Nodal interpolant of the final data, boundary entries forced to zero."""
    values = nodal_interpolate(mesh, lambda pts: p.v_final(pts))
    boundary = values[mesh.interior_count:]
    worst = float(np.abs(boundary).max(initial=0.0))
    if worst > FINAL_DATA_TOL:
        raise SolverError(f"final data does not vanish on the boundary "
                          f"(max {worst:.3e}); validate the problem first")
    values[mesh.interior_count:] = 0.0
    return values


class _StepSolver:
    """Shared state for all steps: matrices, caches, tolerances."""

    def __init__(self, ops, grid, tol_rel, max_iter):
        self.ops = ops
        self.grid = grid
        self.h = grid.h
        n_int = ops.interior_count
        self.n_int = n_int
        self.max_iter = max_iter
        self.tol = tol_rel * (ops.load_sup() + 1.0)
        self.A = [(self.h * I[:, :n_int] + sp.eye(n_int, format="csr")).tocsr()
                  for I in ops.implicit]
        self.step_mats = [(self.h * E).tocsr() for E in ops.explicit]  # h*E, all columns
        self.rhs_load = [self.h * F for F in ops.load]
        self._factor_cache = {}

    def rhs(self, alpha, v_next):
        # -(h E - Id) v_next + h F, restricted to interior rows
        return v_next[:self.n_int] - self.step_mats[alpha] @ v_next + self.rhs_load[alpha]

    def residuals(self, v_int, v_next):
        """Row residual of every control at the candidate interior values."""
        return np.stack([self.A[alpha] @ v_int - self.rhs(alpha, v_next)
                         for alpha in range(self.ops.n_controls)])

    def factorize(self, assignment):
        key = assignment.tobytes()
        lu = self._factor_cache.get(key)
        if lu is None:
            if len(self._factor_cache) > 64:
                self._factor_cache.clear()
            rows = []
            for alpha in range(self.ops.n_controls):
                mask = sp.diags((assignment == alpha).astype(float))
                rows.append(mask @ self.A[alpha])
            M = rows[0]
            for extra in rows[1:]:
                M = M + extra
            try:
                lu = spla.splu(M.tocsc())
            except RuntimeError as exc:
                raise SolverError(f"linear solve failed: {exc}") from exc
            self._factor_cache[key] = lu
        return lu

    def mixed_rhs(self, assignment, v_next):
        out = np.empty(self.n_int)
        for alpha in range(self.ops.n_controls):
            mask = assignment == alpha
            if mask.any():
                out[mask] = self.rhs(alpha, v_next)[mask]
        return out

    def step(self, k, v_next, assignment):
        """One backward step by policy iteration; returns (v_now, record)."""
        residual_log = []
        for it in range(1, self.max_iter + 1):
            lu = self.factorize(assignment)
            v_int = lu.solve(self.mixed_rhs(assignment, v_next))
            res = self.residuals(v_int, v_next)
            sup_res = res.max(axis=0)
            residual_log.append(float(np.abs(sup_res).max(initial=0.0)))
            best = np.argmax(res, axis=0)
            current = res[assignment, np.arange(self.n_int)]
            improve = res[best, np.arange(self.n_int)] > current + 1e-14
            new_assignment = np.where(improve, best, assignment)
            if np.array_equal(new_assignment, assignment):
                break
            assignment = new_assignment
        else:
            raise SolverError(f"policy iteration did not converge at step {k} "
                              f"within {self.max_iter} iterations "
                              f"(residual {residual_log[-1]:.3e})")
        if residual_log[-1] > self.tol:
            raise SolverError(f"step {k} residual {residual_log[-1]:.3e} exceeds "
                              f"tolerance {self.tol:.3e}")
        counts = {}
        for alpha in assignment:
            counts[int(alpha)] = counts.get(int(alpha), 0) + 1
        record = StepRecord(step=k, iterations=len(residual_log),
                            residuals=residual_log, assignment_counts=counts)
        return v_int, assignment, record


def _check_audits(p, ops, grid, override_audits, log):
    report = monotonicity.run_audits(ops, h=grid.h)
    if report.passed:
        log.note(f"audits: {report}")
        return report
    if not override_audits:
        raise SolverError(f"monotonicity audits failed ({report}); "
                          f"pass override_audits=True to run anyway")
    log.note(f"UNAUDITED RUN: monotonicity audits FAILED and were overridden "
             f"({report})")
    return report


def solve(p, ops, grid=None, tol_rel=DEFAULT_TOL, max_policy_iter=DEFAULT_MAX_POLICY_ITER,
          override_audits=False):
    """Backward induction over the grid; returns (solution, run log).

    Refuses to run when the monotonicity audits fail, unless
    ``override_audits`` is set (the override is recorded loudly in the log).
    """
    grid = grid if grid is not None else resolve_time_grid(p, ops)
    mesh = ops.mesh
    log = RunLog()
    _check_audits(p, ops, grid, override_audits, log)
    solver = _StepSolver(ops, grid, tol_rel, max_policy_iter)
    values = np.zeros((grid.n_steps + 1, mesh.n_nodes))
    values[grid.n_steps] = _final_values(p, mesh)
    assignment = np.zeros(mesh.interior_count, dtype=int)
    for k in range(grid.n_steps - 1, -1, -1):
        v_int, assignment, record = solver.step(k, values[k + 1], assignment)
        values[k, :mesh.interior_count] = v_int
        log.steps.append(record)
    log.note(f"minimum nodal value {values.min():.6e}")
    return SpaceTimeSolution(mesh=mesh, grid=grid, values=values).freeze(), log


def solve_linear_control(p, ops, grid=None, control=0, override_audits=False):
    """Backward solution of the single-control linear scheme.

    Each step solves ``(h I + Id) v_now = -(h E - Id) v_next + h F`` with the
    operators of the given control.
    """
    grid = grid if grid is not None else resolve_time_grid(p, ops)
    mesh = ops.mesh
    log = RunLog()
    _check_audits(p, ops, grid, override_audits, log)
    solver = _StepSolver(ops, grid, DEFAULT_TOL, 1)
    assignment = np.full(mesh.interior_count, control, dtype=int)
    lu = solver.factorize(assignment)
    values = np.zeros((grid.n_steps + 1, mesh.n_nodes))
    values[grid.n_steps] = _final_values(p, mesh)
    for k in range(grid.n_steps - 1, -1, -1):
        values[k, :mesh.interior_count] = lu.solve(
            solver.mixed_rhs(assignment, values[k + 1]))
    return SpaceTimeSolution(mesh=mesh, grid=grid, values=values).freeze()


def boundary_control_diagnostic(p, ops, grid=None, override_audits=False):
    """Near-boundary smallness proxy of the linear-control solutions.

    For every interior node sharing a cell with the boundary, reports the
    minimum over controls of the largest value the control's linear solution
    takes at that node over all times.  The table is a per-level sample of a
    limiting quantity: values shrinking under refinement indicate that some
    control keeps the solution small next to the boundary.

    Returns (node_indices, coordinates, values).
    """
    grid = grid if grid is not None else resolve_time_grid(p, ops)
    mesh = ops.mesh
    near = set()
    for cell in mesh.cells:
        if any(v >= mesh.interior_count for v in cell):
            near.update(int(v) for v in cell if v < mesh.interior_count)
    nodes = np.asarray(sorted(near), dtype=int)
    table = np.full((len(nodes), p.n_controls), np.inf)
    for alpha in range(p.n_controls):
        v = solve_linear_control(p, ops, grid, control=alpha,
                                 override_audits=override_audits)
        table[:, alpha] = np.abs(v.values[:, nodes]).max(axis=0)
    values = table.min(axis=1)
    return nodes, mesh.vertices[nodes], values
