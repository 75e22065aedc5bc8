"""Diagnostics: weighted norms, cut-off projection, coercivity, convergence.

The convergence target is a space-time norm weighted by a non-negative
function ``gamma``: the squared seminorm of a grid function is the composite
trapezium sum over time levels of the spatial integrals of
``gamma |grad w|^2``.  The weight of interest comes from the splitting of the
diagnostics control (implicit minus explicit diffusion part), optionally
raised by half the scalar implicit floor of the current level.

`check_coercivity` evaluates both sides of the discrete coercivity
inequality in telescoped form for a given non-negative grid function; the
final-time space-time norm is surrogated by the spatial H1 norm of the final
slice (the constant in front of it is free, so only the structure matters).

`project_Q` realizes the positivity- and boundary-preserving projection of a
reference function into the discrete space: subtract the sampled sup distance
between reference and numerical solution, clip at zero, interpolate nodally.
The result is non-negative, vanishes on the boundary, and never exceeds the
numerical solution at the nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sampling
from .assembly import assemble_operators, simplex_quadrature
from .controls import EvaluationError
from .mesh import compute_hat_data, generate_structured_mesh
from .stepping import SpaceTimeSolution, resolve_time_grid, solve

__all__ = [
    "WeightSpec",
    "ErrorTable",
    "CoercivityReport",
    "SobolevReport",
    "cutoff",
    "project_Q",
    "weighted_h1_seminorm",
    "weight_from_problem",
    "compute_cprime",
    "check_coercivity",
    "coercivity_property_run",
    "random_nonneg_field",
    "stability_bound_report",
    "audit_sobolev_conditions",
    "error_study",
    "solve_on_level",
]

WEIGHT_TOL = 1e-12
FD_TOL = 1e-6
MID_STEP_FRACTIONS = (0.25, 0.5, 0.75)


# ---------------------------------------------------------------------------
# weights

@dataclass
class WeightSpec:
    """Non-negative spatial weight, possibly raised by a level constant.

    ``origin`` records where the weight came from: ``"user"``,
    ``"splitting"`` (implicit minus explicit diffusion of the diagnostics
    control) or ``"level-adjusted"`` (splitting weight plus half the scalar
    implicit floor).
    """

    fun: object
    shift: float = 0.0
    origin: str = "user"

    def __call__(self, points):
        vals = np.asarray(self.fun(points), dtype=float) + self.shift
        if np.any(vals < -WEIGHT_TOL):
            worst = float(vals.min())
            raise ValueError(f"negative weight sample {worst:.3e} "
                             f"(origin {self.origin})")
        return np.clip(vals, 0.0, None)

    def domination_constant(self, base, points):
        """Largest ratio base/self over the sample points (inf if unbounded)."""
        mine = self(points)
        other = np.asarray(base(points), dtype=float)
        ratio = 0.0
        for m, o in zip(mine, other):
            if o <= WEIGHT_TOL:
                continue
            if m <= WEIGHT_TOL:
                return math.inf
            ratio = max(ratio, o / m)
        return ratio


def weight_from_problem(p, ops=None, level_adjusted=False):
    """Weight from the diagnostics-control splitting, gamma = a_imp - a_exp."""
    hat = p.sobolev_control
    if hat is None:
        raise ValueError("problem designates no diagnostics control")

    def gamma(points):
        return (p.eval_split("a", "implicit", hat, points)
                - p.eval_split("a", "explicit", hat, points))

    if level_adjusted:
        if ops is None or ops.mu is None:
            raise ValueError("level-adjusted weight needs an operator set with "
                             "a resolved implicit floor")
        return WeightSpec(fun=gamma, shift=0.5 * ops.mu, origin="level-adjusted")
    return WeightSpec(fun=gamma, origin="splitting")


# ---------------------------------------------------------------------------
# cut-off and projection

def cutoff(w, delta):
    """max(w - delta, 0), applied nodally / pointwise depending on the input.

    Accepts nodal arrays, `SpaceTimeSolution` objects, or callables (the
    callable case shifts function values at evaluation points).
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if isinstance(w, SpaceTimeSolution):
        return SpaceTimeSolution(mesh=w.mesh, grid=w.grid,
                                 values=np.maximum(w.values - delta, 0.0)).freeze()
    if callable(w):
        return lambda *args, **kwargs: np.maximum(w(*args, **kwargs) - delta, 0.0)
    return np.maximum(np.asarray(w, dtype=float) - delta, 0.0)


def _as_time_function(ref):
    if isinstance(ref, SpaceTimeSolution):
        from .mesh import locate_points

        cache = {}

        def evaluate(t, pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            key = pts.tobytes()
            if key not in cache:
                if len(cache) > 8:
                    cache.clear()
                cache[key] = locate_points(ref.mesh, pts)
            cells, bary = cache[key]
            nodal = ref.at_time(t)
            return np.einsum("pj,pj->p", nodal[ref.mesh.cells[cells]], bary)

        return evaluate
    return ref


def project_Q(v_ref, v_num, mesh=None, grid=None):
    """Cut-off projection of a reference function into the discrete space.

    The cut level is the sampled sup distance between reference and numerical
    solution over all nodes and time levels plus three intermediate times per
    step.  Returns ``(projection, delta)``; the projection is non-negative,
    zero on the boundary, and bounded by the numerical solution nodally.
    """
    mesh = mesh if mesh is not None else v_num.mesh
    grid = grid if grid is not None else v_num.grid
    ref = _as_time_function(v_ref)
    times = grid.times()
    nodes = mesh.vertices
    ref_nodal = np.stack([np.asarray(ref(t, nodes), dtype=float) for t in times])
    delta = float(np.abs(ref_nodal - v_num.values).max(initial=0.0))
    h = grid.h
    for k in range(grid.n_steps):
        for frac in MID_STEP_FRACTIONS:
            t = times[k] + frac * h
            num_mid = (1.0 - frac) * v_num.values[k] + frac * v_num.values[k + 1]
            diff = np.abs(np.asarray(ref(t, nodes), dtype=float) - num_mid)
            delta = max(delta, float(diff.max(initial=0.0)))
    values = np.maximum(ref_nodal - delta, 0.0)
    values[:, mesh.interior_count:] = 0.0
    return SpaceTimeSolution(mesh=mesh, grid=grid, values=values).freeze(), delta


# ---------------------------------------------------------------------------
# weighted space-time seminorm

def _cell_weight_integrals(weight, mesh, order=2):
    bary, wq = simplex_quadrature(order, mesh.dim)
    pts = np.einsum("qj,kjd->kqd", bary, mesh.vertices[mesh.cells])
    vals = weight(pts.reshape(-1, mesh.dim)).reshape(pts.shape[0], -1)
    return np.einsum("q,k,kq->k", wq, mesh.cell_volumes, vals)


def _cell_gradients_of(values, mesh, hd):
    """Per-cell constant gradient of a nodal field, shape (n_cells, dim)."""
    return np.einsum("cj,cjd->cd", values[mesh.cells], hd.cell_gradients)


def weighted_h1_seminorm(values, weight, mesh, grid, hd=None, quadrature_order=2):
    """Space-time gradient seminorm with spatial weight.

    ``values`` is an array of nodal vectors per time level (or a
    `SpaceTimeSolution`).  Per level the spatial integral is exact: gradients
    are cellwise constant and the weight is integrated by cellwise quadrature.
    In time the composite trapezium rule over the levels is used, matching
    the affine-in-time evaluation semantics of grid functions.
    """
    if isinstance(values, SpaceTimeSolution):
        values = values.values
    values = np.asarray(values, dtype=float)
    hd = hd if hd is not None else compute_hat_data(mesh)
    gamma_cells = _cell_weight_integrals(weight, mesh, order=quadrature_order)
    n_levels = values.shape[0]
    tau = np.ones(n_levels)
    tau[0] = tau[-1] = 0.5
    h = grid.h
    total = 0.0
    for k in range(n_levels):
        grads = _cell_gradients_of(values[k], mesh, hd)
        total += tau[k] * h * float(np.einsum("c,cd,cd->", gamma_cells, grads, grads))
    return math.sqrt(max(total, 0.0))


def _h1_norm_sq_slice(values, mesh, hd):
    """Exact spatial H1 norm squared of one nodal field (P1)."""
    bary, wq = simplex_quadrature(2, mesh.dim)
    vals_q = np.einsum("qj,cj->cq", bary, values[mesh.cells])
    l2 = float(np.einsum("q,c,cq,cq->", wq, mesh.cell_volumes, vals_q, vals_q))
    grads = _cell_gradients_of(values, mesh, hd)
    h1 = float(np.einsum("c,cd,cd->", mesh.cell_volumes, grads, grads))
    return l2 + h1


# ---------------------------------------------------------------------------
# coercivity

@dataclass
class CoercivityReport:
    lhs: float
    rhs: float
    parts: dict
    margin: float
    passed: bool

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"coercivity {status}: lhs={self.lhs:.6e} rhs={self.rhs:.6e} "
                f"(margin {self.margin})")


def _pairing(ops, u, v):
    n = ops.interior_count
    return float(np.dot(u[:n] * ops.lumped_weights[:n], v[:n]))


def compute_cprime(p, ops, weight):
    """Final-time constant for the coercivity inequality.

    Collects every final-level term the telescoped right-hand side must
    dominate: half the sup of the floored explicit diffusion, the
    interpolation-safety term, the trapezium tail of the weighted gradient
    sum, and the squared drift and explicit-reaction sups scaled by the step.
    Returns (value, parts).
    """
    hat = p.sobolev_control
    if hat is None or ops.mu is None:
        raise ValueError("coercivity constant needs a diagnostics control with "
                         "resolved floors")
    h = ops.h
    K = p.superapprox_constant
    dx = ops.mesh.mesh_size
    spacing = ops.norms.get("sampling_spacing", dx / 4.0)
    nu_exp_max = float(ops.nu_explicit[hat].max()) if ops.nu_explicit[hat].size else 0.0
    a_exp_sup = sampling.sup_norm(
        lambda pts: p.eval_split("a", "explicit", hat, pts), p.box, spacing) + nu_exp_max
    gamma_sup = sampling.sup_norm(weight, p.box, spacing)
    parts = {
        "explicit_diffusion": 0.5 * a_exp_sup,
        "interpolation_safety": 0.5 * K * dx * (ops.norms["sqrt_a_explicit_w1inf"] + 1.0),
        "weighted_tail": h * gamma_sup,
        "drift": 0.5 * h * ops.norms["drift_plus_grad_a_sup"] ** 2,
        "reaction": 0.5 * h * ops.norms["c_explicit_sup"] ** 2,
    }
    return sum(parts.values()), parts


def check_coercivity(ops, values, weight, cprime, grid=None, margin=1.0, control=None):
    """Evaluate both sides of the coercivity inequality for one grid function.

    ``values`` must be non-negative nodal data per time level with zero
    boundary entries.  The left side is the squared weighted gradient
    seminorm; the right side the telescoped operator sum

        sum_k [ h <<E w_{k+1} + I w_k, w_k>> + 1/2 <<dw, dw>> ]
        + 1/2 <<w_0, w_0>> + C' |w_final|_H1^2

    with the diagonal pairing weighted by the hat integrals.
    """
    p = ops.problem
    control = control if control is not None else p.sobolev_control
    if control is None:
        raise ValueError("no diagnostics control designated")
    if isinstance(values, SpaceTimeSolution):
        grid = grid if grid is not None else values.grid
        values = values.values
    if grid is None:
        grid = resolve_time_grid(p, ops)
    values = np.asarray(values, dtype=float)
    if float(values.min(initial=0.0)) < -WEIGHT_TOL:
        raise ValueError(f"field is negative at a node (min {values.min():.3e})")
    mesh = ops.mesh
    hd = ops.hat
    h = grid.h
    E = ops.explicit[control]
    I = ops.implicit[control]
    lhs = weighted_h1_seminorm(values, weight, mesh, grid, hd=hd) ** 2
    op_sum = 0.0
    jump_sum = 0.0
    for k in range(grid.n_steps):
        w_now = values[k]
        w_next = values[k + 1]
        op_sum += h * _pairing(ops, E @ w_next + I @ w_now, w_now)
        dw = w_next - w_now
        jump_sum += 0.5 * _pairing(ops, dw, dw)
    initial = 0.5 * _pairing(ops, values[0], values[0])
    final = cprime * _h1_norm_sq_slice(values[-1], mesh, hd)
    rhs = op_sum + jump_sum + initial + final
    parts = {"operator_sum": op_sum, "jump_sum": jump_sum,
             "initial": initial, "final": final}
    passed = lhs <= margin * rhs + 1e-12 * max(1.0, abs(rhs))
    return CoercivityReport(lhs=lhs, rhs=rhs, parts=parts, margin=margin, passed=passed)


def random_nonneg_field(mesh, grid, rng):
    """Random non-negative grid function with zero boundary values."""
    values = rng.random((grid.n_steps + 1, mesh.n_nodes))
    values[:, mesh.interior_count:] = 0.0
    return values


def coercivity_property_run(p, ops, weight, cprime, grid=None, n_samples=100, seed=0):
    """Seeded randomized check of the coercivity inequality.

    Returns (all_passed, reports).
    """
    grid = grid if grid is not None else resolve_time_grid(p, ops)
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_samples):
        values = random_nonneg_field(ops.mesh, grid, rng)
        reports.append(check_coercivity(ops, values, weight, cprime, grid=grid))
    return all(r.passed for r in reports), reports


def stability_bound_report(p, ops, solution, weight, cprime):
    """Weighted-gradient energy of a solution against its data-side bound.

    Reports lhs = |v|^2 in the weighted seminorm, the bracket
    (T ||f||_L1 + 1) ||v||_sup + C' |v(T)|_H1^2, and their ratio (the
    empirical stability constant; reported, not thresholded).
    """
    hat = p.sobolev_control
    mesh = ops.mesh
    lhs = weighted_h1_seminorm(solution.values, weight, mesh, solution.grid,
                               hd=ops.hat) ** 2
    bary, wq = simplex_quadrature(2, mesh.dim)
    pts = np.einsum("qj,kjd->kqd", bary, mesh.vertices[mesh.cells])
    fvals = np.abs(p.eval_full("f", hat, pts.reshape(-1, mesh.dim))).reshape(pts.shape[0], -1)
    f_l1 = float(np.einsum("q,k,kq->", wq, mesh.cell_volumes, fvals))
    sup_v = float(np.abs(solution.values).max(initial=0.0))
    bracket = (p.horizon * f_l1 + 1.0) * sup_v + cprime * _h1_norm_sq_slice(
        solution.values[-1], mesh, ops.hat)
    ratio = lhs / bracket if bracket > 0 else math.inf
    return {"lhs": lhs, "bracket": bracket, "constant": ratio}


# ---------------------------------------------------------------------------
# weighted-convergence hypotheses audit

@dataclass
class SobolevReport:
    passed: bool
    control: int
    implicit_balance_min: float
    explicit_balance_min: float
    gamma_min: float
    best_domination: float
    spacing: float
    messages: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"weighted-norm hypotheses {status} (control {self.control}): "
                f"implicit balance min {self.implicit_balance_min:.3e}, "
                f"explicit balance min {self.explicit_balance_min:.3e}, "
                f"gamma min {self.gamma_min:.3e}, "
                f"domination C {self.best_domination:.6g}")


def audit_sobolev_conditions(p, control=None, spacing=None, tol=FD_TOL):
    """Audit the splitting hypotheses behind weighted-norm convergence.

    Samples, on a dense grid with central-difference derivatives:
    ``c_imp - (div b_imp + lap a_imp)/2 >= -tol``, the same for the explicit
    parts, ``gamma = a_imp - a_exp >= -tol``, and boundedness of both
    diffusion parts by a multiple of gamma (the best multiple is reported).
    """
    control = control if control is not None else p.sobolev_control
    if control is None:
        raise ValueError("no diagnostics control designated")
    if spacing is None:
        spacing = min(hi - lo for lo, hi in p.box) / 64.0
    axes, points = sampling.box_grid(p.box, spacing)
    messages = []

    def grid_of(key, side):
        return sampling.grid_values(
            lambda pts: p.eval_split(key, side, control, pts), axes, points)

    try:
        balances = {}
        for side in ("implicit", "explicit"):
            a_vals = grid_of("a", side)
            c_vals = grid_of("c", side)
            div_b = sampling.grid_divergence(
                [grid_of(f"b{j + 1}", side) for j in range(p.dim)], axes)
            lap_a = sampling.grid_laplacian(a_vals, axes)
            balances[side] = float((c_vals - 0.5 * (div_b + lap_a)).min())
        a_imp = grid_of("a", "implicit")
        a_exp = grid_of("a", "explicit")
    except EvaluationError as exc:
        return SobolevReport(passed=False, control=control,
                             implicit_balance_min=math.nan,
                             explicit_balance_min=math.nan,
                             gamma_min=math.nan, best_domination=math.nan,
                             spacing=spacing,
                             messages=[f"derivative sampling failed: {exc}"])

    gamma = a_imp - a_exp
    gamma_min = float(gamma.min())
    top = np.maximum(a_imp, a_exp)
    positive = gamma > tol
    best = float((top[positive] / gamma[positive]).max()) if positive.any() else 0.0
    if np.any(top[~positive] > tol):
        best = math.inf
        messages.append("diffusion positive where gamma vanishes; "
                        "no finite domination constant")
    passed = (balances["implicit"] >= -tol and balances["explicit"] >= -tol
              and gamma_min >= -tol and math.isfinite(best))
    if balances["implicit"] < -tol:
        messages.append(f"implicit reaction balance violated: {balances['implicit']:.3e}")
    if balances["explicit"] < -tol:
        messages.append(f"explicit reaction balance violated: {balances['explicit']:.3e}")
    if gamma_min < -tol:
        messages.append(f"gamma negative: {gamma_min:.3e}")
    return SobolevReport(passed=passed, control=control,
                         implicit_balance_min=balances["implicit"],
                         explicit_balance_min=balances["explicit"],
                         gamma_min=gamma_min, best_domination=best,
                         spacing=spacing, messages=messages)


# ---------------------------------------------------------------------------
# convergence studies

@dataclass
class ErrorTable:
    """Per-level errors and observed rates (log2 of consecutive ratios)."""

    levels: list
    dx: list
    h: list
    err_sup: list
    err_wh1: list

    def rates(self, key):
        errs = getattr(self, key)
        out = []
        for a, b in zip(errs[:-1], errs[1:]):
            out.append(math.log2(a / b) if a > 0 and b > 0 else math.nan)
        return out

    def to_csv(self, path):
        rate_sup = [""] + [format(r, ".17g") for r in self.rates("err_sup")]
        rate_wh1 = [""] + [format(r, ".17g") for r in self.rates("err_wh1")]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("level,dx,h,err_sup,err_wh1,rate_sup,rate_wh1\n")
            for i in range(len(self.levels)):
                fh.write(f"{self.levels[i]},{format(self.dx[i], '.17g')},"
                         f"{format(self.h[i], '.17g')},"
                         f"{format(self.err_sup[i], '.17g')},"
                         f"{format(self.err_wh1[i], '.17g')},"
                         f"{rate_sup[i]},{rate_wh1[i]}\n")


def solve_on_level(p, level, pattern="acute", quadrature_order=2,
                   override_audits=False):
    """One full pipeline pass: mesh, operators, grid, solution, log."""
    mesh = generate_structured_mesh(p.box, level, pattern)
    hd = compute_hat_data(mesh)
    ops = assemble_operators(p, mesh, hd=hd, quadrature_order=quadrature_order)
    grid = resolve_time_grid(p, ops)
    solution, log = solve(p, ops, grid, override_audits=override_audits)
    return {"mesh": mesh, "hat": hd, "ops": ops, "grid": grid,
            "solution": solution, "log": log}


def _analytic_reference(p):
    expr = p.v_exact

    def ref(t, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        env = {"t": float(t), "T": p.horizon}
        return expr(points, env)

    return ref


def _sup_error(solution, ref):
    grid = solution.grid
    nodes = solution.mesh.vertices
    times = grid.times()
    err = 0.0
    for k, t in enumerate(times):
        diff = np.abs(solution.values[k] - np.asarray(ref(t, nodes), dtype=float))
        err = max(err, float(diff.max(initial=0.0)))
    for k in range(grid.n_steps):
        for frac in MID_STEP_FRACTIONS:
            t = times[k] + frac * grid.h
            num = (1.0 - frac) * solution.values[k] + frac * solution.values[k + 1]
            diff = np.abs(num - np.asarray(ref(t, nodes), dtype=float))
            err = max(err, float(diff.max(initial=0.0)))
    return err


def error_study(p, levels, pattern="acute", reference="auto", mode="interpolant",
                quadrature_order=2, weight=None):
    """Errors of the numerical solutions across refinement levels.

    ``reference`` is ``"auto"`` (use the problem's exact solution when given,
    otherwise solve one level above the finest requested level), an explicit
    callable ``(t, points) -> values``, or a `SpaceTimeSolution`.  The
    weighted gradient error compares against the nodal interpolant of the
    reference (``mode="interpolant"``) or against its cut-off projection
    (``mode="cutoff"``).  The weight defaults to the diagnostics-control
    splitting weight, or to 1 when no diagnostics control is designated.
    """
    levels = list(levels)
    if len(levels) < 2:
        raise ValueError("error study needs at least 2 levels")
    if reference == "auto":
        if p.v_exact is not None:
            ref = _analytic_reference(p)
        else:
            fine = solve_on_level(p, max(levels) + 1, pattern, quadrature_order)
            ref = _as_time_function(fine["solution"])
    else:
        ref = _as_time_function(reference)
    if weight is None:
        if p.sobolev_control is not None:
            weight = weight_from_problem(p)
        else:
            weight = WeightSpec(fun=lambda pts: np.ones(np.atleast_2d(pts).shape[0]),
                                origin="user")

    table = ErrorTable(levels=[], dx=[], h=[], err_sup=[], err_wh1=[])
    for level in levels:
        run = solve_on_level(p, level, pattern, quadrature_order)
        sol = run["solution"]
        mesh, grid = run["mesh"], run["grid"]
        if mode == "cutoff":
            proj, _ = project_Q(ref, sol)
            diff = sol.values - proj.values
        elif mode == "interpolant":
            nodal_ref = np.stack([np.asarray(ref(t, mesh.vertices), dtype=float)
                                  for t in grid.times()])
            nodal_ref[:, mesh.interior_count:] = 0.0
            diff = sol.values - nodal_ref
        else:
            raise ValueError(f"unknown mode {mode!r}")
        table.levels.append(level)
        table.dx.append(mesh.mesh_size)
        table.h.append(grid.h)
        table.err_sup.append(_sup_error(sol, ref))
        table.err_wh1.append(weighted_h1_seminorm(diff, weight, mesh, grid,
                                                  hd=run["hat"]))
    return table
