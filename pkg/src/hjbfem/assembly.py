"""Per-control discrete operators with artificial-diffusion stabilization.

For each control the scheme uses two operator matrices acting on nodal
vectors: an explicit one applied at the later time level and an implicit one
at the earlier level.  Row ``l`` of either matrix is

    a(y_l) <grad w, grad phi_hat_l>  +  <b . grad w + c w, phi_hat_l>

where ``phi_hat_l`` is the hat function scaled to unit integral and the
diffusion coefficient is sampled at the row node, not integrated.  The
diffusion values carry additive floors derived from the drift and reaction
sizes on the cells around each node; on strictly acute meshes these floors
force all off-diagonal entries to be non-positive, which the monotonicity
module audits rather than assumes.

The designated diagnostics control additionally receives a single scalar
implicit-diffusion floor (resolved by a small fixed-point iteration, since
the floor depends on norms of the floored coefficient itself) and an enlarged
implicit reaction constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import sampling
from .mesh import check_strict_acuteness, compute_hat_data

__all__ = [
    "DiscreteOperatorSet",
    "AssemblyError",
    "FloorResult",
    "simplex_quadrature",
    "compute_artificial_diffusion",
    "apply_diffusion_floors",
    "assemble_operators",
    "h_max_from_operators",
    "export_triplets",
    "export_nu_table",
]

SIGN_TOL = 1e-12
MU_SLACK = 1e-6
MU_MAX_ITER = 100


class AssemblyError(RuntimeError):
    """Assembly refused or failed (acuteness violation, bad quadrature, ...)."""


# ---------------------------------------------------------------------------
# quadrature on the reference simplex (barycentric points, weights sum to 1)

def _perms3(a):
    return [(1 - 2 * a, a, a), (a, 1 - 2 * a, a), (a, a, 1 - 2 * a)]


_TRI_RULES = {
    1: ([(1 / 3, 1 / 3, 1 / 3)], [1.0]),
    2: ([(0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.5, 0.0, 0.5)], [1 / 3] * 3),
    4: (
        _perms3(0.445948490915965) + _perms3(0.091576213509771),
        [0.223381589678011] * 3 + [0.109951743655322] * 3,
    ),
    5: (
        [(1 / 3, 1 / 3, 1 / 3)]
        + _perms3(0.470142064105115)
        + _perms3(0.101286507323456),
        [0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3,
    ),
}

_TET_A = 0.585410196624969
_TET_B = 0.138196601125011
_TET_RULES = {
    1: ([(0.25, 0.25, 0.25, 0.25)], [1.0]),
    2: (
        [
            (_TET_A, _TET_B, _TET_B, _TET_B),
            (_TET_B, _TET_A, _TET_B, _TET_B),
            (_TET_B, _TET_B, _TET_A, _TET_B),
            (_TET_B, _TET_B, _TET_B, _TET_A),
        ],
        [0.25] * 4,
    ),
}


def simplex_quadrature(order, dim):
    """Positive-weight rule exact for polynomials of degree <= order.

    Orders 3 and 4 on triangles share a degree-4 rule: the degree-3 rule with
    positive weights would need more points anyway, and positive weights keep
    sign-based audits (non-negative loads, row sums) exact.
    """
    if dim == 2:
        table, key = _TRI_RULES, {1: 1, 2: 2, 3: 4, 4: 4, 5: 5}.get(order)
    elif dim == 3:
        table, key = _TET_RULES, {1: 1, 2: 2}.get(order)
    else:
        raise AssemblyError(f"no quadrature for dim {dim}")
    if key is None:
        raise AssemblyError(f"quadrature order {order} unsupported for dim {dim}")
    bary, weights = table[key]
    return np.asarray(bary, dtype=float), np.asarray(weights, dtype=float)


def _cell_quad_points(mesh, bary):
    """Physical quadrature points, shape (n_cells, n_q, dim)."""
    return np.einsum("qj,kjd->kqd", bary, mesh.vertices[mesh.cells])


# ---------------------------------------------------------------------------
# cellwise sup-norm estimates (vertices plus edge midpoints; exact for affine)

def _cell_sample_bary(dim):
    rows = [np.eye(dim + 1)[i] for i in range(dim + 1)]
    for i in range(dim + 1):
        for j in range(i + 1, dim + 1):
            m = np.zeros(dim + 1)
            m[i] = m[j] = 0.5
            rows.append(m)
    return np.asarray(rows)


def _cellwise_linf(p, mesh, side, linf_margin, reaction_offsets):
    """Per cell and control: |b|_K (combined component sup norms) and sup |c|.

    ``side`` selects the explicit or the implicit half of the splitting;
    ``reaction_offsets`` adds a per-control constant to the reaction before
    taking the sup (used for the enlarged implicit reaction).
    """
    bary = _cell_sample_bary(mesh.dim)
    pts = np.einsum("qj,kjd->kqd", bary, mesh.vertices[mesh.cells])
    flat = pts.reshape(-1, mesh.dim)
    n_cells, n_s = pts.shape[0], pts.shape[1]
    b_norm = np.empty((p.n_controls, n_cells))
    c_sup = np.empty((p.n_controls, n_cells))
    for alpha in range(p.n_controls):
        comp_sq = np.zeros(n_cells)
        for j in range(mesh.dim):
            vals = np.abs(p.eval_split(f"b{j + 1}", side, alpha, flat)).reshape(n_cells, n_s)
            comp_sq += vals.max(axis=1) ** 2
        b_norm[alpha] = np.sqrt(comp_sq)
        cv = np.abs(p.eval_split("c", side, alpha, flat) + reaction_offsets[alpha])
        c_sup[alpha] = cv.reshape(n_cells, n_s).max(axis=1)
    return linf_margin * b_norm, linf_margin * c_sup


def _nu_side(p, mesh, hd, side, theta, linf_margin=1.0, reaction_offsets=None):
    """Smallest per-node stabilization parameters for one splitting side.

    For every interior node the parameter is the largest over adjacent cells
    of (|b|_K + dx_K sup|c|_K) / (sin(theta) |grad phi_hat|_K vol(K)).
    """
    if reaction_offsets is None:
        reaction_offsets = np.zeros(p.n_controls)
    b_norm, c_sup = _cellwise_linf(p, mesh, side, linf_margin, reaction_offsets)
    sin_t = math.sin(theta)
    grad_norms = hd.gradient_norms()
    nu = np.zeros((p.n_controls, mesh.interior_count))
    for k in range(mesh.n_cells):
        vol = mesh.cell_volumes[k]
        dxk = mesh.cell_diameters[k]
        numer = b_norm[:, k] + dxk * c_sup[:, k]  # (n_controls,)
        if not numer.any():
            continue
        for j, node in enumerate(mesh.cells[k]):
            if node >= mesh.interior_count:
                continue
            denom = sin_t * (grad_norms[k, j] / hd.l1_norms[node]) * vol
            cand = numer / denom
            np.maximum(nu[:, node], cand, out=nu[:, node])
    return nu


def compute_artificial_diffusion(p, mesh, hd=None, theta=None, linf_margin=1.0):
    """Per-(node, control) diffusion floors for both splitting sides.

    Refuses to proceed when the mesh fails the strict-acuteness audit at the
    problem's margin angle.
    """
    hd = hd if hd is not None else compute_hat_data(mesh)
    theta = p.theta if theta is None else theta
    report = check_strict_acuteness(mesh, theta, hat_data=hd)
    if not report.passed:
        raise AssemblyError(
            f"mesh is not strictly acute at theta={theta:.6g} "
            f"({len(report.violations)} violating pairs, largest admissible "
            f"theta={report.largest_theta:.6g})")
    nu_exp = _nu_side(p, mesh, hd, "explicit", theta, linf_margin)
    nu_imp = _nu_side(p, mesh, hd, "implicit", theta, linf_margin)
    return nu_exp, nu_imp


# ---------------------------------------------------------------------------
# diffusion floors

@dataclass
class FloorResult:
    """Floored nodal diffusion values and the scalar implicit floor.

    ``a_explicit`` / ``a_implicit`` hold the nodal diffusion samples actually
    used in assembly (splitting value plus floor, the minimal admissible
    choice).  ``c_implicit_offset`` is the constant added to the implicit
    reaction of the diagnostics control; ``mu`` its scalar implicit floor.
    ``norms`` records every sampled norm estimate that entered the formulas.
    """

    a_explicit: np.ndarray
    a_implicit: np.ndarray
    c_implicit_offset: np.ndarray
    nu_implicit: np.ndarray
    mu: float | None
    norms: dict = field(default_factory=dict)


def _sqrt_fun(fun):
    return lambda pts: np.sqrt(np.clip(fun(pts), 0.0, None))


def apply_diffusion_floors(p, mesh, nu_exp, nu_imp, h, hd=None, linf_margin=1.0):
    """Resolve the nodal diffusion samples from the stabilization parameters.

    For ordinary controls the floors are applied with equality.  For the
    diagnostics control the implicit floor is the scalar ``mu`` solving

        mu >= max(max-node implicit parameter,
                  2 K dx (|sqrt(a_exp)|_W1inf + |sqrt(a_imp)|_W1inf + 2)
                  + h sup|grad(a_exp_split) + b_exp_split|^2)

    by fixed-point iteration (the right-hand side involves the floored
    implicit coefficient itself).  Its implicit reaction gains the constant
    ``K dx (|sqrt(a_exp)|_W1inf + 1) + h sup|c_exp_split|^2``, and the
    implicit stabilization parameter is re-evaluated with that enlarged
    reaction so the sign audits stay valid.

    Norm estimates use dense sampling at a quarter of the mesh size;
    ``sqrt(a_exp)`` is represented continuously as the explicit splitting
    part plus the largest nodal explicit parameter.
    """
    hat = p.sobolev_control
    n_int = mesh.interior_count
    nodes = mesh.vertices[:n_int]
    a_exp = np.empty((p.n_controls, n_int))
    a_imp = np.empty((p.n_controls, n_int))
    c_off = np.zeros(p.n_controls)
    nu_imp = nu_imp.copy()
    for alpha in range(p.n_controls):
        a_exp[alpha] = p.eval_split("a", "explicit", alpha, nodes) + nu_exp[alpha]
        a_imp[alpha] = p.eval_split("a", "implicit", alpha, nodes) + nu_imp[alpha]

    mu = None
    norms = {}
    if hat is not None:
        K = p.superapprox_constant
        dx = mesh.mesh_size
        spacing = dx / 4.0
        env = p.control_env(hat)
        nu_exp_max = float(nu_exp[hat].max()) if nu_exp[hat].size else 0.0

        def a_exp_rep(pts):
            return p.eval_split("a", "explicit", hat, pts) + nu_exp_max

        sqrt_a_exp = sampling.w1inf_norm(_sqrt_fun(a_exp_rep), p.box, spacing)
        c_exp_sup = sampling.sup_norm(
            lambda pts: p.eval_split("c", "explicit", hat, pts), p.box, spacing)
        c_off[hat] = K * dx * (sqrt_a_exp + 1.0) + h * c_exp_sup ** 2

        if hd is None:
            hd = compute_hat_data(mesh)
        offsets = np.zeros(p.n_controls)
        offsets[hat] = c_off[hat]
        nu_imp = _nu_side(p, mesh, hd, "implicit", p.theta, linf_margin, offsets)
        nu_imp_max = float(nu_imp[hat].max()) if nu_imp[hat].size else 0.0

        axes, grid_pts = sampling.box_grid(p.box, spacing)
        a_exp_vals = sampling.grid_values(
            lambda pts: p.eval_split("a", "explicit", hat, pts), axes, grid_pts)
        grads = sampling.grid_gradient(a_exp_vals, axes)
        drift_sq = np.zeros_like(a_exp_vals)
        for j in range(p.dim):
            bj = sampling.grid_values(
                lambda pts, _j=j: p.eval_split(f"b{_j + 1}", "explicit", hat, pts),
                axes, grid_pts)
            drift_sq += (grads[j] + bj) ** 2
        drift_sup = float(np.sqrt(drift_sq.max()))

        def mu_rhs(mu_val):
            sqrt_a_imp = sampling.w1inf_norm(
                _sqrt_fun(lambda pts: p.eval_split("a", "implicit", hat, pts) + mu_val),
                p.box, spacing)
            return max(nu_imp_max,
                       2.0 * K * dx * (sqrt_a_exp + sqrt_a_imp + 2.0) + h * drift_sup ** 2)

        mu = nu_imp_max
        for _ in range(MU_MAX_ITER):
            rhs = mu_rhs(mu)
            if rhs <= mu * (1.0 + MU_SLACK) + 1e-15:
                mu = max(mu, rhs)
                break
            mu = rhs
        else:
            raise AssemblyError(
                f"implicit floor iteration did not settle within {MU_MAX_ITER} "
                f"steps (last value {mu:.6g}); the mesh may be too coarse")

        a_imp[hat] = p.eval_split("a", "implicit", hat, nodes) + mu
        norms = {
            "sampling_spacing": spacing,
            "sqrt_a_explicit_w1inf": sqrt_a_exp,
            "c_explicit_sup": c_exp_sup,
            "drift_plus_grad_a_sup": drift_sup,
            "nu_implicit_max": nu_imp_max,
        }

    return FloorResult(a_explicit=a_exp, a_implicit=a_imp, c_implicit_offset=c_off,
                       nu_implicit=nu_imp, mu=mu, norms=norms)


# ---------------------------------------------------------------------------
# operator assembly

@dataclass
class DiscreteOperatorSet:
    """Sparse operators of one refinement level, immutable after assembly.

    ``explicit[k]`` and ``implicit[k]`` are CSR matrices with one row per
    interior node and one column per node; ``load[k]`` the cost vector of
    control ``k``.  ``lumped_weights`` are the hat integrals used by the
    diagonal pairing.  ``h`` is the time step the implicit reaction constant
    of the diagnostics control was resolved with (None when no such control
    is designated and no step was requested).
    """

    problem: object
    mesh: object
    hat: object
    quadrature_order: int
    theta: float
    explicit: list
    implicit: list
    load: list
    nu_explicit: np.ndarray
    nu_implicit: np.ndarray
    a_explicit_nodes: np.ndarray
    a_implicit_nodes: np.ndarray
    c_implicit_offset: np.ndarray
    mu: float | None
    lumped_weights: np.ndarray
    h: float | None
    norms: dict
    floors_applied: bool

    @property
    def n_controls(self):
        return len(self.explicit)

    @property
    def interior_count(self):
        return self.mesh.interior_count

    def load_sup(self):
        return max(float(np.abs(F).max()) if F.size else 0.0 for F in self.load)


def _assemble_stiffness(mesh, hd):
    n = mesh.n_nodes
    d = mesh.dim
    rows, cols, data = [], [], []
    for k in range(mesh.n_cells):
        g = hd.cell_gradients[k]
        local = mesh.cell_volumes[k] * (g @ g.T)
        cell = mesh.cells[k]
        for i in range(d + 1):
            rows.extend([cell[i]] * (d + 1))
            cols.extend(cell)
            data.extend(local[i])
    S = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    S.sort_indices()
    return S


def _assemble_lower_order(p, mesh, hd, side, alpha, bary, weights, reaction_offset=0.0):
    """Matrix of <b . grad phi_j + c phi_j, phi_i> and vector <f, phi_i>u (unscaled)."""
    d = mesh.dim
    xq = _cell_quad_points(mesh, bary)
    flat = xq.reshape(-1, d)
    n_cells, n_q = xq.shape[0], xq.shape[1]
    bvec = np.empty((n_cells, n_q, d))
    for j in range(d):
        bvec[:, :, j] = p.eval_split(f"b{j + 1}", side, alpha, flat).reshape(n_cells, n_q)
    cvals = p.eval_split("c", side, alpha, flat).reshape(n_cells, n_q) + reaction_offset
    # integrand against column hat j: b . grad phi_j + c phi_j at each point
    term = np.einsum("kqd,kjd->kqj", bvec, hd.cell_gradients)
    term += cvals[:, :, None] * bary[None, :, :]
    local = np.einsum("q,k,kqj,qi->kij", weights, mesh.cell_volumes, term, bary)
    cells = mesh.cells
    rows = np.repeat(cells, d + 1, axis=1).ravel()
    cols = np.tile(cells, (1, d + 1)).ravel()
    M = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    M.sort_indices()
    return M


def _assemble_load(p, mesh, alpha, bary, weights):
    xq = _cell_quad_points(mesh, bary)
    fvals = p.eval_full("f", alpha, xq.reshape(-1, mesh.dim)).reshape(xq.shape[0], -1)
    contrib = np.einsum("q,k,kq,qi->ki", weights, mesh.cell_volumes, fvals, bary)
    F = np.zeros(mesh.n_nodes)
    np.add.at(F, mesh.cells.ravel(), contrib.ravel())
    return F


def h_max_from_operators(explicit_list, tol=SIGN_TOL):
    """Largest step keeping h*E - Id entrywise non-positive, over all controls.

    Positive diagonal entries bound h by their reciprocal; a positive
    off-diagonal entry admits no positive step at all (returns 0); with no
    positive entries there is no restriction (returns inf).
    """
    h_max = math.inf
    for E in explicit_list:
        diag = E.diagonal()
        coo = E.tocoo()
        off = coo.data[(coo.row != coo.col) & (coo.data > tol)]
        if off.size:
            return 0.0
        pos = diag[diag > tol]
        if pos.size:
            h_max = min(h_max, float(1.0 / pos.max()))
    return h_max


def _resolve_step(p, mesh, explicit_list):
    """Step from the problem policy: 'fixed h' or 'auto' (0.9 of the explicit
    bound, capped by the mesh size and the horizon, rounded down to an integer
    step count)."""
    kind, value = p.time_step_policy()
    T = p.horizon
    if kind == "fixed":
        ratio = T / value
        n = round(ratio)
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
            raise AssemblyError(f"fixed step {value} does not divide horizon {T}")
        return T / n
    h_bound = h_max_from_operators(explicit_list)
    if h_bound == 0.0:
        raise AssemblyError("explicit operator has positive off-diagonal entries; "
                            "no stable explicit step exists")
    target = min(0.9 * h_bound, mesh.mesh_size, T)
    n = max(1, int(math.ceil(T / target - 1e-12)))
    return T / n


def assemble_operators(p, mesh, hd=None, quadrature_order=2, h=None, floors=True,
                       linf_margin=1.0):
    """Assemble the full per-control operator set for one refinement level.

    With ``floors=True`` (the default) the stabilization parameters are
    computed (refusing non-acute meshes), the nodal diffusion floors applied,
    and, when the problem designates a diagnostics control, its scalar
    implicit floor and reaction constant resolved with the time step ``h``
    (taken from the problem's step policy when not given).  ``floors=False``
    assembles the raw splitting coefficients; useful to demonstrate how the
    scheme degrades without stabilization.
    """
    hd = hd if hd is not None else compute_hat_data(mesh)
    bary, weights = simplex_quadrature(quadrature_order, mesh.dim)
    n_int = mesh.interior_count
    nodes = mesh.vertices[:n_int]
    S = _assemble_stiffness(mesh, hd)
    S_int = S[:n_int, :]
    w_int = hd.l1_norms[:n_int]
    inv_w = sp.diags(1.0 / w_int)

    if floors:
        nu_exp, nu_imp = compute_artificial_diffusion(p, mesh, hd, linf_margin=linf_margin)
    else:
        nu_exp = np.zeros((p.n_controls, n_int))
        nu_imp = np.zeros((p.n_controls, n_int))

    # explicit operators first: they fix the step bound for the auto policy
    explicit = []
    loads = []
    a_exp_nodes = np.empty((p.n_controls, n_int))
    for alpha in range(p.n_controls):
        a_exp_nodes[alpha] = p.eval_split("a", "explicit", alpha, nodes) + nu_exp[alpha]
        low = _assemble_lower_order(p, mesh, hd, "explicit", alpha, bary, weights)
        E = sp.diags(a_exp_nodes[alpha] / w_int) @ S_int + inv_w @ low[:n_int, :]
        E = E.tocsr()
        E.sort_indices()
        explicit.append(E)
        loads.append(_assemble_load(p, mesh, alpha, bary, weights)[:n_int] / w_int)

    if h is None:
        h = _resolve_step(p, mesh, explicit)

    if floors:
        floor = apply_diffusion_floors(p, mesh, nu_exp, nu_imp, h, hd=hd,
                                       linf_margin=linf_margin)
    else:
        a_imp = np.empty((p.n_controls, n_int))
        for alpha in range(p.n_controls):
            a_imp[alpha] = p.eval_split("a", "implicit", alpha, nodes)
        floor = FloorResult(a_explicit=a_exp_nodes, a_implicit=a_imp,
                            c_implicit_offset=np.zeros(p.n_controls),
                            nu_implicit=nu_imp, mu=None)

    implicit = []
    for alpha in range(p.n_controls):
        low = _assemble_lower_order(p, mesh, hd, "implicit", alpha, bary, weights,
                                    reaction_offset=float(floor.c_implicit_offset[alpha]))
        I = sp.diags(floor.a_implicit[alpha] / w_int) @ S_int + inv_w @ low[:n_int, :]
        I = I.tocsr()
        I.sort_indices()
        implicit.append(I)

    ops = DiscreteOperatorSet(
        problem=p, mesh=mesh, hat=hd, quadrature_order=quadrature_order,
        theta=p.theta, explicit=explicit, implicit=implicit, load=loads,
        nu_explicit=nu_exp, nu_implicit=floor.nu_implicit,
        a_explicit_nodes=floor.a_explicit, a_implicit_nodes=floor.a_implicit,
        c_implicit_offset=floor.c_implicit_offset, mu=floor.mu,
        lumped_weights=hd.l1_norms, h=h, norms=floor.norms, floors_applied=floors,
    )
    for arr in (ops.nu_explicit, ops.nu_implicit, ops.a_explicit_nodes,
                ops.a_implicit_nodes, ops.c_implicit_offset):
        arr.flags.writeable = False
    for F in ops.load:
        F.flags.writeable = False
    return ops


# ---------------------------------------------------------------------------
# exports

def export_triplets(matrix, path):
    """Write a sparse matrix as 'row col value' lines (sorted, reproducible)."""
    coo = matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for idx in order:
            fh.write(f"{coo.row[idx]} {coo.col[idx]} "
                     f"{format(coo.data[idx], '.17g')}\n")


def export_nu_table(ops, path):
    """CSV of the stabilization parameters per node and control."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_index,control_index,nu_explicit,nu_implicit\n")
        for node in range(ops.interior_count):
            for alpha in range(ops.n_controls):
                fh.write(f"{node},{alpha},"
                         f"{format(ops.nu_explicit[alpha, node], '.17g')},"
                         f"{format(ops.nu_implicit[alpha, node], '.17g')}\n")
