"""Independent reference implementations used as test oracles.

Everything here recomputes quantities from first principles with code paths
disjoint from the package internals: hat data via 3x3 interpolation solves,
areas via the shoelace formula, dense loop-based assembly, exhaustive
enumeration of per-row control assignments for single steps, and a direct
unweighted space-time gradient norm.
"""

import itertools

import numpy as np

from hjbfem.assembly import simplex_quadrature


def hat_coefficients(tri):
    """Affine coefficients (c0, cx, cy) of each hat on one triangle.

    Solves the 3x3 interpolation system per vertex.
    """
    n = tri.shape[0]
    M = np.column_stack([np.ones(n), tri])
    return np.linalg.solve(M, np.eye(n))  # column j: coefficients of hat j


def hat_gradients(tri):
    return hat_coefficients(tri)[1:, :].T  # row j: gradient of hat j


def shoelace_area(tri):
    (x1, y1), (x2, y2), (x3, y3) = tri
    return 0.5 * abs(x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2))


def hat_l1_norms(mesh):
    out = np.zeros(mesh.n_nodes)
    for cell in mesh.cells:
        area = shoelace_area(mesh.vertices[cell])
        for v in cell:
            out[v] += area / 3.0
    return out


def dense_assembly(p, mesh, side, alpha, a_nodes, quadrature_order=2,
                   reaction_offset=0.0):
    """Dense (interior x all-nodes) operator matrix and load vector.

    ``a_nodes`` are the nodal diffusion samples actually used (floors
    applied); the lower-order terms use the raw splitting plus the constant
    reaction offset.  Plain per-cell, per-quadrature-point loops.
    """
    n_int = mesh.interior_count
    A = np.zeros((n_int, mesh.n_nodes))
    F = np.zeros(n_int)
    w = hat_l1_norms(mesh)
    bary, wq = simplex_quadrature(quadrature_order, mesh.dim)
    for cell in mesh.cells:
        tri = mesh.vertices[cell]
        area = shoelace_area(tri)
        coeffs = hat_coefficients(tri)
        grads = coeffs[1:, :].T
        for q in range(len(wq)):
            xq = bary[q] @ tri
            bval = np.array([p.eval_split(f"b{j + 1}", side, alpha, xq[None, :])[0]
                             for j in range(mesh.dim)])
            cval = p.eval_split("c", side, alpha, xq[None, :])[0] + reaction_offset
            fval = p.eval_full("f", alpha, xq[None, :])[0]
            phis = coeffs[0, :] + coeffs[1:, :].T @ xq
            for i_loc, row in enumerate(cell):
                if row >= n_int:
                    continue
                F[row] += wq[q] * area * fval * phis[i_loc] / w[row]
                for j_loc, col in enumerate(cell):
                    low = bval @ grads[j_loc] + cval * phis[j_loc]
                    A[row, col] += wq[q] * area * low * phis[i_loc] / w[row]
        for i_loc, row in enumerate(cell):
            if row >= n_int:
                continue
            for j_loc, col in enumerate(cell):
                A[row, col] += (a_nodes[row] * area
                                * grads[j_loc] @ grads[i_loc] / w[row])
    return A, F


def nu_oracle(p, mesh, side, theta, reaction_offsets=None):
    """Stabilization parameters recomputed node by node from the definition."""
    if reaction_offsets is None:
        reaction_offsets = np.zeros(p.n_controls)
    w = hat_l1_norms(mesh)
    nu = np.zeros((p.n_controls, mesh.interior_count))
    for k, cell in enumerate(mesh.cells):
        tri = mesh.vertices[cell]
        area = shoelace_area(tri)
        grads = hat_gradients(tri)
        dxk = max(np.linalg.norm(tri[i] - tri[j])
                  for i in range(3) for j in range(i + 1, 3))
        samples = [tri[0], tri[1], tri[2],
                   (tri[0] + tri[1]) / 2, (tri[1] + tri[2]) / 2, (tri[0] + tri[2]) / 2]
        samples = np.asarray(samples)
        for alpha in range(p.n_controls):
            comp = 0.0
            for j in range(mesh.dim):
                comp += np.abs(p.eval_split(f"b{j + 1}", side, alpha, samples)).max() ** 2
            bk = np.sqrt(comp)
            ck = np.abs(p.eval_split("c", side, alpha, samples)
                        + reaction_offsets[alpha]).max()
            numer = bk + dxk * ck
            if numer == 0.0:
                continue
            for j_loc, node in enumerate(cell):
                if node >= mesh.interior_count:
                    continue
                grad_hat = np.linalg.norm(grads[j_loc]) / w[node]
                nu[alpha, node] = max(nu[alpha, node],
                                      numer / (np.sin(theta) * grad_hat * area))
    return nu


def enumeration_step(p, ops, h, v_next, tol=1e-11):
    """Exhaustive single backward step: try every per-row control assignment.

    Solves the dense mixed system for each assignment and accepts the first
    solution whose rowwise sup residual vanishes.  Feasible only for tiny
    meshes; the uniqueness of monotone steps makes the accepted solution
    independent of enumeration order.
    """
    n = ops.interior_count
    A = [h * ops.implicit[a].toarray()[:, :n] + np.eye(n)
         for a in range(ops.n_controls)]
    rhs = [v_next[:n] - h * (ops.explicit[a] @ v_next) + h * ops.load[a]
           for a in range(ops.n_controls)]
    scale = max(np.abs(F).max() for F in ops.load) + 1.0
    for sigma in itertools.product(range(ops.n_controls), repeat=n):
        M = np.stack([A[sigma[i]][i] for i in range(n)])
        r = np.array([rhs[sigma[i]][i] for i in range(n)])
        try:
            v = np.linalg.solve(M, r)
        except np.linalg.LinAlgError:
            continue
        residual = np.max([A[a] @ v - rhs[a] for a in range(ops.n_controls)], axis=0)
        if np.abs(residual).max() <= tol * scale:
            full = np.zeros(ops.mesh.n_nodes)
            full[:n] = v
            return full
    raise AssertionError("no control assignment solves the step equation")


def unweighted_h1_reference(values, mesh, grid):
    """Trapezium-in-time, exact-in-space gradient norm with unit weight."""
    total = 0.0
    n_levels = values.shape[0]
    for k in range(n_levels):
        spatial = 0.0
        for cell in mesh.cells:
            tri = mesh.vertices[cell]
            area = shoelace_area(tri)
            grads = hat_gradients(tri)
            g = values[k][cell] @ grads
            spatial += area * (g @ g)
        tau = 0.5 if k in (0, n_levels - 1) else 1.0
        total += tau * grid.h * spatial
    return np.sqrt(total)
