"""Conforming simplicial P1 meshes and their audit data.

Meshes are stored with interior nodes first: indices ``0 .. interior_count-1``
are strictly inside the domain, the remaining indices lie on the boundary.
All arrays are frozen after construction, so a Mesh and its HatData can be
shared freely between concurrent readers.

Two structured generators are built in for axis-aligned boxes:

* ``crisscross`` -- each grid square split by one diagonal into two right
  triangles.  Cheap and familiar, but it is *not* strictly acute: the two
  hat functions meeting at a right angle have orthogonal gradients.
* ``acute`` -- a 14-triangle pinwheel base layout whose largest angle is
  about 73.3 degrees, refined uniformly by edge midpoints.  Midpoint
  refinement reproduces the parent angles exactly, so the layout stays
  strictly acute at every refinement level (on squares; strongly stretched
  boxes distort the angles, which the acuteness audit will report).

Unstructured meshes can be read from a plain-text file, see `load_mesh`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "HatData",
    "AcutenessReport",
    "MeshError",
    "generate_structured_mesh",
    "mesh_from_arrays",
    "check_strict_acuteness",
    "compute_hat_data",
    "nodal_interpolate",
    "load_mesh",
    "save_mesh",
    "locate_points",
]

BOUNDARY_TOL = 1e-12


class MeshError(ValueError):
    """Raised for invalid mesh input: degenerate cells, bad files, bad patterns."""


@dataclass
class Mesh:
    """Conforming simplicial mesh with interior-first node ordering.

    Attributes
    ----------
    dim : int
        Spatial dimension (2 at desk scale; 3 is accepted by the data model).
    vertices : ndarray, shape (n_nodes, dim)
        Node coordinates.  Interior nodes come first.
    cells : ndarray, shape (n_cells, dim+1)
        Vertex indices of each simplex.
    interior_count : int
        Number of interior nodes; nodes ``>= interior_count`` are on the boundary.
    cell_volumes : ndarray, shape (n_cells,)
        Simplex volumes (areas for dim=2), all positive.
    cell_diameters : ndarray, shape (n_cells,)
        Largest vertex distance per simplex.
    mesh_size : float
        Maximum cell diameter.
    input_permutation : ndarray, shape (n_nodes,)
        ``input_permutation[old] = new``: where each node of the construction
        input ended up after interior-first reordering.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    interior_count: int
    cell_volumes: np.ndarray
    cell_diameters: np.ndarray
    mesh_size: float
    input_permutation: np.ndarray
    _support: list = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def is_boundary(self, node):
        return node >= self.interior_count

    def boundary_nodes(self):
        return np.arange(self.interior_count, self.n_nodes)

    def interior_nodes(self):
        return np.arange(self.interior_count)

    def node_support(self):
        """List of cell-index arrays, one per node (cells having the node as vertex)."""
        if self._support is None:
            supp = [[] for _ in range(self.n_nodes)]
            for k, cell in enumerate(self.cells):
                for v in cell:
                    supp[v].append(k)
            self._support = [np.asarray(s, dtype=int) for s in supp]
        return self._support

    def shape_regularity(self):
        """Largest ratio of cell diameter to inscribed-sphere diameter."""
        worst = 0.0
        for k in range(self.n_cells):
            rho = _inradius(self.vertices[self.cells[k]], self.cell_volumes[k])
            worst = max(worst, self.cell_diameters[k] / (2.0 * rho))
        return worst


def _inradius(simplex, volume):
    # inradius = dim * volume / (sum of facet measures)
    d = simplex.shape[1]
    total = 0.0
    for j in range(d + 1):
        facet = np.delete(simplex, j, axis=0)
        if d == 2:
            total += np.linalg.norm(facet[1] - facet[0])
        elif d == 3:
            total += 0.5 * np.linalg.norm(np.cross(facet[1] - facet[0], facet[2] - facet[0]))
        else:
            raise MeshError(f"inradius not implemented for dim {d}")
    return d * volume / total


def _simplex_geometry(vertices, cells):
    """Volumes and diameters of all simplices; raises on degeneracy."""
    d = vertices.shape[1]
    n_cells = cells.shape[0]
    volumes = np.empty(n_cells)
    diameters = np.empty(n_cells)
    fact = math.factorial(d)
    for k in range(n_cells):
        pts = vertices[cells[k]]
        edges = pts[1:] - pts[0]
        volumes[k] = abs(np.linalg.det(edges)) / fact
        dia = 0.0
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                dia = max(dia, float(np.linalg.norm(pts[i] - pts[j])))
        diameters[k] = dia
    if np.any(volumes <= 0.0) or np.any(~np.isfinite(volumes)):
        bad = int(np.argmin(volumes))
        raise MeshError(f"degenerate cell {bad}: volume {volumes[bad]!r}")
    return volumes, diameters


def _check_conformity(cells, dim):
    """Face-multiplicity check: every (dim-1)-face belongs to at most 2 cells."""
    counts = {}
    for cell in cells:
        for j in range(dim + 1):
            face = tuple(sorted(np.delete(cell, j)))
            counts[face] = counts.get(face, 0) + 1
    for face, cnt in counts.items():
        if cnt > 2:
            raise MeshError(f"non-conforming mesh: face {face} shared by {cnt} cells")


def _finalize(vertices, cells, boundary_mask):
    """Reorder interior-first, orient cells positively, freeze arrays."""
    vertices = np.ascontiguousarray(np.asarray(vertices, dtype=float))
    cells = np.ascontiguousarray(np.asarray(cells, dtype=int))
    boundary_mask = np.asarray(boundary_mask, dtype=bool)
    dim = vertices.shape[1]
    if cells.shape[1] != dim + 1:
        raise MeshError(f"cells must have {dim + 1} vertices in dim {dim}")

    order = np.concatenate([np.flatnonzero(~boundary_mask), np.flatnonzero(boundary_mask)])
    perm = np.empty_like(order)
    perm[order] = np.arange(order.size)
    vertices = vertices[order]
    cells = perm[cells]
    interior_count = int(np.count_nonzero(~boundary_mask))

    # positive orientation
    fact = math.factorial(dim)
    for k in range(cells.shape[0]):
        pts = vertices[cells[k]]
        if np.linalg.det(pts[1:] - pts[0]) < 0:
            cells[k, [0, 1]] = cells[k, [1, 0]]

    volumes, diameters = _simplex_geometry(vertices, cells)
    _check_conformity(cells, dim)
    mesh = Mesh(
        dim=dim,
        vertices=vertices,
        cells=cells,
        interior_count=interior_count,
        cell_volumes=volumes,
        cell_diameters=diameters,
        mesh_size=float(diameters.max()),
        input_permutation=perm,
    )
    for arr in (mesh.vertices, mesh.cells, mesh.cell_volumes, mesh.cell_diameters,
                mesh.input_permutation):
        arr.flags.writeable = False
    return mesh


def _on_box_boundary(points, box):
    mask = np.zeros(points.shape[0], dtype=bool)
    for axis, (lo, hi) in enumerate(box):
        mask |= np.abs(points[:, axis] - lo) <= BOUNDARY_TOL
        mask |= np.abs(points[:, axis] - hi) <= BOUNDARY_TOL
    return mask


# ---------------------------------------------------------------------------
# structured generators

# 14-triangle strictly acute pinwheel on the unit square: 4 corners, one split
# point per edge, and an inner quadrilateral rotated against the box so that
# no two mesh edges meet at a right angle.  Largest angle ~73.31 degrees.
_ACUTE_VERTS = np.array(
    [
        [0.00, 0.00], [0.49, 0.00], [1.00, 0.00], [1.00, 0.50],
        [1.00, 1.00], [0.51, 1.00], [0.00, 1.00], [0.00, 0.50],
        [0.34, 0.32], [0.61, 0.36], [0.66, 0.68], [0.39, 0.64],
    ]
)
_ACUTE_CELLS = np.array(
    [
        [0, 1, 8], [1, 9, 8], [1, 2, 9], [2, 3, 9], [3, 10, 9], [3, 4, 10],
        [4, 5, 10], [5, 11, 10], [5, 6, 11], [6, 7, 11], [7, 8, 11], [7, 0, 8],
        [8, 9, 11], [9, 10, 11],
    ]
)


def _refine_red(vertices, cells):
    """Uniform refinement by edge midpoints; children inherit parent angles."""
    vertices = [tuple(p) for p in vertices]
    index = {p: i for i, p in enumerate(vertices)}
    new_cells = []

    def midpoint(i, j):
        p = tuple(0.5 * (np.asarray(vertices[i]) + np.asarray(vertices[j])))
        if p not in index:
            index[p] = len(vertices)
            vertices.append(p)
        return index[p]

    for (i, j, k) in cells:
        a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        new_cells += [[i, a, c], [a, j, b], [c, b, k], [a, b, c]]
    return np.asarray(vertices, dtype=float), np.asarray(new_cells, dtype=int)


def generate_structured_mesh(box, refinement_level, pattern="crisscross"):
    """Structured triangulation of an axis-aligned box.

    Parameters
    ----------
    box : sequence of (lo, hi) pairs
        One pair per axis; only dim=2 patterns are built in.
    refinement_level : int
        Level >= 0.  The mesh size halves exactly with each level.
    pattern : str
        ``"crisscross"`` (right triangles, one diagonal per grid square) or
        ``"acute"`` (strictly acute pinwheel layout).

    Returns
    -------
    Mesh
    """
    box = [(float(lo), float(hi)) for (lo, hi) in box]
    if refinement_level < 0:
        raise MeshError("refinement_level must be >= 0")
    for lo, hi in box:
        if not hi > lo:
            raise MeshError(f"degenerate domain: side ({lo}, {hi})")
    if len(box) != 2:
        raise MeshError("structured patterns are implemented for dim 2 only")

    if pattern == "crisscross":
        n = 2 ** refinement_level
        xs = np.linspace(box[0][0], box[0][1], n + 1)
        ys = np.linspace(box[1][0], box[1][1], n + 1)
        xx, yy = np.meshgrid(xs, ys, indexing="ij")
        verts = np.column_stack([xx.ravel(), yy.ravel()])
        idx = lambda i, j: i * (n + 1) + j
        cells = []
        for i in range(n):
            for j in range(n):
                v00, v10 = idx(i, j), idx(i + 1, j)
                v01, v11 = idx(i, j + 1), idx(i + 1, j + 1)
                cells.append([v00, v10, v11])
                cells.append([v00, v11, v01])
        cells = np.asarray(cells, dtype=int)
    elif pattern == "acute":
        verts, cells = _ACUTE_VERTS.copy(), _ACUTE_CELLS.copy()
        for _ in range(refinement_level):
            verts, cells = _refine_red(verts, cells)
        # map the unit-square layout onto the requested box
        scaled = np.empty_like(verts)
        for axis, (lo, hi) in enumerate(box):
            scaled[:, axis] = lo + verts[:, axis] * (hi - lo)
        verts = scaled
    else:
        raise MeshError(f"unsupported pattern {pattern!r}")

    return _finalize(verts, cells, _on_box_boundary(verts, box))


def mesh_from_arrays(vertices, cells, boundary_nodes):
    """Build a mesh from raw arrays; nodes are reordered interior-first.

    ``boundary_nodes`` lists the node indices (in the input numbering) that
    lie on the boundary; the permutation applied is kept on the mesh.
    """
    vertices = np.asarray(vertices, dtype=float)
    mask = np.zeros(vertices.shape[0], dtype=bool)
    mask[np.asarray(boundary_nodes, dtype=int)] = True
    return _finalize(vertices, cells, mask)


# ---------------------------------------------------------------------------
# plain-text mesh files
#
# Format: header "d nv nc nb", then nv coordinate lines, then nc cell lines of
# d+1 zero-based vertex indices, then nb boundary node indices (any layout).

def load_mesh(path):
    """Read a mesh from the plain-text format; reorders nodes interior-first.

    The permutation from file order to mesh order is kept in
    ``mesh.input_permutation``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    if len(tokens) < 4:
        raise MeshError(f"{path}: truncated header")
    pos = 0

    def take(n, conv):
        nonlocal pos
        if pos + n > len(tokens):
            raise MeshError(f"{path}: unexpected end of file at token {pos}")
        out = [conv(t) for t in tokens[pos:pos + n]]
        pos += n
        return out

    try:
        d, nv, nc, nb = take(4, int)
        coords = np.asarray(take(nv * d, float), dtype=float).reshape(nv, d)
        cells = np.asarray(take(nc * (d + 1), int), dtype=int).reshape(nc, d + 1)
        bnodes = np.asarray(take(nb, int), dtype=int)
    except ValueError as exc:
        raise MeshError(f"{path}: malformed token near position {pos}: {exc}") from exc
    if pos != len(tokens):
        raise MeshError(f"{path}: {len(tokens) - pos} trailing tokens")
    if cells.size and (cells.min() < 0 or cells.max() >= nv):
        raise MeshError(f"{path}: cell vertex index out of range")
    if bnodes.size and (bnodes.min() < 0 or bnodes.max() >= nv):
        raise MeshError(f"{path}: boundary node index out of range")
    mask = np.zeros(nv, dtype=bool)
    mask[bnodes] = True
    return _finalize(coords, cells, mask)


def save_mesh(mesh, path):
    """Write a mesh in the plain-text format (in the mesh's own node order)."""
    lines = [f"{mesh.dim} {mesh.n_nodes} {mesh.n_cells} {mesh.n_nodes - mesh.interior_count}"]
    for p in mesh.vertices:
        lines.append(" ".join(format(x, ".17g") for x in p))
    for cell in mesh.cells:
        lines.append(" ".join(str(v) for v in cell))
    for b in range(mesh.interior_count, mesh.n_nodes):
        lines.append(str(b))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# hat-function data

@dataclass
class HatData:
    """Geometry of the nodal hat basis.

    Attributes
    ----------
    l1_norms : ndarray, shape (n_nodes,)
        Integral of each hat function over the domain (all positive).
    cell_gradients : ndarray, shape (n_cells, dim+1, dim)
        Constant gradient of the hat of local vertex ``j`` on each cell.
    """

    l1_norms: np.ndarray
    cell_gradients: np.ndarray

    def gradient_norms(self):
        """Euclidean norm of each local hat gradient, shape (n_cells, dim+1)."""
        return np.linalg.norm(self.cell_gradients, axis=2)


def compute_hat_data(mesh):
    """Exact hat gradients per cell and exact hat L1 norms.

    On a simplex the hats are the barycentric coordinates; each integrates to
    volume/(dim+1), so the L1 norm of a hat is the sum of that quantity over
    its support cells.
    """
    d = mesh.dim
    n_cells = mesh.n_cells
    grads = np.empty((n_cells, d + 1, d))
    l1 = np.zeros(mesh.n_nodes)
    for k in range(n_cells):
        pts = mesh.vertices[mesh.cells[k]]
        edges = (pts[1:] - pts[0]).T          # columns x_j - x_0
        inv = np.linalg.inv(edges)
        grads[k, 1:] = inv                    # row j-1 is the gradient of hat j
        grads[k, 0] = -inv.sum(axis=0)
        l1[mesh.cells[k]] += mesh.cell_volumes[k] / (d + 1)
    hd = HatData(l1_norms=l1, cell_gradients=grads)
    hd.l1_norms.flags.writeable = False
    hd.cell_gradients.flags.writeable = False
    return hd


def nodal_interpolate(mesh, f):
    """Evaluate ``f`` at every node.

    ``f`` may take an (n, dim) array of points or a single point.  Raw values
    are returned; callers impose boundary conditions explicitly.
    """
    pts = mesh.vertices
    try:
        values = np.asarray(f(pts), dtype=float)
        if values.shape == (mesh.n_nodes,):
            return values
    except Exception:
        pass
    values = np.array([float(f(p)) for p in pts])
    return values


# ---------------------------------------------------------------------------
# strict acuteness

@dataclass
class AcutenessReport:
    """Result of the strict-acuteness audit.

    ``largest_theta`` is the sharpest admissible margin angle: the audit at
    any smaller positive angle passes.  It is 0 when some hat-gradient pair
    has a non-negative inner product on a shared cell.
    """

    passed: bool
    theta: float
    largest_theta: float
    violations: list
    pairs_checked: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"acuteness {status} at theta={self.theta:.6g} "
                f"(largest admissible theta={self.largest_theta:.6g}, "
                f"{len(self.violations)} violations / {self.pairs_checked} pairs)")


def check_strict_acuteness(mesh, theta, hat_data=None, tol=1e-12):
    """Audit that distinct hat gradients meet at strictly negative angles.

    For every cell and every pair of its vertices the inner product of the two
    hat gradients must be at most ``-sin(theta)`` times the product of their
    norms (up to a relative rounding tolerance, so exact-equality layouts
    pass).  Returns an `AcutenessReport` with the largest admissible margin
    angle and the violating (cell, node, node) triples at the given theta.
    """
    if not (0.0 < theta < math.pi / 2.0):
        raise ValueError(f"theta must lie in (0, pi/2), got {theta}")
    hd = hat_data if hat_data is not None else compute_hat_data(mesh)
    sin_t = math.sin(theta)
    violations = []
    worst_ratio = 1.0  # min over pairs of -cos(angle between gradients)
    pairs = 0
    d = mesh.dim
    for k in range(mesh.n_cells):
        g = hd.cell_gradients[k]
        norms = np.linalg.norm(g, axis=1)
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                pairs += 1
                dot = float(np.dot(g[i], g[j]))
                scale = norms[i] * norms[j]
                ratio = -dot / scale
                worst_ratio = min(worst_ratio, ratio)
                if dot > (tol - sin_t) * scale:
                    violations.append((k, int(mesh.cells[k, i]), int(mesh.cells[k, j])))
    largest = math.asin(min(max(worst_ratio, 0.0), 1.0)) if worst_ratio > 0.0 else 0.0
    return AcutenessReport(
        passed=not violations,
        theta=theta,
        largest_theta=largest,
        violations=violations,
        pairs_checked=pairs,
    )


# ---------------------------------------------------------------------------
# point location (used to evaluate P1 fields at arbitrary points)

def locate_points(mesh, points, tol=1e-10):
    """Find a containing cell and barycentric coordinates for each point.

    Brute-force over cells, adequate at desk scale.  Raises `MeshError` for
    points outside the mesh beyond ``tol``.

    Returns
    -------
    cell_index : ndarray of int, shape (n_points,)
    barycentric : ndarray, shape (n_points, dim+1)
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    cell_idx = np.full(n, -1, dtype=int)
    bary = np.zeros((n, mesh.dim + 1))
    best_defect = np.full(n, np.inf)
    best_bary = np.zeros_like(bary)
    best_cell = np.zeros(n, dtype=int)
    remaining = np.arange(n)
    for k in range(mesh.n_cells):
        if remaining.size == 0:
            break
        pts = mesh.vertices[mesh.cells[k]]
        edges = (pts[1:] - pts[0]).T
        lam = np.linalg.solve(edges, (points[remaining] - pts[0]).T).T
        lam0 = 1.0 - lam.sum(axis=1)
        full = np.column_stack([lam0, lam])
        defect = np.maximum(0.0, -full).max(axis=1)
        improve = defect < best_defect[remaining]
        rows = remaining[improve]
        best_defect[rows] = defect[improve]
        best_bary[rows] = full[improve]
        best_cell[rows] = k
        inside = defect <= tol
        done = remaining[inside]
        cell_idx[done] = k
        bary[done] = full[inside]
        remaining = remaining[~inside]
    if remaining.size:
        # accept the best candidate if it is only marginally outside
        close = best_defect[remaining] <= 1e-8
        rows = remaining[close]
        cell_idx[rows] = best_cell[rows]
        bary[rows] = np.clip(best_bary[rows], 0.0, None)
        bary[rows] /= bary[rows].sum(axis=1, keepdims=True)
        if np.any(~close):
            bad = remaining[~close][0]
            raise MeshError(f"point {points[bad]} lies outside the mesh")
    return cell_idx, bary
