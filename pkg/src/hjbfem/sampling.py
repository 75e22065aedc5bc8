"""Dense-grid sampling and finite-difference estimates of coefficient norms.

The diffusion floors and the weighted-norm audits need sup norms and
derivative sup norms of coefficient expressions.  These are estimated on a
tensor grid over the box (central differences inside, one-sided at the
edges).  Estimates are exact for affine functions and adequate for the smooth
coefficients the audits target; the grid spacing is recorded alongside each
estimate so reports can state how a number was obtained.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "box_grid",
    "grid_values",
    "grid_gradient",
    "grid_divergence",
    "grid_laplacian",
    "sup_norm",
    "w1inf_norm",
]

MAX_GRID_POINTS_PER_AXIS = 513


def box_grid(box, spacing):
    """Tensor grid covering the box with step at most ``spacing`` per axis.

    Returns (axes, points) where ``axes`` is a list of 1-d coordinate arrays
    and ``points`` is the flattened (n, d) array in C order.
    """
    axes = []
    for lo, hi in box:
        n = int(np.ceil((hi - lo) / spacing)) + 1
        n = min(max(n, 5), MAX_GRID_POINTS_PER_AXIS)
        axes.append(np.linspace(lo, hi, n))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    return axes, points


def grid_values(fun, axes, points):
    """Evaluate ``fun`` on the grid, reshaped to the tensor layout."""
    shape = tuple(len(ax) for ax in axes)
    return np.asarray(fun(points), dtype=float).reshape(shape)


def grid_gradient(values, axes):
    """Componentwise np.gradient on the tensor grid; list of arrays."""
    return list(np.gradient(values, *axes, edge_order=2))


def grid_divergence(component_values, axes):
    """Divergence of a vector field given per-component tensor values."""
    out = np.zeros_like(component_values[0])
    for axis, vals in enumerate(component_values):
        out += np.gradient(vals, axes[axis], axis=axis, edge_order=2)
    return out


def grid_laplacian(values, axes):
    out = np.zeros_like(values)
    for axis in range(len(axes)):
        first = np.gradient(values, axes[axis], axis=axis, edge_order=2)
        out += np.gradient(first, axes[axis], axis=axis, edge_order=2)
    return out


def sup_norm(fun, box, spacing):
    axes, points = box_grid(box, spacing)
    return float(np.max(np.abs(fun(points))))


def w1inf_norm(fun, box, spacing):
    """max(sup |g|, sup |grad g|) on the sampling grid.

    The gradient magnitude is the Euclidean norm of the componentwise
    finite-difference gradient.
    """
    axes, points = box_grid(box, spacing)
    values = grid_values(fun, axes, points)
    grads = grid_gradient(values, axes)
    grad_mag = np.sqrt(sum(g * g for g in grads))
    return float(max(np.max(np.abs(values)), np.max(grad_mag)))
