"""Sign audits certifying that the assembled scheme is monotone.

Three conditions are audited per control:

1. every off-diagonal entry of the explicit operator is non-positive;
2. every entry of ``h * E - Id`` is non-positive (``Id`` is the rectangular
   nodal-evaluation identity with ones at the interior diagonal);
3. for the implicit operator, off-diagonal entries are non-positive and every
   interior row sum (boundary columns included) is non-negative.

Condition 3 is a certifiable sufficient condition for the property the scheme
actually needs: whenever a nodal vector ``v`` has a non-positive local
minimum at interior node ``l``, the row ``(I v)_l`` is non-positive.  Sketch:
with non-positive off-diagonals and ``v_j >= v_l`` for all columns in the
row's support, ``(I v)_l = sum_j I_lj v_j <= (sum_j I_lj) v_l <= 0`` since the
row sum is non-negative and ``v_l <= 0``.  A randomized falsification check
of the local-minimum property itself is available as a slow secondary audit.

All audits are read-only and order-normalized: pass/fail and the violation
sets do not depend on the node numbering of the input file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import h_max_from_operators

__all__ = [
    "MonotonicityReport",
    "audit_explicit",
    "audit_implicit",
    "audit_implicit_randomized",
    "compute_h_max",
    "run_audits",
    "export_report",
    "export_violations_csv",
]

SIGN_TOL = 1e-12
DEFAULT_SAFETY = 0.9


@dataclass
class AuditEntry:
    control: int
    row: int
    col: int
    value: float


@dataclass
class MonotonicityReport:
    """Combined audit outcome; ``passed`` requires all three conditions."""

    h: float
    tol: float
    explicit_offdiag_max: list = field(default_factory=list)
    step_matrix_max: list = field(default_factory=list)
    implicit_offdiag_max: list = field(default_factory=list)
    implicit_rowsum_min: list = field(default_factory=list)
    h_max: float = math.inf
    violations: list = field(default_factory=list)
    explicit_ok: bool = True
    step_ok: bool = True
    implicit_ok: bool = True

    @property
    def passed(self):
        return self.explicit_ok and self.step_ok and self.implicit_ok

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"monotonicity {status} at h={self.h:.6g} "
                f"(explicit {'ok' if self.explicit_ok else 'FAIL'}, "
                f"step {'ok' if self.step_ok else 'FAIL'}, "
                f"implicit {'ok' if self.implicit_ok else 'FAIL'}, "
                f"h_max={self.h_max:.6g}, {len(self.violations)} violations)")


def _offdiag_violations(matrix, control, tol):
    coo = matrix.tocoo()
    mask = (coo.row != coo.col) & (coo.data > tol)
    entries = [AuditEntry(control, int(r), int(c), float(v))
               for r, c, v in zip(coo.row[mask], coo.col[mask], coo.data[mask])]
    worst = float(coo.data[coo.row != coo.col].max(initial=-math.inf))
    return entries, worst


def audit_explicit(ops, h, tol=SIGN_TOL):
    """Audit conditions 1 and 2 on the explicit operators at step ``h``.

    Returns a report fragment; failures are report entries, never exceptions.
    """
    report = MonotonicityReport(h=h, tol=tol)
    for alpha, E in enumerate(ops.explicit):
        entries, worst_off = _offdiag_violations(E, alpha, tol)
        report.explicit_offdiag_max.append(worst_off)
        if entries:
            report.explicit_ok = False
            report.violations.extend(entries)
        # entries of h E - Id: only stored entries can be positive
        coo = E.tocoo()
        vals = h * coo.data - (coo.row == coo.col)
        worst = float(vals.max(initial=-1.0))
        report.step_matrix_max.append(worst)
        mask = vals > tol
        if mask.any():
            report.step_ok = False
            report.violations.extend(
                AuditEntry(alpha, int(r), int(c), float(v))
                for r, c, v in zip(coo.row[mask], coo.col[mask], vals[mask]))
    report.violations.sort(key=lambda e: (e.control, e.row, e.col))
    return report


def audit_implicit(ops, tol=SIGN_TOL):
    """Audit the implicit sufficient condition (signs and row sums)."""
    report = MonotonicityReport(h=ops.h if ops.h is not None else 0.0, tol=tol)
    for alpha, I in enumerate(ops.implicit):
        entries, worst_off = _offdiag_violations(I, alpha, tol)
        report.implicit_offdiag_max.append(worst_off)
        if entries:
            report.implicit_ok = False
            report.violations.extend(entries)
        row_sums = np.asarray(I.sum(axis=1)).ravel()
        report.implicit_rowsum_min.append(float(row_sums.min(initial=math.inf)))
        bad = np.flatnonzero(row_sums < -tol)
        if bad.size:
            report.implicit_ok = False
            report.violations.extend(
                AuditEntry(alpha, int(r), -1, float(row_sums[r])) for r in bad)
    report.violations.sort(key=lambda e: (e.control, e.row, e.col))
    return report


def audit_implicit_randomized(ops, n_samples=1000, seed=0, tol=1e-10):
    """Slow falsification audit of the local-minimum property itself.

    Draws random nodal vectors constructed to have a non-positive local
    minimum at a random interior node and checks the implicit row value there.
    Returns (passed, worst_value).
    """
    mesh = ops.mesh
    rng = np.random.default_rng(seed)
    # node adjacency from cells
    neighbors = [set() for _ in range(mesh.n_nodes)]
    for cell in mesh.cells:
        for i in cell:
            neighbors[i].update(int(j) for j in cell if j != i)
    worst = -math.inf
    for _ in range(n_samples):
        node = int(rng.integers(0, mesh.interior_count))
        alpha = int(rng.integers(0, ops.n_controls))
        v = rng.normal(size=mesh.n_nodes)
        v_min = -abs(rng.normal())
        v[node] = v_min
        for nb in neighbors[node]:
            v[nb] = v_min + abs(rng.normal())
        value = float(ops.implicit[alpha][node, :] @ v)
        worst = max(worst, value)
    return worst <= tol, worst


def compute_h_max(ops, policy=None, tol=SIGN_TOL):
    """Largest audited stable step for the explicit operators.

    Returns the exact entrywise bound (inf for fully implicit splittings,
    0 when a positive off-diagonal entry rules out every step).  ``policy``
    may carry a ``safety`` factor applied multiplicatively.
    """
    h_max = h_max_from_operators(ops.explicit, tol=tol)
    safety = getattr(policy, "safety", None)
    if safety is not None and math.isfinite(h_max):
        h_max *= safety
    return h_max


@dataclass
class TimeStepPolicy:
    kind: str = "auto"
    value: float | None = None
    safety: float = DEFAULT_SAFETY


def run_audits(ops, h=None, tol=SIGN_TOL):
    """All three audits plus the step bound, merged into one report."""
    h = h if h is not None else (ops.h if ops.h is not None else 0.0)
    rep_e = audit_explicit(ops, h, tol=tol)
    rep_i = audit_implicit(ops, tol=tol)
    report = MonotonicityReport(
        h=h, tol=tol,
        explicit_offdiag_max=rep_e.explicit_offdiag_max,
        step_matrix_max=rep_e.step_matrix_max,
        implicit_offdiag_max=rep_i.implicit_offdiag_max,
        implicit_rowsum_min=rep_i.implicit_rowsum_min,
        h_max=compute_h_max(ops, tol=tol),
        violations=sorted(rep_e.violations + rep_i.violations,
                          key=lambda e: (e.control, e.row, e.col)),
        explicit_ok=rep_e.explicit_ok,
        step_ok=rep_e.step_ok,
        implicit_ok=rep_i.implicit_ok,
    )
    return report


def export_report(report, path):
    lines = [str(report), f"h_max {format(report.h_max, '.17g')}"]
    for name, vals in (("explicit_offdiag_max", report.explicit_offdiag_max),
                       ("step_matrix_max", report.step_matrix_max),
                       ("implicit_offdiag_max", report.implicit_offdiag_max),
                       ("implicit_rowsum_min", report.implicit_rowsum_min)):
        for alpha, v in enumerate(vals):
            lines.append(f"{name} control {alpha}: {format(v, '.17g')}")
    lines.append(f"violations {len(report.violations)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def export_violations_csv(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("control,row,col,value\n")
        for e in report.violations:
            fh.write(f"{e.control},{e.row},{e.col},{format(e.value, '.17g')}\n")
