"""Control problems: finite control samples, coefficient expressions, splittings.

A problem bundles a finite list of control points, the coefficient family
(diffusion ``a``, drift ``b``, reaction ``c``, running cost ``f``) written as
arithmetic expressions over ``x1..xd`` and the control components
``alpha1..alphaK``, the final-time data, the horizon, and the assignment of
each coefficient to the explicit or implicit half of the time stepping.

Problems are immutable after construction and expression evaluation is pure,
so a loaded problem can be shared between threads.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CoefficientExpr",
    "ControlProblem",
    "ExpressionError",
    "EvaluationError",
    "ProblemFormatError",
    "ValidationReport",
    "Violation",
    "parse_coefficient",
    "parse_problem_text",
    "problem_to_text",
    "load_problem",
    "validate_problem",
]


class ExpressionError(ValueError):
    """Parse failure; carries the offending position in the source text."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvaluationError(ArithmeticError):
    """Raised when evaluation would produce a non-finite value."""


class ProblemFormatError(ValueError):
    """Malformed problem file."""


# ---------------------------------------------------------------------------
# arithmetic expressions
#
# Grammar (standard precedence, ^ and ** are right associative):
#   expr   := term (("+"|"-") term)*
#   term   := factor (("*"|"/") factor)*
#   factor := unary (("^"|"**") factor)?
#   unary  := ("-"|"+")* primary
#   primary:= NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

_FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "sqrt": 1, "abs": 1, "min": -2, "max": -2}
_CONSTANTS = {"pi": math.pi}


class _Node:
    __slots__ = ()


class _Num(_Node):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


class _Var(_Node):
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name


class _Un(_Node):
    __slots__ = ("op", "arg")

    def __init__(self, op, arg):
        self.op = op
        self.arg = arg


class _Bin(_Node):
    __slots__ = ("op", "left", "right")

    def __init__(self, op, left, right):
        self.op = op
        self.left = left
        self.right = right


class _Call(_Node):
    __slots__ = ("name", "args")

    def __init__(self, name, args):
        self.name = name
        self.args = args


def _tokenize(text):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ExpressionError(f"bad number {text[i:j]!r}", i) from None
            tokens.append(("num", value, i))
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
        elif text.startswith("**", i):
            tokens.append(("op", "**", i))
            i += 2
        elif ch in "+-*/^(),":
            tokens.append(("op", ch, i))
            i += 1
        else:
            raise ExpressionError(f"unexpected character {ch!r}", i)
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value):
        kind, val, at = self.next()
        if val != value:
            raise ExpressionError(f"expected {value!r}, found {val!r}", at)

    def parse(self):
        node = self.expr()
        kind, val, at = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected trailing {val!r}", at)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = _Bin(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            node = _Bin(op, node, self.factor())
        return node

    def factor(self):
        node = self.unary()
        if self.peek()[1] in ("^", "**"):
            self.next()
            node = _Bin("^", node, self.factor())
        return node

    def unary(self):
        sign = 1
        while self.peek()[1] in ("+", "-"):
            if self.next()[1] == "-":
                sign = -sign
        node = self.primary()
        return _Un("-", node) if sign < 0 else node

    def primary(self):
        kind, val, at = self.next()
        if kind == "num":
            return _Num(val)
        if kind == "name":
            if self.peek()[1] == "(":
                self.next()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if val not in _FUNCTIONS:
                    raise ExpressionError(f"unknown function {val!r}", at)
                arity = _FUNCTIONS[val]
                if arity >= 0 and len(args) != arity:
                    raise ExpressionError(
                        f"{val} takes {arity} argument(s), got {len(args)}", at)
                if arity == -2 and len(args) < 2:
                    raise ExpressionError(
                        f"{val} takes at least 2 arguments, got {len(args)}", at)
                return _Call(val, args)
            return _Var(val)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected {val!r}", at)


def _collect_vars(node, out):
    if isinstance(node, _Var):
        out.add(node.name)
    elif isinstance(node, _Un):
        _collect_vars(node.arg, out)
    elif isinstance(node, _Bin):
        _collect_vars(node.left, out)
        _collect_vars(node.right, out)
    elif isinstance(node, _Call):
        for a in node.args:
            _collect_vars(a, out)


def _to_text(node):
    if isinstance(node, _Num):
        return format(node.value, ".17g")
    if isinstance(node, _Var):
        return node.name
    if isinstance(node, _Un):
        return f"(-{_to_text(node.arg)})"
    if isinstance(node, _Bin):
        return f"({_to_text(node.left)} {node.op} {_to_text(node.right)})"
    if isinstance(node, _Call):
        return f"{node.name}({', '.join(_to_text(a) for a in node.args)})"
    raise TypeError(node)


def _eval(node, env):
    if isinstance(node, _Num):
        return node.value
    if isinstance(node, _Var):
        return env[node.name]
    if isinstance(node, _Un):
        return -_eval(node.arg, env)
    if isinstance(node, _Bin):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            if np.any(right == 0.0):
                raise EvaluationError("division by zero")
            return left / right
        if node.op == "^":
            with np.errstate(invalid="ignore", divide="ignore"):
                out = np.power(left, right)
            if np.any(~np.isfinite(np.atleast_1d(out))):
                raise EvaluationError("non-finite power (negative base with fractional "
                                      "exponent, or zero with negative exponent)")
            return out
        raise TypeError(node.op)
    if isinstance(node, _Call):
        args = [_eval(a, env) for a in node.args]
        if node.name == "sqrt":
            if np.any(np.atleast_1d(args[0]) < 0.0):
                raise EvaluationError("square root of a negative value")
            return np.sqrt(args[0])
        if node.name == "abs":
            return np.abs(args[0])
        if node.name in ("sin", "cos", "exp"):
            return getattr(np, node.name)(args[0])
        if node.name == "min":
            out = args[0]
            for a in args[1:]:
                out = np.minimum(out, a)
            return out
        if node.name == "max":
            out = args[0]
            for a in args[1:]:
                out = np.maximum(out, a)
            return out
        raise TypeError(node.name)
    raise TypeError(node)


@dataclass(frozen=True)
class CoefficientExpr:
    """Parsed arithmetic expression over points and control components."""

    text: str
    ast: object = field(repr=False, compare=False)
    variables: frozenset = field(compare=False)

    def __call__(self, points, control_env=None):
        """Evaluate at an (n, d) array of points; returns an (n,) array."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        env = dict(_CONSTANTS)
        for axis in range(points.shape[1]):
            env[f"x{axis + 1}"] = points[:, axis]
        if control_env:
            env.update(control_env)
        out = _eval(self.ast, env)
        out = np.broadcast_to(np.asarray(out, dtype=float), (points.shape[0],)).copy()
        if np.any(~np.isfinite(out)):
            raise EvaluationError(f"non-finite value from {self.text!r}")
        return out

    def canonical(self):
        """Deterministic text form; reparsing it gives an equivalent expression."""
        return _to_text(self.ast)


def parse_coefficient(text, dim=2, n_control=0, extra_symbols=()):
    """Parse an expression; identifiers outside the allowed set are rejected.

    Allowed: ``x1..x<dim>``, ``alpha1..alpha<n_control>``, ``pi``, the function
    names, and any names in ``extra_symbols``.
    """
    if not text or not text.strip():
        raise ExpressionError("empty expression", 0)
    ast = _Parser(text).parse()
    seen = set()
    _collect_vars(ast, seen)
    allowed = {f"x{i + 1}" for i in range(dim)}
    allowed |= {f"alpha{i + 1}" for i in range(n_control)}
    allowed |= set(_CONSTANTS) | set(extra_symbols)
    unknown = sorted(seen - allowed)
    if unknown:
        raise ExpressionError(f"unknown identifier {unknown[0]!r}", text.find(unknown[0]))
    return CoefficientExpr(text=text, ast=ast, variables=frozenset(seen))


# ---------------------------------------------------------------------------
# control problems

_COEFF_KEYS = ("a", "b", "c")  # splittable coefficients; b is vector-valued


@dataclass(frozen=True)
class Splitting:
    """Explicit/implicit assignment of one coefficient.

    ``kind`` is ``"explicit"``, ``"implicit"`` or ``"split"``; for ``"split"``
    the two expression parts must sum to the full coefficient, which
    `validate_problem` checks pointwise.
    """

    kind: str
    explicit: object = None  # CoefficientExpr or tuple of them for b
    implicit: object = None


@dataclass(frozen=True)
class ControlProblem:
    """Finite-control Bellman problem on an axis-aligned box.

    ``controls`` lists the sampled control points; coefficient expressions may
    refer to their components as ``alpha1..alphaK``.  ``sobolev_control`` is
    the index of the control singled out for weighted-norm diagnostics (or
    None), ``superapprox_constant`` the interpolation-safety constant used in
    the diffusion floors, ``theta`` the mesh-acuteness margin the problem
    expects, and ``timestep`` the step policy (``"auto"`` or ``"fixed <h>"``).
    """

    name: str
    dim: int
    box: tuple
    horizon: float
    controls: tuple
    a: CoefficientExpr
    b: tuple
    c: CoefficientExpr
    f: CoefficientExpr
    v_final: CoefficientExpr
    splitting: dict
    sobolev_control: int | None = None
    superapprox_constant: float = 1.0
    theta: float = 0.25
    timestep: str = "auto"
    reaction_bound: float | None = None
    v_exact: CoefficientExpr | None = None

    @property
    def n_controls(self):
        return len(self.controls)

    def control_env(self, index):
        return {f"alpha{i + 1}": float(v) for i, v in enumerate(self.controls[index])}

    def eval_full(self, key, index, points):
        """Full coefficient value: key in {"a","c","f","v_final"} or "b<j>"."""
        env = self.control_env(index)
        if key.startswith("b"):
            return self.b[int(key[1:]) - 1](points, env)
        return getattr(self, {"a": "a", "c": "c", "f": "f", "v_final": "v_final"}[key])(points, env)

    def eval_split(self, key, side, index, points):
        """Explicit or implicit part of a splittable coefficient.

        key in {"a", "c", "b1".."bd"}; side in {"explicit", "implicit"}.
        """
        base = key[0]
        spec = self.splitting[base]
        env = self.control_env(index)
        comp = int(key[1:]) - 1 if base == "b" else None
        if spec.kind in ("explicit", "implicit"):
            active = spec.kind == side
            if not active:
                return np.zeros(np.atleast_2d(points).shape[0])
            return self.eval_full(key, index, points)
        part = spec.explicit if side == "explicit" else spec.implicit
        expr = part[comp] if base == "b" else part
        return expr(points, env)

    def time_step_policy(self):
        """('auto', None) or ('fixed', h)."""
        parts = self.timestep.split()
        if parts[0] == "auto":
            return ("auto", None)
        if parts[0] == "fixed" and len(parts) == 2:
            return ("fixed", float(parts[1]))
        raise ProblemFormatError(f"bad timestep policy {self.timestep!r}")


# ---------------------------------------------------------------------------
# problem files (key-value text with sections)

def _split_spec_from_section(section, key, dim, n_control):
    kind = section.get(key, "explicit").strip()
    if kind in ("explicit", "implicit"):
        return Splitting(kind=kind)
    if kind != "split":
        raise ProblemFormatError(f"splitting for {key!r} must be explicit, implicit or split")

    def grab(side):
        if key == "b":
            return tuple(
                parse_coefficient(section[f"b{j + 1}_{side}"], dim, n_control)
                for j in range(dim))
        return parse_coefficient(section[f"{key}_{side}"], dim, n_control)

    try:
        return Splitting(kind="split", explicit=grab("explicit"), implicit=grab("implicit"))
    except KeyError as exc:
        raise ProblemFormatError(f"split coefficient {key!r} needs {exc} entry") from exc


def parse_problem_text(text, name="problem"):
    """Parse the sectioned key-value problem format into a `ControlProblem`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ProblemFormatError(f"problem file parse error: {exc}") from exc

    try:
        prob = cp["problem"]
        dom = cp["domain"]
        ctrl = cp["controls"]
        coeff = cp["coefficients"]
    except KeyError as exc:
        raise ProblemFormatError(f"missing section {exc}") from exc

    try:
        dim = dom.getint("dim", 2)
        box_vals = [float(v) for v in dom["box"].split()]
        if len(box_vals) != 2 * dim:
            raise ProblemFormatError(f"box needs {2 * dim} numbers, got {len(box_vals)}")
        box = tuple((box_vals[2 * i], box_vals[2 * i + 1]) for i in range(dim))

        count = ctrl.getint("count")
        controls = []
        for i in range(count):
            controls.append(tuple(float(v) for v in ctrl[f"control_{i}"].split()))
        n_comp = len(controls[0]) if controls else 0
        if any(len(c) != n_comp for c in controls):
            raise ProblemFormatError("control tuples must all have the same length")

        a = parse_coefficient(coeff["a"], dim, n_comp)
        b = tuple(parse_coefficient(coeff[f"b{j + 1}"], dim, n_comp) for j in range(dim))
        c = parse_coefficient(coeff["c"], dim, n_comp)
        f = parse_coefficient(coeff["f"], dim, n_comp)
        v_final = parse_coefficient(coeff["v_T"], dim, n_comp)

        split_section = cp["splitting"] if cp.has_section("splitting") else {}
        splitting = {key: _split_spec_from_section(split_section, key, dim, n_comp)
                     for key in _COEFF_KEYS}

        alpha_hat = prob.get("alpha_hat", "none").strip()
        sobolev = None if alpha_hat == "none" else int(alpha_hat)
        if sobolev is not None and not (0 <= sobolev < count):
            raise ProblemFormatError(f"alpha_hat index {sobolev} out of range")

        v_exact = None
        if cp.has_section("reference") and cp["reference"].get("v_exact"):
            v_exact = parse_coefficient(
                cp["reference"]["v_exact"], dim, n_comp, extra_symbols=("t", "T"))

        rb = prob.get("reaction_bound", "").strip()
        problem = ControlProblem(
            name=prob.get("name", name),
            dim=dim,
            box=box,
            horizon=prob.getfloat("T"),
            controls=tuple(controls),
            a=a, b=b, c=c, f=f, v_final=v_final,
            splitting=splitting,
            sobolev_control=sobolev,
            superapprox_constant=prob.getfloat("K", 1.0),
            theta=prob.getfloat("theta", 0.25),
            timestep=prob.get("timestep", "auto").strip(),
            reaction_bound=float(rb) if rb else None,
            v_exact=v_exact,
        )
    except ProblemFormatError:
        raise
    except (KeyError, ValueError, ExpressionError) as exc:
        raise ProblemFormatError(f"problem file error: {exc}") from exc
    if problem.horizon <= 0:
        raise ProblemFormatError("horizon T must be positive")
    problem.time_step_policy()  # validate now
    return problem


def problem_to_text(p):
    """Serialize a problem; reparsing the output reproduces the problem."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["problem"] = {
        "name": p.name,
        "T": format(p.horizon, ".17g"),
        "K": format(p.superapprox_constant, ".17g"),
        "theta": format(p.theta, ".17g"),
        "alpha_hat": "none" if p.sobolev_control is None else str(p.sobolev_control),
        "timestep": p.timestep,
    }
    if p.reaction_bound is not None:
        cp["problem"]["reaction_bound"] = format(p.reaction_bound, ".17g")
    cp["domain"] = {
        "dim": str(p.dim),
        "box": " ".join(format(v, ".17g") for pair in p.box for v in pair),
    }
    ctrl = {"count": str(p.n_controls)}
    for i, tup in enumerate(p.controls):
        ctrl[f"control_{i}"] = " ".join(format(v, ".17g") for v in tup)
    cp["controls"] = ctrl
    coeff = {"a": p.a.text, "c": p.c.text, "f": p.f.text, "v_T": p.v_final.text}
    for j, expr in enumerate(p.b):
        coeff[f"b{j + 1}"] = expr.text
    cp["coefficients"] = coeff
    split = {}
    for key in _COEFF_KEYS:
        spec = p.splitting[key]
        split[key] = spec.kind
        if spec.kind == "split":
            if key == "b":
                for j in range(p.dim):
                    split[f"b{j + 1}_explicit"] = spec.explicit[j].text
                    split[f"b{j + 1}_implicit"] = spec.implicit[j].text
            else:
                split[f"{key}_explicit"] = spec.explicit.text
                split[f"{key}_implicit"] = spec.implicit.text
    cp["splitting"] = split
    if p.v_exact is not None:
        cp["reference"] = {"v_exact": p.v_exact.text}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_problem(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_problem_text(fh.read(), name=str(path))


# ---------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Violation:
    kind: str
    control: int | None
    location: tuple
    value: float
    message: str


@dataclass
class ValidationReport:
    passed: bool
    violations: list
    points_checked: int

    def __str__(self):
        if self.passed:
            return f"problem validation PASS ({self.points_checked} points)"
        head = "; ".join(v.message for v in self.violations[:5])
        return (f"problem validation FAIL ({len(self.violations)} violations, "
                f"{self.points_checked} points): {head}")


def _interior_barycentric(dim, count):
    """Deterministic interior sample points of the reference simplex."""
    pts = []
    n = dim + 2
    while len(pts) < count:
        pts = []
        for combo in _compositions(n, dim + 1):
            if all(c >= 1 for c in combo):
                pts.append(tuple(c / n for c in combo))
        n += 1
    return np.asarray(pts[:count], dtype=float)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


SIGN_TOL = 1e-12
SPLIT_TOL = 1e-10
BOUNDARY_DATA_TOL = 1e-10


def validate_problem(p, mesh, samples_per_cell=3):
    """Audit coefficient signs, splitting consistency, and final-data admissibility.

    Checks, at every node plus ``samples_per_cell`` interior points per cell
    and per control: non-negative diffusion and cost, explicit+implicit parts
    summing to the full coefficient within 1e-10, non-negative explicit and
    implicit reaction, non-negative final data vanishing on the boundary.
    Violations are collected into the report, never raised.
    """
    pts = [mesh.vertices]
    if samples_per_cell > 0:
        bary = _interior_barycentric(mesh.dim, samples_per_cell)
        cell_pts = np.einsum("qj,kjd->kqd", bary, mesh.vertices[mesh.cells])
        pts.append(cell_pts.reshape(-1, mesh.dim))
    points = np.vstack(pts)
    violations = []

    def check_sign(values, kind, control, what, tol=SIGN_TOL):
        bad = np.flatnonzero(values < -tol)
        for idx in bad[:20]:
            violations.append(Violation(
                kind=kind, control=control, location=tuple(points[idx]),
                value=float(values[idx]),
                message=f"{what} negative at {tuple(round(x, 6) for x in points[idx])}"
                        f" (control {control}): {values[idx]:.3e}"))

    sup_react = 0.0
    for alpha in range(p.n_controls):
        try:
            a_full = p.eval_full("a", alpha, points)
            f_full = p.eval_full("f", alpha, points)
            check_sign(a_full, "diffusion-sign", alpha, "diffusion a")
            check_sign(f_full, "cost-sign", alpha, "cost f")
            for key, full in (("a", a_full), ("c", p.eval_full("c", alpha, points))):
                expl = p.eval_split(key, "explicit", alpha, points)
                impl = p.eval_split(key, "implicit", alpha, points)
                err = np.max(np.abs(expl + impl - full))
                if err > SPLIT_TOL:
                    violations.append(Violation(
                        kind="splitting", control=alpha, location=(),
                        value=float(err),
                        message=f"splitting of {key!r} inconsistent for control "
                                f"{alpha}: max defect {err:.3e}"))
                if key == "c":
                    check_sign(expl, "reaction-sign", alpha, "explicit reaction")
                    check_sign(impl, "reaction-sign", alpha, "implicit reaction")
                    sup_react = max(sup_react,
                                    float(np.max(expl) + np.max(impl)))
            for j in range(p.dim):
                key = f"b{j + 1}"
                full = p.eval_full(key, alpha, points)
                expl = p.eval_split(key, "explicit", alpha, points)
                impl = p.eval_split(key, "implicit", alpha, points)
                err = np.max(np.abs(expl + impl - full))
                if err > SPLIT_TOL:
                    violations.append(Violation(
                        kind="splitting", control=alpha, location=(),
                        value=float(err),
                        message=f"splitting of {key!r} inconsistent for control "
                                f"{alpha}: max defect {err:.3e}"))
        except EvaluationError as exc:
            violations.append(Violation(
                kind="evaluation", control=alpha, location=(), value=float("nan"),
                message=f"coefficient evaluation failed for control {alpha}: {exc}"))

    if p.reaction_bound is not None and sup_react > p.reaction_bound + SIGN_TOL:
        violations.append(Violation(
            kind="reaction-bound", control=None, location=(), value=sup_react,
            message=f"reaction sup-norm {sup_react:.3e} exceeds declared bound "
                    f"{p.reaction_bound:.3e}"))

    vT = p.v_final(points)
    check_sign(vT, "final-data-sign", None, "final data v_T")
    vT_nodes = p.v_final(mesh.vertices)
    for node in range(mesh.interior_count, mesh.n_nodes):
        if abs(vT_nodes[node]) > BOUNDARY_DATA_TOL:
            violations.append(Violation(
                kind="final-data-boundary", control=None,
                location=tuple(mesh.vertices[node]), value=float(vT_nodes[node]),
                message=f"final data nonzero on boundary node {node}: "
                        f"{vT_nodes[node]:.3e}"))

    return ValidationReport(passed=not violations, violations=violations,
                            points_checked=points.shape[0] * max(p.n_controls, 1))
