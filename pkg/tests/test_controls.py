import numpy as np
import pytest

from hjbfem import generate_structured_mesh, validate_problem
from hjbfem.controls import (EvaluationError, ExpressionError,
                             ProblemFormatError, parse_coefficient,
                             parse_problem_text, problem_to_text)

P = lambda *xy: np.array([xy], dtype=float)


class TestParser:
    def test_constant_zero(self):
        e = parse_coefficient("0")
        assert e(P(0.3, 0.7))[0] == 0.0

    def test_polynomial_value(self):
        e = parse_coefficient("x1*x1 + 2*x2")
        assert e(P(3.0, 1.0))[0] == pytest.approx(11.0)

    def test_max_clamps(self):
        e = parse_coefficient("max(0, 1 - x1)")
        assert e(P(2.0, 0.0))[0] == 0.0
        assert e(P(0.25, 0.0))[0] == pytest.approx(0.75)

    def test_precedence_and_power(self):
        assert parse_coefficient("2+3*4")(P(0, 0))[0] == 14.0
        assert parse_coefficient("2*3^2")(P(0, 0))[0] == 18.0
        assert parse_coefficient("2^3^2")(P(0, 0))[0] == 512.0  # right assoc
        assert parse_coefficient("(2+3)*4")(P(0, 0))[0] == 20.0
        assert parse_coefficient("2**3")(P(0, 0))[0] == 8.0

    def test_unary_minus(self):
        assert parse_coefficient("-x1 + 1")(P(0.25, 0))[0] == pytest.approx(0.75)
        assert parse_coefficient("--2")(P(0, 0))[0] == 2.0

    def test_functions_and_pi(self):
        e = parse_coefficient("sin(pi*x1)*sin(pi*x2)")
        assert e(P(0.5, 0.5))[0] == pytest.approx(1.0)
        assert parse_coefficient("sqrt(abs(-9))")(P(0, 0))[0] == 3.0
        assert parse_coefficient("min(1, 2, -3)")(P(0, 0))[0] == -3.0

    def test_control_symbols(self):
        e = parse_coefficient("alpha1 * x1", n_control=1)
        assert e(P(0.5, 0.0), {"alpha1": 4.0})[0] == 2.0

    def test_syntax_error_carries_position(self):
        with pytest.raises(ExpressionError) as err:
            parse_coefficient("1 + * 2")
        assert err.value.position == 4

    def test_unknown_identifier_rejected(self):
        with pytest.raises(ExpressionError, match="unknown identifier 'y'"):
            parse_coefficient("x1 + y")
        with pytest.raises(ExpressionError, match="alpha1"):
            parse_coefficient("alpha1", n_control=0)
        with pytest.raises(ExpressionError, match="unknown function"):
            parse_coefficient("sinh(x1)")

    def test_arity_mismatch(self):
        with pytest.raises(ExpressionError, match="argument"):
            parse_coefficient("sin(x1, x2)")
        with pytest.raises(ExpressionError, match="at least 2"):
            parse_coefficient("max(x1)")

    def test_empty_rejected(self):
        with pytest.raises(ExpressionError):
            parse_coefficient("   ")

    def test_evaluation_guards(self):
        with pytest.raises(EvaluationError, match="division"):
            parse_coefficient("1/x1")(P(0.0, 0.0))
        with pytest.raises(EvaluationError, match="negative"):
            parse_coefficient("sqrt(x1 - 1)")(P(0.0, 0.0))
        with pytest.raises(EvaluationError):
            parse_coefficient("(x1 - 1)^0.5")(P(0.0, 0.0))

    def test_evaluation_deterministic_and_pure(self):
        e = parse_coefficient("sin(x1) + x2^2")
        pts = np.random.default_rng(0).random((50, 2))
        first = e(pts)
        assert np.array_equal(first, e(pts))

    def test_canonical_round_trip(self):
        texts = ["x1*x1 + 2*x2", "max(0, 1 - x1)", "-x1^2 + sin(pi*x2)/3"]
        pts = np.random.default_rng(1).random((20, 2))
        for text in texts:
            e = parse_coefficient(text)
            e2 = parse_coefficient(e.canonical())
            assert e(pts) == pytest.approx(e2(pts), abs=1e-15)


class TestProblemFiles:
    def test_round_trip_stability_all_builtins(self, problems):
        for name, p in problems.items():
            text = problem_to_text(p)
            again = problem_to_text(parse_problem_text(text))
            assert text == again, name

    def test_missing_section(self):
        with pytest.raises(ProblemFormatError, match="missing section"):
            parse_problem_text("[problem]\nT = 1\n")

    def test_malformed_expression_reported(self, problems):
        text = problem_to_text(problems["HEAT"]).replace("a = 1", "a = 1 +")
        with pytest.raises(ProblemFormatError):
            parse_problem_text(text)

    def test_bad_alpha_hat_rejected(self, problems):
        text = problem_to_text(problems["HEAT"]).replace("alpha_hat = none",
                                                         "alpha_hat = 5")
        with pytest.raises(ProblemFormatError, match="out of range"):
            parse_problem_text(text)

    def test_timestep_policy_parse(self, problems):
        assert problems["HEAT"].time_step_policy() == ("auto", None)
        assert problems["DEGEN2"].time_step_policy() == ("fixed", 0.05)

    def test_split_kind(self):
        text = problem_to_text_with_split()
        p = parse_problem_text(text)
        pts = np.random.default_rng(2).random((10, 2))
        full = p.eval_full("a", 0, pts)
        expl = p.eval_split("a", "explicit", 0, pts)
        impl = p.eval_split("a", "implicit", 0, pts)
        assert full == pytest.approx(expl + impl, abs=1e-15)
        assert np.all(expl == pytest.approx(0.25))


def problem_to_text_with_split():
    return """
[problem]
name = split_demo
T = 0.5
timestep = fixed 0.1

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
a = split
a_explicit = 0.25
a_implicit = 0.75
b = explicit
c = implicit
"""


class TestValidation:
    def test_heat_passes(self, heat):
        mesh = generate_structured_mesh(heat.box, 1, "acute")
        report = validate_problem(heat, mesh)
        assert report.passed
        assert report.points_checked > mesh.n_nodes

    def test_negative_explicit_reaction_flagged(self, heat):
        text = problem_to_text(heat).replace("c = 0", "c = -1")
        p = parse_problem_text(text)
        mesh = generate_structured_mesh(p.box, 1, "acute")
        report = validate_problem(p, mesh)
        assert not report.passed
        assert any("explicit reaction negative" in v.message
                   for v in report.violations)

    def test_two_control_diffusion_sign(self, degen2):
        mesh = generate_structured_mesh(degen2.box, 1, "acute")
        assert validate_problem(degen2, mesh).passed

    def test_boundary_final_data_flagged(self, heat):
        text = problem_to_text(heat).replace("v_T = sin(pi*x1)*sin(pi*x2)",
                                             "v_T = x1")
        p = parse_problem_text(text)
        mesh = generate_structured_mesh(p.box, 1, "acute")
        report = validate_problem(p, mesh)
        assert not report.passed
        assert any(v.kind == "final-data-boundary" for v in report.violations)

    def test_splitting_defect_flagged(self):
        text = problem_to_text_with_split().replace("a_implicit = 0.75",
                                                    "a_implicit = 0.80")
        p = parse_problem_text(text)
        mesh = generate_structured_mesh(p.box, 1, "acute")
        report = validate_problem(p, mesh)
        assert not report.passed
        assert any(v.kind == "splitting" for v in report.violations)

    def test_negative_diffusion_flagged(self, heat):
        text = problem_to_text(heat).replace("a = 1", "a = x1 - 0.5")
        p = parse_problem_text(text)
        mesh = generate_structured_mesh(p.box, 1, "acute")
        report = validate_problem(p, mesh)
        assert not report.passed
        assert any(v.kind == "diffusion-sign" for v in report.violations)

    def test_reaction_bound_checked(self, heat):
        text = problem_to_text(heat).replace("c = 0", "c = 3")
        text = text.replace("[domain]", "reaction_bound = 2\n\n[domain]")
        p = parse_problem_text(text)
        mesh = generate_structured_mesh(p.box, 1, "acute")
        report = validate_problem(p, mesh)
        assert any(v.kind == "reaction-bound" for v in report.violations)
