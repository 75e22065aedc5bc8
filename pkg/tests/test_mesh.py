import math

import numpy as np
import pytest

from hjbfem import (MeshError, check_strict_acuteness, compute_hat_data,
                    generate_structured_mesh, load_mesh, locate_points,
                    mesh_from_arrays, nodal_interpolate, save_mesh)

import oracles

BOX = [(0.0, 1.0), (0.0, 1.0)]


def unit_right_triangle():
    return mesh_from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                            [[0, 1, 2]], [0, 1, 2])


def equilateral_triangle():
    return mesh_from_arrays([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]],
                            [[0, 1, 2]], [0, 1, 2])


class TestGenerators:
    def test_crisscross_level0_direct_construction(self):
        m = generate_structured_mesh(BOX, 0, "crisscross")
        assert m.n_nodes == 4
        assert m.n_cells == 2
        assert m.interior_count == 0  # every node sits on the boundary
        assert m.mesh_size == pytest.approx(math.sqrt(2.0), abs=1e-15)
        # both cells congruent right triangles with legs 1
        for k in range(2):
            tri = m.vertices[m.cells[k]]
            sides = sorted(np.linalg.norm(tri[i] - tri[(i + 1) % 3])
                           for i in range(3))
            assert sides == pytest.approx([1.0, 1.0, math.sqrt(2.0)])

    @pytest.mark.parametrize("pattern", ["crisscross", "acute"])
    def test_mesh_size_halves_per_level(self, pattern):
        sizes = [generate_structured_mesh(BOX, lv, pattern).mesh_size
                 for lv in range(4)]
        for coarse, fine in zip(sizes, sizes[1:]):
            assert fine == pytest.approx(coarse / 2.0, rel=1e-12)

    def test_interior_first_ordering(self):
        for pattern in ("crisscross", "acute"):
            m = generate_structured_mesh(BOX, 2, pattern)
            dist = np.minimum.reduce([
                m.vertices[:, 0], 1.0 - m.vertices[:, 0],
                m.vertices[:, 1], 1.0 - m.vertices[:, 1]])
            assert np.all(dist[:m.interior_count] > 1e-9)
            assert np.all(dist[m.interior_count:] <= 1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(MeshError):
            generate_structured_mesh(BOX, 1, "hexagonal")
        with pytest.raises(MeshError):
            generate_structured_mesh([(0.0, 0.0), (0.0, 1.0)], 1)
        with pytest.raises(MeshError):
            generate_structured_mesh(BOX, -1)

    def test_shape_regularity_reported(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        assert m.shape_regularity() > 1.0

    def test_degenerate_cell_rejected(self):
        with pytest.raises(MeshError, match="degenerate"):
            mesh_from_arrays([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]], [0, 1, 2])


class TestAcuteness:
    def test_right_triangle_fails_for_any_theta(self):
        m = unit_right_triangle()
        for theta in (1e-8, 0.1, 1.0):
            rep = check_strict_acuteness(m, theta)
            assert not rep.passed
            assert rep.largest_theta == 0.0

    def test_equilateral_passes_at_pi_over_6(self):
        m = equilateral_triangle()
        rep = check_strict_acuteness(m, math.pi / 6)
        assert rep.passed
        # oracle: gradients from the interpolation solve; all pairs at -1/2
        grads = oracles.hat_gradients(m.vertices[m.cells[0]])
        for i in range(3):
            for j in range(i + 1, 3):
                cosang = grads[i] @ grads[j] / (
                    np.linalg.norm(grads[i]) * np.linalg.norm(grads[j]))
                assert cosang == pytest.approx(-0.5, abs=1e-12)
                assert cosang <= -math.sin(math.pi / 6) + 1e-12

    def test_strictly_negative_products_pass_as_theta_vanishes(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        rep = check_strict_acuteness(m, 1e-12)
        assert rep.passed

    def test_acute_pattern_all_pairs_negative_level2(self):
        # oracle: exhaustive loop over cells and vertex pairs with gradients
        # recomputed from the 3x3 interpolation system
        m = generate_structured_mesh(BOX, 2, "acute")
        for cell in m.cells:
            grads = oracles.hat_gradients(m.vertices[cell])
            for i in range(3):
                for j in range(i + 1, 3):
                    assert grads[i] @ grads[j] < 0.0
        assert check_strict_acuteness(m, 0.25).passed

    def test_acute_pattern_margin_stable_across_levels(self):
        margins = [check_strict_acuteness(
            generate_structured_mesh(BOX, lv, "acute"), 0.25).largest_theta
            for lv in range(4)]
        assert all(mg > 0.29 for mg in margins)
        assert max(margins) - min(margins) < 1e-9

    def test_crisscross_fails_every_level(self):
        for lv in range(3):
            m = generate_structured_mesh(BOX, lv, "crisscross")
            assert not check_strict_acuteness(m, 1e-10).passed

    def test_theta_domain(self):
        m = unit_right_triangle()
        for theta in (0.0, -0.5, math.pi / 2, 2.0):
            with pytest.raises(ValueError):
                check_strict_acuteness(m, theta)


class TestHatData:
    def test_origin_hat_gradient_on_unit_right_triangle(self):
        m = unit_right_triangle()
        hd = compute_hat_data(m)
        origin_local = int(np.where((m.vertices[m.cells[0]] == 0.0).all(axis=1))[0][0])
        grad = hd.cell_gradients[0, origin_local]
        # oracle: solve the 3x3 affine interpolation system
        expected = oracles.hat_gradients(m.vertices[m.cells[0]])[origin_local]
        assert grad == pytest.approx(expected, abs=1e-14)
        assert grad == pytest.approx([-1.0, -1.0], abs=1e-14)

    def test_gradients_sum_to_zero_everywhere(self):
        m = generate_structured_mesh(BOX, 2, "acute")
        hd = compute_hat_data(m)
        assert np.abs(hd.cell_gradients.sum(axis=1)).max() < 1e-12

    def test_partition_of_unity_values(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        rng = np.random.default_rng(3)
        for cell in m.cells:
            tri = m.vertices[cell]
            coeffs = oracles.hat_coefficients(tri)
            lam = rng.dirichlet(np.ones(3), size=4)
            pts = lam @ tri
            vals = coeffs[0, :] + pts @ coeffs[1:, :]
            assert np.abs(vals.sum(axis=1) - 1.0).max() < 1e-12

    def test_l1_norms_positive_and_match_oracle(self):
        m = generate_structured_mesh(BOX, 2, "acute")
        hd = compute_hat_data(m)
        assert hd.l1_norms.min() > 0.0
        assert hd.l1_norms == pytest.approx(oracles.hat_l1_norms(m), rel=1e-13)

    def test_crisscross_center_node_l1_norm(self):
        # level 1: the single interior node touches 6 of the 8 cells
        m = generate_structured_mesh(BOX, 1, "crisscross")
        hd = compute_hat_data(m)
        assert m.interior_count == 1
        n_adjacent = len(m.node_support()[0])
        assert n_adjacent == 6
        cell_area = 1.0 / 8.0
        assert hd.l1_norms[0] == pytest.approx(n_adjacent * cell_area / 3.0)


class TestInterpolation:
    def test_zero_function(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        assert np.all(nodal_interpolate(m, lambda pts: np.zeros(len(pts))) == 0.0)

    def test_affine_reproduced_exactly(self):
        m = generate_structured_mesh(BOX, 2, "acute")
        vals = nodal_interpolate(m, lambda pts: 3.0 * pts[:, 0] - pts[:, 1] + 0.25)
        exact = 3.0 * m.vertices[:, 0] - m.vertices[:, 1] + 0.25
        assert vals == pytest.approx(exact, abs=1e-14)
        # and the P1 field matches the affine function at interior points
        rng = np.random.default_rng(0)
        pts = rng.random((20, 2))
        cells, bary = locate_points(m, pts)
        field = np.einsum("pj,pj->p", vals[m.cells[cells]], bary)
        assert field == pytest.approx(3.0 * pts[:, 0] - pts[:, 1] + 0.25, abs=1e-12)

    def test_sin_product_matches_pointwise(self):
        m = generate_structured_mesh(BOX, 2, "crisscross")
        f = lambda pts: np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])
        vals = nodal_interpolate(m, f)
        assert vals == pytest.approx(f(m.vertices), abs=1e-15)

    def test_scalar_callable_supported(self):
        m = generate_structured_mesh(BOX, 0, "crisscross")
        vals = nodal_interpolate(m, lambda p: p[0] + p[1])
        assert vals == pytest.approx(m.vertices.sum(axis=1))

    def test_raw_boundary_values_returned(self):
        # interpolation must not zero boundary entries silently
        m = generate_structured_mesh(BOX, 1, "crisscross")
        vals = nodal_interpolate(m, lambda pts: np.ones(len(pts)))
        assert np.all(vals == 1.0)


class TestMeshFiles:
    def test_round_trip(self, tmp_path):
        m = generate_structured_mesh(BOX, 1, "acute")
        path = tmp_path / "mesh.txt"
        save_mesh(m, path)
        m2 = load_mesh(path)
        assert m2.n_nodes == m.n_nodes
        assert m2.interior_count == m.interior_count
        assert m2.mesh_size == pytest.approx(m.mesh_size)
        # geometry is preserved up to the retained permutation
        perm = m2.input_permutation
        assert np.allclose(m2.vertices[perm], m.vertices)

    def test_permutation_reorders_interior_first(self, tmp_path):
        # write a tiny mesh with boundary nodes listed first
        text = "2 5 4 4\n0 0\n1 0\n1 1\n0 1\n0.5 0.5\n" \
               "0 1 4\n1 2 4\n2 3 4\n3 0 4\n0 1 2 3\n"
        path = tmp_path / "square.txt"
        path.write_text(text)
        m = load_mesh(path)
        assert m.interior_count == 1
        assert m.vertices[0] == pytest.approx([0.5, 0.5])
        assert m.input_permutation[4] == 0

    @pytest.mark.parametrize("text", [
        "",                                  # empty
        "2 5 4\n",                           # truncated header
        "2 2 1 0\n0 0\n1 0\n0 1 2\n",        # index out of range
        "2 3 1 0\n0 0\n1 0\n0 1\nnope 1 2\n",  # bad token
        "2 3 1 0\n0 0\n1 0\n0 1\n0 1 2\n7\n",  # trailing tokens
    ])
    def test_malformed_files_rejected(self, tmp_path, text):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(MeshError):
            load_mesh(path)

    def test_nonconforming_rejected(self, tmp_path):
        # three triangles sharing one edge
        text = ("2 5 3 5\n0 0\n1 0\n0 1\n1 1\n-1 1\n"
                "0 1 2\n0 1 3\n0 1 4\n0 1 2 3 4\n")
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(MeshError, match="non-conforming"):
            load_mesh(path)


class TestLocate:
    def test_outside_point_rejected(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        with pytest.raises(MeshError, match="outside"):
            locate_points(m, np.array([[2.0, 2.0]]))

    def test_vertices_locate_to_themselves(self):
        m = generate_structured_mesh(BOX, 1, "acute")
        cells, bary = locate_points(m, m.vertices)
        recon = np.einsum("pjd,pj->pd", m.vertices[m.cells[cells]], bary)
        assert recon == pytest.approx(m.vertices, abs=1e-12)
