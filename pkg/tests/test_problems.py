import math

import numpy as np
import pytest

from tcglab.experiments import figure2_split
from tcglab.problems import (
    SpectralGapError,
    gradient_alignment,
    gradient_check,
    hessian_check,
    hessian_has_negative_eigenvalue_near_S,
    problem_diagonal_quadratic,
    problem_from_name,
    problem_remark_counterexample,
    problem_sine_lsq,
)
from tcglab.spectral import SpectralMeasure, write_measure_csv
from tcglab.tcg import TcgParams, tcg


class TestSine:
    def test_on_solution_set(self, rng):
        p = problem_sine_lsq(4)
        z = p.solution_param(rng.uniform(-2, 2, 4))
        assert p.f(z) == 0
        np.testing.assert_array_equal(p.grad(z), 0)

    def test_closed_form_n1(self):
        p = problem_sine_lsq(1)
        z = np.array([0.0, 1.0])
        assert p.f(z) == pytest.approx(0.5)
        np.testing.assert_allclose(p.grad(z), [-1.0, 1.0])

    def test_hessian_2x2(self):
        p = problem_sine_lsq(1)
        x, y = 0.7, -0.4
        H = p.hess(np.array([x, y])).dense()
        want = np.array([[math.sin(x) * (y - math.sin(x)) + math.cos(x) ** 2, -math.cos(x)],
                         [-math.cos(x), 1.0]])
        np.testing.assert_allclose(H, want)
        # determinant sin(x)(y - sin x)
        assert np.linalg.det(H) == pytest.approx(math.sin(x) * (y - math.sin(x)))

    def test_pl_inequality(self, rng):
        p = problem_sine_lsq(3)
        for z in rng.uniform(-4, 4, (1000, 6)):
            g = p.grad(z)
            assert g @ g >= 2 * p.f(z) - 1e-12

    def test_derivatives(self):
        p = problem_sine_lsq(5)
        assert gradient_check(p) <= 1e-6
        assert hessian_check(p) <= 1e-5

    def test_negative_curvature_witness(self):
        p = problem_sine_lsq(1)
        x = 1.0
        z = np.array([x, math.sin(x) - 1e-3])  # sin(x)(y - sin x) < 0
        assert np.linalg.eigvalsh(p.hess(z).dense()).min() < 0

    def test_negative_curvature_search(self):
        res = hessian_has_negative_eigenvalue_near_S(problem_sine_lsq(100), trials=5)
        assert res.found and res.found_at_all_distances


class TestRemark:
    def test_on_solution_set(self):
        p = problem_remark_counterexample()
        z = p.path(0.0)
        assert p.f(z) == 0
        np.testing.assert_array_equal(p.grad(z), 0)

    def test_hessian_positive_on_path(self):
        p = problem_remark_counterexample()
        for eps in (1e-2, 1e-3, 1e-4):
            H = p.hess(p.path(eps)).dense()
            assert np.linalg.eigvalsh(H).min() > 0
            assert np.linalg.det(H) == pytest.approx(3 * eps**2, rel=1e-6)

    def test_derivatives(self):
        p = problem_remark_counterexample()
        assert gradient_check(p) <= 1e-6
        assert hessian_check(p) <= 1e-5


class TestDiagonal:
    def test_identity_minimizer(self, rng):
        b = rng.standard_normal(4)
        p = problem_diagonal_quadratic(SpectralMeasure(np.ones(4), b))
        np.testing.assert_allclose(p.grad(b), 0)
        np.testing.assert_allclose(p.solution_param(None), b)
        assert not p.unbounded_direction

    def test_unbounded_flag(self):
        p = problem_diagonal_quadratic(SpectralMeasure([2.0, 0.0], [1.0, 0.0]))
        assert p.unbounded_direction

    def test_figure2_trace(self):
        split = figure2_split()
        p = problem_diagonal_quadratic(split.full())
        x0 = np.zeros(p.dim)
        tr = tcg(p.hess(x0), -p.grad(x0), params=TcgParams(mode="plain"))
        ref = tcg(*split.full().dense(), params=TcgParams(mode="plain"))
        np.testing.assert_array_equal(tr.v_norms(), ref.v_norms())
        assert tr.r_norms()[2] <= 2e-3

    def test_convex_has_no_negative_curvature(self):
        p = problem_diagonal_quadratic(SpectralMeasure([3.0, 1.0], [1.0, 1.0]))
        assert not hessian_has_negative_eigenvalue_near_S(p, trials=5).found

    def test_derivatives(self, rng):
        p = problem_diagonal_quadratic(SpectralMeasure([3.0, 1.0, -1.0], [1.0, 0.5, 0.2]))
        assert gradient_check(p) <= 1e-6
        assert hessian_check(p) <= 1e-5


class TestAlignment:
    def test_on_solution_set(self):
        p = problem_sine_lsq(1)
        res, gn = gradient_alignment(p, p.solution_param(np.array([0.3])), 1)
        assert res == 0 and gn == 0

    def test_sine_sweep_bounded(self, rng):
        p = problem_sine_lsq(1)
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4):
            for _ in range(5):
                u = rng.standard_normal(2)
                z = p.solution_param(rng.uniform(-1, 1, 1)) + eps * u / np.linalg.norm(u)
                res, gn = gradient_alignment(p, z, 1)
                ratios.append(res / gn**2)
        assert max(ratios) <= 10.0

    def test_remark_path(self):
        p = problem_remark_counterexample()
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4, 1e-5):
            res, gn = gradient_alignment(p, p.path(eps), 1)
            ratios.append(res / gn**2)
        assert max(ratios) <= 10.0

    def test_no_gap(self):
        p = problem_diagonal_quadratic(SpectralMeasure([1.0, 0.9], [1.0, 1.0]))
        with pytest.raises(SpectralGapError, match="gap"):
            gradient_alignment(p, np.zeros(2), 1)


class TestByName:
    def test_names(self, tmp_path):
        assert problem_from_name("sine-lsq:n=3").dim == 6
        assert problem_from_name("remark2d").dim == 2
        path = tmp_path / "m.csv"
        write_measure_csv(path, SpectralMeasure([2.0, 1.0], [1.0, 1.0]))
        assert problem_from_name(f"diag:file={path}").dim == 2

    @pytest.mark.parametrize("bad", ["nope", "sine-lsq:m=3", "remark2d:x=1", "diag", "sine-lsq:n"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            problem_from_name(bad)
