import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcglab.spectral import (
    SpectralError,
    SpectralMeasure,
    SplitSpectralMeasure,
    SymmetricOperator,
    check_symmetric_operator,
    grade,
    measure_from_operator,
    read_measure_csv,
    symmetric_eigendecompose,
    write_measure_csv,
)
from tcglab.tcg import TcgParams, tcg
from tcglab.experiments import figure2_split


class TestEigendecompose:
    def test_identity(self):
        eig = symmetric_eigendecompose(np.eye(3))
        np.testing.assert_array_equal(eig.eigenvalues, [1, 1, 1])
        Q = eig.eigenvectors
        assert np.abs(Q.T @ Q - np.eye(3)).max() <= 1e-12

    def test_diagonal_sorted(self):
        eig = symmetric_eigendecompose(np.diag([1.0, 3.0]))
        np.testing.assert_allclose(eig.eigenvalues, [3, 1])

    def test_random_reconstruction(self, rng):
        M = rng.standard_normal((50, 50))
        A = M + M.T
        eig = symmetric_eigendecompose(A)
        assert np.abs(eig.reconstruct() - A).max() <= 1e-10 * np.abs(A).max()
        Q = eig.eigenvectors
        assert np.abs(Q.T @ Q - np.eye(50)).max() <= 1e-10
        assert np.all(np.diff(eig.eigenvalues) <= 0)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(SpectralError, match="symmetric"):
            symmetric_eigendecompose(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestOperator:
    def test_symmetry_check(self, rng):
        M = rng.standard_normal((8, 8))
        op = SymmetricOperator.from_matrix(M + M.T)
        assert check_symmetric_operator(op) <= 1e-12

    def test_matrix_free_dense(self):
        op = SymmetricOperator(3, lambda v: 2.0 * v)
        np.testing.assert_allclose(op.dense(), 2 * np.eye(3))
        np.testing.assert_allclose(op @ np.ones(3), [2, 2, 2])


class TestMeasure:
    def test_repeated_eigenvalue_merges(self):
        m = measure_from_operator(np.diag([2.0, 2.0]), [1.0, 1.0])
        assert len(m) == 1
        assert m.eigenvalues[0] == pytest.approx(2.0)
        assert m.weights[0] == pytest.approx(np.sqrt(2))

    def test_zero_weight_retained(self):
        m = measure_from_operator(np.diag([3.0, 1.0]), [1.0, 0.0])
        np.testing.assert_allclose(m.eigenvalues, [3, 1])
        np.testing.assert_allclose(np.abs(m.weights), [1, 0])
        np.testing.assert_array_equal(m.zero_weight_mask(), [False, True])
        assert grade(m, 1e-12) == 1

    def test_grade_examples(self):
        assert grade(SpectralMeasure([1.0], [1.0]), 1e-12) == 1
        assert grade(figure2_split().full()) == 11

    def test_figure2_from_operator(self):
        A, b = figure2_split().full().dense()
        m = measure_from_operator(A, b)
        assert len(m) == 11

    def test_mass_preserved(self, rng):
        M = rng.standard_normal((12, 12))
        b = rng.standard_normal(12)
        m = measure_from_operator(M + M.T, b)
        assert m.total_mass == pytest.approx(b @ b, rel=1e-10)

    def test_orthogonal_invariance(self, rng):
        n = 9
        lam = rng.uniform(-3, 3, n)
        b = rng.standard_normal(n)
        m0 = measure_from_operator(np.diag(lam), b)
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        m1 = measure_from_operator(Q @ np.diag(lam) @ Q.T, Q @ b)
        np.testing.assert_allclose(m1.eigenvalues, m0.eigenvalues, atol=1e-9)
        np.testing.assert_allclose(np.abs(m1.weights), np.abs(m0.weights), atol=1e-9)

    def test_unsorted_rejected(self):
        with pytest.raises(SpectralError):
            SpectralMeasure([1.0, 2.0], [1.0, 1.0])

    def test_split_gap_required(self):
        head = SpectralMeasure([2.0, 1.0], [1.0, 1.0])
        with pytest.raises(SpectralError, match="gap"):
            SplitSpectralMeasure(head, SpectralMeasure([1.0], [0.1]))
        with pytest.raises(SpectralError):
            SplitSpectralMeasure(SpectralMeasure([1.0, -1.0], [1.0, 1.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=15), st.integers(min_value=0, max_value=10**6))
def test_cg_terminates_at_grade(n, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(1.0, 4.0, n)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    b = rng.standard_normal(n)
    ell = grade(measure_from_operator(A, b))
    trace = tcg(A, b, params=TcgParams(mode="plain", max_iterations=ell))
    assert trace.r_norms()[-1] <= 1e-10 * np.linalg.norm(b)


class TestCsv:
    def test_roundtrip(self, tmp_path, rng):
        m = SpectralMeasure.from_unsorted(rng.standard_normal(5), rng.standard_normal(5))
        path = tmp_path / "m.csv"
        write_measure_csv(path, m)
        assert path.read_text().splitlines()[0] == "lambda,weight"
        back = read_measure_csv(path)
        np.testing.assert_array_equal(back.eigenvalues, m.eigenvalues)
        np.testing.assert_array_equal(back.weights, m.weights)

    def test_split_roundtrip(self, tmp_path):
        split = figure2_split()
        path = tmp_path / "s.csv"
        write_measure_csv(path, split)
        back = read_measure_csv(path)
        assert isinstance(back, SplitSpectralMeasure)
        np.testing.assert_array_equal(back.full().eigenvalues, split.full().eigenvalues)
        np.testing.assert_array_equal(back.full().weights, split.full().weights)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("lambda\n1.0\n")
        with pytest.raises(SpectralError, match="missing"):
            read_measure_csv(path)
