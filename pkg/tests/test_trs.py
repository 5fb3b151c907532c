import numpy as np
import pytest

from tcglab.tcg import model_value, tcg
from tcglab.trs import kkt_residuals, solve_trs_exact


def trs_instance(rng, kind):
    """Random instance; kind 0 definite, 1 indefinite, 2 hard case, 3 b = 0 indefinite."""
    n = int(rng.integers(1, 9))
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.5, 4.0, n) if kind == 0 else rng.uniform(-3.0, 3.0, n)
    b = rng.standard_normal(n)
    if kind in (2, 3):
        lam[0] = lam.min() - rng.uniform(0.1, 1.0)
        c = Q.T @ b
        c[0] = 0.0
        b = Q @ c if kind == 2 else np.zeros(n)
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T), b, float(10 ** rng.uniform(-1.5, 1.5))


def kkt_ok(A, b, delta, sol):
    k = kkt_residuals(A, b, delta, sol)
    bn = np.linalg.norm(b)
    return (k["stationarity"] <= 1e-8 * max(bn, 1e-300) + (1e-12 * delta if bn == 0 else 0)
            and k["min_eigenvalue"] >= -1e-8
            and k["complementarity"] <= 1e-8 * delta
            and k["excess"] <= 1e-10)


class TestExamples:
    def test_interior(self):
        sol = solve_trs_exact(np.eye(3), np.eye(3)[0], 10.0)
        np.testing.assert_allclose(sol.step, np.eye(3)[0])
        assert sol.multiplier == 0 and not sol.on_boundary

    def test_indefinite_on_boundary(self, rng):
        for _ in range(5):
            b = rng.standard_normal(2)
            sol = solve_trs_exact(np.diag([1.0, -1.0]), b, 2.0)
            assert sol.on_boundary
            assert np.linalg.norm(sol.step) == pytest.approx(2.0, rel=1e-10)

    def test_scalar_clamped(self):
        sol = solve_trs_exact([[2.0]], [10.0], 1.0)
        assert sol.step[0] == pytest.approx(1.0)
        assert sol.multiplier == pytest.approx(8.0, rel=1e-10)

    def test_b_zero(self):
        sol = solve_trs_exact(np.eye(2), np.zeros(2), 1.0)
        np.testing.assert_array_equal(sol.step, 0)
        sol = solve_trs_exact(np.diag([1.0, -2.0]), np.zeros(2), 1.5)
        assert sol.on_boundary and sol.hard_case
        assert np.linalg.norm(sol.step) == pytest.approx(1.5)
        assert sol.multiplier == pytest.approx(2.0)

    def test_hard_case(self):
        A = np.diag([-1.0, 1.0, 2.0])
        b = np.array([0.0, 1.0, 1.0])
        sol = solve_trs_exact(A, b, 5.0)
        assert sol.hard_case and sol.on_boundary
        assert kkt_ok(A, b, 5.0, sol)

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            solve_trs_exact(np.eye(501), np.ones(501), 1.0)


def test_kkt_random(rng):
    for t in range(100):
        A, b, delta = trs_instance(rng, t % 4)
        sol = solve_trs_exact(A, b, delta)
        assert kkt_ok(A, b, delta, sol), (t, kkt_residuals(A, b, delta, sol))


def test_dominates_tcg_and_cauchy(rng):
    for t in range(60):
        A, b, delta = trs_instance(rng, t % 3)
        if not np.any(b):
            continue
        sol = solve_trs_exact(A, b, delta)
        tr = tcg(A, b, delta)
        m_exact = model_value(A, b, sol.step)
        assert m_exact <= model_value(A, b, tr.output) + 1e-10
        bn = np.linalg.norm(b)
        bAb = abs(b @ A @ b)
        cauchy = bn * min(delta, bn**3 / bAb if bAb > 0 else np.inf)
        assert -m_exact >= 0.5 * cauchy - 1e-10
