import math

import numpy as np
import pytest

from tcglab.problems import ProblemDefinition, problem_sine_lsq
from tcglab.spectral import SymmetricOperator
from tcglab.tr import (
    RUN_CSV_HEADER,
    ConditionReport,
    TrConfig,
    capture_experiment,
    estimate_order,
    evaluate_conditions,
    tr_minimize,
)


def half_norm(dim=3):
    return ProblemDefinition(
        name="half-norm", dim=dim,
        f=lambda x: 0.5 * float(x @ x),
        grad=lambda x: np.array(x, dtype=float),
        hess=lambda x: SymmetricOperator.from_matrix(np.eye(dim)),
        solution_param=lambda p: np.zeros(dim),
    )


class TestConfig:
    def test_defaults(self):
        c = TrConfig()
        assert c.Delta_0 == c.Delta_bar / 8
        assert c.rho_prime == 0.1

    @pytest.mark.parametrize("kw", [dict(rho_prime=0.3), dict(rho_prime=0.0), dict(Delta_0=20.0),
                                    dict(solver="newton"), dict(Delta_bar=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrConfig(**kw)


class TestLoop:
    def test_quadratic_one_step(self):
        p = half_norm()
        x0 = np.array([1.0, -2.0, 0.5])
        rec = tr_minimize(p, x0, TrConfig(Delta_bar=100.0, Delta_0=100.0))
        it = rec.iterations[0]
        np.testing.assert_allclose(it.step, -x0)
        assert it.rho == pytest.approx(1.0)
        assert rec.status == "converged" and len(rec.iterations) == 1
        np.testing.assert_allclose(rec.x_final, 0, atol=1e-15)

    def test_zero_model_decrease_gives_rho_one(self):
        # a gradient below machine resolution of f: model decrease is treated as zero
        p = ProblemDefinition(
            name="flat", dim=1, f=lambda x: 1.0, grad=lambda x: np.array([1e-20]),
            hess=lambda x: SymmetricOperator.from_matrix(np.eye(1)),
        )
        rec = tr_minimize(p, np.zeros(1), TrConfig(max_outer=1, grad_tol=0.0))
        assert rec.iterations[0].rho == 1.0

    def test_radius_trichotomy_and_acceptance(self):
        p = problem_sine_lsq(20)
        for solver in ("tcg", "exact", "cauchy"):
            cfg = TrConfig(solver=solver, Delta_bar=4.0, max_outer=60)
            rec = tr_minimize(p, p.initial_point(3), cfg)
            its = rec.iterations
            for a, b in zip(its[:-1], its[1:]):
                if a.rho < 0.25:
                    assert b.delta == a.delta / 4
                elif a.rho > 0.75 and a.on_boundary:
                    assert b.delta == min(2 * a.delta, cfg.Delta_bar)
                else:
                    assert b.delta == a.delta
                assert a.accepted == (a.rho > cfg.rho_prime)
                if a.accepted:
                    assert b.f <= a.f
                else:
                    np.testing.assert_array_equal(b.x, a.x)

    def test_sine_n100_converges(self):
        p = problem_sine_lsq(100)
        rec = tr_minimize(p, p.initial_point(0), TrConfig(grad_tol=1e-9))
        assert rec.status == "converged"
        assert len(rec.iterations) <= 50
        rep = evaluate_conditions(rec, p, 0.5)
        assert rep.c0_min >= 0.5 - 1e-10
        assert rep.c2_max_tail <= 1.0
        assert np.all(rep.strong_decrease_margins[-3:] >= 0)
        accepted = [it.rho for it in rec.iterations if it.accepted]
        assert min(accepted[-5:]) >= 0.9

    def test_fd_hessian(self):
        p = problem_sine_lsq(3)
        rec = tr_minimize(p, p.initial_point(1), TrConfig(hessian="fd", grad_tol=1e-8))
        assert rec.status == "converged"
        assert all(math.isfinite(it.beta_H) for it in rec.iterations)

    def test_nonfinite_aborts(self):
        p = ProblemDefinition(
            name="nan", dim=1, f=lambda x: math.nan, grad=lambda x: np.array([1.0]),
            hess=lambda x: SymmetricOperator.from_matrix(np.eye(1)),
        )
        assert tr_minimize(p, np.zeros(1)).status == "nonfinite"

    def test_run_csv(self, tmp_path):
        p = half_norm()
        rec = tr_minimize(p, np.ones(3))
        path = tmp_path / "run.csv"
        rec.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(RUN_CSV_HEADER)
        assert lines[-1].endswith("converged")


class TestOrder:
    def test_linear(self):
        g = 2.0 ** -np.arange(30)
        assert estimate_order(g) == pytest.approx(1.0, abs=0.01)

    def test_quadratic(self):
        g = 2.0 ** -(2.0 ** np.arange(10))
        assert estimate_order(g) == pytest.approx(2.0, abs=0.05)

    def test_too_few_points(self):
        assert estimate_order([1.0, 0.1, 0.01]) is None

    def test_floor_excluded(self):
        g = np.concatenate([2.0 ** -np.arange(41), [1e-16, 1e-16, 1e-16]])
        assert estimate_order(g, grad_tol=1e-12) == pytest.approx(1.0, abs=0.01)


class TestCapture:
    def test_start_on_solution_set(self):
        p = problem_sine_lsq(5)
        center = p.solution_param(np.linspace(-1, 1, 5))
        res = capture_experiment(p, center, 0.0, 1e-1, 3)
        assert res.rate == 1.0
        assert all(t.iterations == 0 for t in res.trials)

    def test_tcg_captures(self):
        p = problem_sine_lsq(10)
        center = p.solution_param(np.linspace(-1.5, 1.5, 10))
        res = capture_experiment(p, center, 1e-2, 1e-1, 5)
        assert res.rate == 1.0

    def test_report_json(self, tmp_path):
        p = half_norm()
        rec = tr_minimize(p, np.ones(3))
        rep = evaluate_conditions(rec, p)
        assert isinstance(rep, ConditionReport)
        path = tmp_path / "c.json"
        rep.to_json(path)
        import json
        data = json.loads(path.read_text())
        assert set(data) == {"c0_min", "c1_max_tail", "c2_max_tail", "order_estimate"}
