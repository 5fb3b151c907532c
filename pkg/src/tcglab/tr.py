"""Trust-region outer loop with pluggable subproblem solvers, and a monitor for
the sufficient-decrease / step-size / model-gradient conditions."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .problems import ProblemDefinition, finite_difference_hessian
from .tcg import TcgParams, tcg
from .trs import solve_trs_exact

SOLVERS = ("tcg", "exact", "cauchy")


class TrSolverError(RuntimeError):
    """Subproblem solver broke down; ``record`` holds the run so far."""

    def __init__(self, message, k, record):
        super().__init__(f"iteration {k}: {message}")
        self.k = k
        self.record = record


@dataclass(frozen=True)
class TrConfig:
    rho_prime: float = 0.1
    Delta_bar: float = 10.0
    Delta_0: Optional[float] = None  # None means Delta_bar / 8
    max_outer: int = 100
    grad_tol: float = 1e-9
    solver: str = "tcg"
    tcg_params: TcgParams = field(default_factory=TcgParams)
    hessian: str = "exact"  # or "fd"

    def __post_init__(self):
        if not 0 < self.rho_prime < 0.25:
            raise ValueError("rho_prime must lie in (0, 1/4)")
        if not self.Delta_bar > 0:
            raise ValueError("Delta_bar must be positive")
        if self.Delta_0 is None:
            object.__setattr__(self, "Delta_0", self.Delta_bar / 8)
        if not 0 < self.Delta_0 <= self.Delta_bar:
            raise ValueError("Delta_0 must lie in (0, Delta_bar]")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.hessian not in ("exact", "fd"):
            raise ValueError("hessian must be 'exact' or 'fd'")
        if self.max_outer < 0:
            raise ValueError("max_outer must be nonnegative")


@dataclass(frozen=True)
class TrIteration:
    k: int
    x: np.ndarray
    delta: float
    grad_norm: float
    f: float
    step: np.ndarray
    step_norm: float
    model_decrease: float
    rho: float
    accepted: bool
    termination: str
    on_boundary: bool
    beta_H: float = math.nan  # ||H_fd - H|| / ||grad|| when a FD Hessian is used


@dataclass
class TrRunRecord:
    iterations: List[TrIteration] = field(default_factory=list)
    status: str = "max_outer"  # converged | max_outer | nonfinite
    x_final: Optional[np.ndarray] = None
    f_final: float = math.nan
    grad_norm_final: float = math.nan
    config: Optional[TrConfig] = None

    @property
    def boundary_steps(self) -> int:
        return sum(it.on_boundary for it in self.iterations)

    def iterate_grad_norms(self) -> np.ndarray:
        """Gradient norms at the distinct iterates x_0, x_1, ... (after accepted steps)."""
        out = []
        for i, it in enumerate(self.iterations):
            if i == 0 or self.iterations[i - 1].accepted:
                out.append(it.grad_norm)
        if self.iterations and self.iterations[-1].accepted or not self.iterations:
            out.append(self.grad_norm_final)
        return np.array(out)

    def to_csv(self, path) -> None:
        write_run_csv(path, self)


def _cauchy_step(H, g, Delta):
    gn = float(np.linalg.norm(g))
    gHg = float(g @ (H @ g))
    t = Delta / gn
    if gHg > 0:
        t = min(t, gn**2 / gHg)
    s = -t * g
    return s, math.isclose(t, Delta / gn, rel_tol=1e-12)


def tr_minimize(problem: ProblemDefinition, x0, config: Optional[TrConfig] = None) -> TrRunRecord:
    """Trust-region minimization of ``problem`` from ``x0``.

    The radius follows ``Delta/4`` if rho < 1/4, ``min(2 Delta, Delta_bar)`` if
    rho > 3/4 and the step is on the boundary, and stays put otherwise. A step
    is accepted when rho > rho_prime.
    """
    config = config or TrConfig()
    x = np.array(x0, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError(f"x0 must have shape ({problem.dim},)")
    Delta = float(config.Delta_0)
    rec = TrRunRecord(config=config)
    fx = problem.f(x)
    g = problem.grad(x)
    for k in range(config.max_outer + 1):
        gn = float(np.linalg.norm(g))
        if not (math.isfinite(fx) and math.isfinite(gn)):
            rec.status = "nonfinite"
            break
        if gn <= config.grad_tol:
            rec.status = "converged"
            break
        if k == config.max_outer:
            rec.status = "max_outer"
            break
        H = problem.hess(x)
        beta_H = math.nan
        if config.hessian == "fd":
            H_fd = finite_difference_hessian(problem, x)
            beta_H = float(np.linalg.norm(H_fd.dense() - H.dense(), 2)) / gn
            H = H_fd
        if config.solver == "tcg":
            trace = tcg(H, -g, Delta, config.tcg_params)
            if trace.breakdown:
                raise TrSolverError("tCG breakdown", k, rec)
            s = trace.output
            term = trace.termination
            boundary = trace.on_boundary
        elif config.solver == "exact":
            sol = solve_trs_exact(H, -g, Delta)
            s = sol.step
            term = "exact_hard_case" if sol.hard_case else (
                "exact_boundary" if sol.on_boundary else "exact_interior")
            boundary = sol.on_boundary
        else:
            s, boundary = _cauchy_step(H, g, Delta)
            term = "cauchy_boundary" if boundary else "cauchy_interior"
        sn = float(np.linalg.norm(s))
        boundary = boundary or math.isclose(sn, Delta, rel_tol=1e-12)
        md = -float(g @ s + 0.5 * s @ (H @ s))
        x_trial = x + s
        f_trial = problem.f(x_trial)
        if abs(md) <= 1e-15 * abs(fx) or md == 0.0:
            rho = 1.0
        elif not math.isfinite(f_trial):
            rho = -math.inf
        else:
            rho = (fx - f_trial) / md
        accepted = rho > config.rho_prime
        rec.iterations.append(
            TrIteration(k, x.copy(), Delta, gn, fx, s, sn, md, rho, accepted, term, boundary, beta_H)
        )
        if rho < 0.25:
            Delta = Delta / 4
        elif rho > 0.75 and boundary:
            Delta = min(2 * Delta, config.Delta_bar)
        if accepted:
            x = x_trial
            fx = f_trial
            g = problem.grad(x)
    rec.x_final = x
    rec.f_final = float(fx)
    rec.grad_norm_final = float(np.linalg.norm(g))
    return rec


# --- conditions ----------------------------------------------------------------

def estimate_order(g, grad_tol: float = 0.0, tail_fraction: float = 0.5) -> Optional[float]:
    """Least-squares slope of ``log g_{k+1}`` against ``log g_k``.

    Uses the final ``tail_fraction`` of the consecutive pairs whose ``g_k``
    exceeds ``100 * grad_tol`` (and whose successor is positive). Returns None
    with fewer than 4 pairs.
    """
    g = np.asarray(g, dtype=float)
    pairs = [(a, b) for a, b in zip(g[:-1], g[1:]) if a > 100 * grad_tol and a > 0 and b > 0]
    if not pairs:
        return None
    keep = max(1, math.ceil(tail_fraction * len(pairs)))
    pairs = pairs[-keep:]
    if len(pairs) < 4:
        return None
    X = np.log([p[0] for p in pairs])
    Y = np.log([p[1] for p in pairs])
    slope = np.polyfit(X, Y, 1)[0]
    return float(slope)


@dataclass
class ConditionReport:
    c0_ratios: np.ndarray
    c1_estimates: np.ndarray
    c2_estimates: np.ndarray
    strong_decrease_margins: np.ndarray
    order_estimate: Optional[float]
    tail_start: int
    lambda_sharp: float
    c1_constant: float

    @property
    def c0_min(self) -> float:
        return float(self.c0_ratios.min()) if self.c0_ratios.size else math.nan

    @property
    def c1_max_tail(self) -> float:
        tail = self.c1_estimates[self.tail_start:]
        return float(tail.max()) if tail.size else math.nan

    @property
    def c2_max_tail(self) -> float:
        tail = self.c2_estimates[self.tail_start:]
        return float(tail.max()) if tail.size else math.nan

    def to_dict(self) -> dict:
        return dict(
            c0_min=self.c0_min,
            c1_max_tail=self.c1_max_tail,
            c2_max_tail=self.c2_max_tail,
            order_estimate=self.order_estimate,
        )

    def to_json(self, path, extra: Optional[dict] = None) -> None:
        data = self.to_dict()
        data.update(extra or {})
        with open(path, "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def evaluate_conditions(
    record: TrRunRecord,
    problem: ProblemDefinition,
    theta: float = 0.5,
    tail_fraction: float = 0.5,
) -> ConditionReport:
    """Measure the decrease and step conditions along a completed run.

    ``c0_ratios`` compare each model decrease with the Cauchy decrease scale
    ``||g|| min(Delta, ||g||^3 / |g^T H g|)``. ``c1_estimates`` are
    ``||s_k|| / ||g_k||`` and ``c2_estimates`` are ``||g_k + H_k s_k|| / ||g_k||^(1+theta)``.
    """
    cfg = record.config or TrConfig()
    its = [it for it in record.iterations if it.grad_norm > cfg.grad_tol]
    c0, c1, c2 = [], [], []
    hnorm = 0.0
    for it in its:
        H = problem.hess(it.x)
        g = problem.grad(it.x)
        gHg = abs(float(g @ (H @ g)))
        cauchy = it.grad_norm**3 / gHg if gHg > 0 else math.inf
        c0.append(it.model_decrease / (it.grad_norm * min(it.delta, cauchy)))
        c1.append(it.step_norm / it.grad_norm)
        c2.append(float(np.linalg.norm(g + H @ it.step)) / it.grad_norm ** (1 + theta))
        hnorm = max(hnorm, float(np.linalg.norm(H.dense(), 2)))
    n_it = len(its)
    tail_start = n_it - max(1, math.ceil(tail_fraction * n_it)) if n_it else 0
    c1 = np.array(c1)
    c1_const = float(c1[tail_start:].max()) if n_it else math.nan
    lam_sharp = hnorm + 1e-6
    margins = []
    factor = 0.5 * cfg.rho_prime * min(1.0, 1.0 / (c1_const * lam_sharp)) if n_it else math.nan
    for i, it in enumerate(its):
        if not it.accepted:
            continue
        nxt = record.iterations[it.k + 1].f if it.k + 1 < len(record.iterations) else record.f_final
        margins.append((it.f - nxt) - factor * it.grad_norm * it.step_norm)
    order = estimate_order(record.iterate_grad_norms(), cfg.grad_tol, tail_fraction)
    return ConditionReport(np.array(c0), c1, np.array(c2), np.array(margins), order,
                           tail_start, lam_sharp, c1_const)


# --- capture ---------------------------------------------------------------------

@dataclass(frozen=True)
class CaptureTrial:
    trial: int
    captured: bool
    converged: bool
    max_distance: float
    iterations: int
    first_step_boundary: bool
    boundary_steps: int
    first_step_ratio: float  # ||s_0|| / ||grad f(x_0)||
    c1_max_tail: float


@dataclass
class CaptureResult:
    trials: List[CaptureTrial]

    @property
    def rate(self) -> float:
        return sum(t.captured for t in self.trials) / len(self.trials) if self.trials else math.nan

    @property
    def boundary_first_step_fraction(self) -> float:
        return sum(t.first_step_boundary for t in self.trials) / len(self.trials)

    @property
    def boundary_step_fraction(self) -> float:
        total = sum(t.iterations for t in self.trials)
        return sum(t.boundary_steps for t in self.trials) / total if total else 0.0


def capture_experiment(
    problem: ProblemDefinition,
    center,
    radius_start: float,
    radius_stay: float,
    trials: int,
    config: Optional[TrConfig] = None,
    seed: int = 0,
    theta: Optional[float] = None,
) -> CaptureResult:
    """Start ``trials`` runs at distance ``radius_start`` from ``center`` and check
    whether every iterate stays within ``radius_stay`` of it and the run converges."""
    config = config or TrConfig()
    theta = config.tcg_params.theta if theta is None else theta
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        u = rng.standard_normal(problem.dim)
        x0 = center + radius_start * u / np.linalg.norm(u) if radius_start > 0 else center.copy()
        rec = tr_minimize(problem, x0, config)
        pts = [it.x for it in rec.iterations] + [rec.x_final]
        dist = max(float(np.linalg.norm(p - center)) for p in pts)
        conv = rec.status == "converged"
        first = rec.iterations[0] if rec.iterations else None
        c1_tail = math.nan
        if rec.iterations:
            c1_tail = evaluate_conditions(rec, problem, theta).c1_max_tail
        out.append(CaptureTrial(
            trial=t,
            captured=conv and dist <= radius_stay,
            converged=conv,
            max_distance=dist,
            iterations=len(rec.iterations),
            first_step_boundary=bool(first is not None and first.on_boundary),
            boundary_steps=rec.boundary_steps,
            first_step_ratio=first.step_norm / first.grad_norm if first else 0.0,
            c1_max_tail=c1_tail,
        ))
    return CaptureResult(out)


# --- CSV -------------------------------------------------------------------------

RUN_CSV_HEADER = ["k", "grad_norm", "f", "delta", "rho", "step_norm", "accepted", "termination"]


def write_run_csv(path, record: TrRunRecord) -> None:
    def f(x):
        return format(float(x), ".17g")

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_CSV_HEADER)
        for it in record.iterations:
            w.writerow([it.k, f(it.grad_norm), f(it.f), f(it.delta), f(it.rho),
                        f(it.step_norm), int(it.accepted), it.termination])
        k = len(record.iterations)
        w.writerow([k, f(record.grad_norm_final), f(record.f_final), "", "", "", "", record.status])
