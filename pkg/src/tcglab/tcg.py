"""Truncated conjugate gradients for the trust-region subproblem, with tracing.

``tcg`` approximately solves ``A v = b`` inside the ball ``||v|| <= Delta``,
which for ``b = -grad f`` minimizes the model ``-<b, v> + <v, A v>/2``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .spectral import as_operator

TERMINATIONS = (
    "zero_b",
    "negative_curvature_boundary",
    "radius_boundary",
    "residual_small",
    "max_iterations",
    "not_well_defined",
    "breakdown",
)


@dataclass(frozen=True)
class TcgParams:
    kappa: float = 0.1
    theta: float = 0.5
    max_iterations: Optional[int] = None  # None means dim(b)
    mode: str = "truncated"  # or "plain"
    rtol: float = 0.0  # plain mode only: stop once ||r_n|| <= rtol * ||b||

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.mode not in ("truncated", "plain"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.theta == 1 and self.mode == "truncated":
            warnings.warn(
                "theta = 1 gives no superlinear guarantee and can lose capture near "
                "non-isolated minima",
                stacklevel=2,
            )

    @property
    def theta_is_critical(self) -> bool:
        return self.theta == 1


@dataclass(frozen=True)
class TcgStep:
    n: int
    v: np.ndarray
    r: Optional[np.ndarray]  # None on a boundary exit (no residual update)
    v_norm: float
    r_norm: float
    curvature: float  # <u_{n-1}, A u_{n-1}>
    alpha: float
    beta: float  # nan when not computed


@dataclass
class TcgTrace:
    steps: List[TcgStep] = field(default_factory=list)
    termination: str = "max_iterations"
    output: Optional[np.ndarray] = None
    delta: float = math.inf
    r0_norm: float = 0.0
    breakdown: bool = False

    @property
    def iterations(self) -> int:
        return len(self.steps)

    @property
    def on_boundary(self) -> bool:
        return self.termination in ("negative_curvature_boundary", "radius_boundary")

    def v_norms(self) -> np.ndarray:
        return np.array([0.0] + [s.v_norm for s in self.steps])

    def r_norms(self) -> np.ndarray:
        return np.array([self.r0_norm] + [s.r_norm for s in self.steps])

    def to_csv(self, path) -> None:
        write_trace_csv(path, self)


def _boundary_t(v: np.ndarray, u: np.ndarray, delta: float) -> float:
    """Nonnegative root t of ||v + t u|| = delta, assuming ||v|| <= delta."""
    uu = u @ u
    vu = v @ u
    vv = v @ v
    c = vv - delta * delta  # <= 0
    disc = math.sqrt(max(vu * vu - uu * c, 0.0))
    # stable branch of the quadratic formula
    if vu >= 0:
        denom = vu + disc
        return -c / denom if denom > 0 else 0.0
    return (disc - vu) / uu


def tcg(A, b, Delta: float = math.inf, params: Optional[TcgParams] = None) -> TcgTrace:
    """Run truncated (or plain) CG from ``v_0 = 0`` and record every iteration.

    Parameters
    ----------
    A : array_like or SymmetricOperator
        Symmetric matrix or operator.
    b : array_like
        Right-hand side (the negative model gradient).
    Delta : float
        Trust-region radius; ignored in plain mode.
    params : TcgParams
        ``kappa``, ``theta`` of the residual rule and the mode.

    Returns
    -------
    TcgTrace
        Iterates, residuals, curvatures and the termination reason.
    """
    params = params or TcgParams()
    op = as_operator(A)
    b = np.asarray(b, dtype=float).ravel()
    if b.size != op.dim:
        raise ValueError("dimension mismatch between A and b")
    truncated = params.mode == "truncated"
    if truncated and not Delta > 0:
        raise ValueError("Delta must be positive")
    max_it = params.max_iterations if params.max_iterations is not None else b.size

    v = np.zeros_like(b)
    r = b.copy()
    u = b.copy()
    r0 = float(np.linalg.norm(r))
    trace = TcgTrace(delta=Delta if truncated else math.inf, r0_norm=r0)
    if r0 == 0.0:
        trace.termination = "zero_b"
        trace.output = v
        return trace
    if truncated:
        target = r0 * min(r0**params.theta, params.kappa)
    else:
        target = params.rtol * r0

    rr = r0 * r0
    for n in range(1, max_it + 1):
        Au = op @ u
        curv = float(u @ Au)
        if not math.isfinite(curv):
            trace.breakdown = True
            trace.termination = "breakdown"
            break
        if curv <= 0:
            # truncation 1 before alpha is formed
            if not truncated:
                trace.termination = "not_well_defined"
                break
            t = _boundary_t(v, u, Delta)
            v = v + t * u
            trace.steps.append(
                TcgStep(n, v, None, float(np.linalg.norm(v)), math.nan, curv, math.nan, math.nan)
            )
            trace.termination = "negative_curvature_boundary"
            break
        alpha = rr / curv
        v_plus = v + alpha * u
        v_plus_norm = float(np.linalg.norm(v_plus))
        if truncated and v_plus_norm >= Delta:
            t = _boundary_t(v, u, Delta)
            v = v + t * u
            trace.steps.append(
                TcgStep(n, v, None, float(np.linalg.norm(v)), math.nan, curv, alpha, math.nan)
            )
            trace.termination = "radius_boundary"
            break
        v = v_plus
        r = r - alpha * Au
        rr_new = float(r @ r)
        r_norm = math.sqrt(rr_new)
        if not (math.isfinite(r_norm) and math.isfinite(v_plus_norm)):
            trace.breakdown = True
            trace.termination = "breakdown"
            break
        if r_norm <= target or rr_new == 0.0:
            trace.steps.append(TcgStep(n, v, r, v_plus_norm, r_norm, curv, alpha, math.nan))
            trace.termination = "residual_small"
            break
        beta = rr_new / rr
        trace.steps.append(TcgStep(n, v, r, v_plus_norm, r_norm, curv, alpha, beta))
        u = r + beta * u
        rr = rr_new
    else:
        trace.termination = "max_iterations"
    trace.output = v
    return trace


def model_value(A, b, s) -> float:
    """Quadratic model ``-<b, s> + <s, A s>/2`` (so that ``m(0) = 0``)."""
    op = as_operator(A)
    s = np.asarray(s, dtype=float)
    return float(-(b @ s) + 0.5 * (s @ (op @ s)))


def cauchy_decrease_ratio(trace: TcgTrace, A, b) -> float:
    """Model decrease of the output over ``||b|| min(Delta, ||b||^3 / |<b, Ab>|)``.

    A ratio of at least 1/2 is the Cauchy sufficient-decrease condition.
    """
    op = as_operator(A)
    b = np.asarray(b, dtype=float)
    bn = float(np.linalg.norm(b))
    if bn == 0:
        raise ValueError("cauchy_decrease_ratio needs a nonzero b")
    decrease = -model_value(op, b, trace.output)
    bAb = abs(float(b @ (op @ b)))
    cauchy_len = bn**3 / bAb if bAb > 0 else math.inf
    return decrease / (bn * min(trace.delta, cauchy_len))


def write_trace_csv(path, trace: TcgTrace) -> None:
    def f(x):
        return format(float(x), ".17g")

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "v_norm", "r_norm", "curvature", "alpha", "beta", "termination"])
        w.writerow([0, f(0.0), f(trace.r0_norm), "", "", "", ""])
        last = len(trace.steps) - 1
        for i, s in enumerate(trace.steps):
            w.writerow(
                [s.n, f(s.v_norm), f(s.r_norm), f(s.curvature), f(s.alpha), f(s.beta),
                 trace.termination if i == last else ""]
            )
