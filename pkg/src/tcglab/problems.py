"""Test problems with analytic derivatives, plus PL and Hessian diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .spectral import (
    SpectralMeasure,
    SymmetricOperator,
    read_measure_csv,
    symmetric_eigendecompose,
)


@dataclass(frozen=True)
class ProblemDefinition:
    """Smooth objective with gradient and Hessian operator.

    ``solution_param`` maps a parameter vector of length ``param_dim`` to a
    point of the solution set S (when known). ``path`` is an optional curve
    ``eps -> point`` used by asymptotic experiments.
    """

    name: str
    dim: int
    f: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], SymmetricOperator]
    solution_param: Optional[Callable[[np.ndarray], np.ndarray]] = None
    param_dim: int = 0
    mu: Optional[float] = None
    path: Optional[Callable[[float], np.ndarray]] = None
    unbounded_direction: bool = False
    metadata: Dict[str, object] = field(default_factory=dict)

    def initial_point(self, seed: int = 0) -> np.ndarray:
        """Deterministic random start, components uniform in [-2, 2]."""
        return np.random.default_rng(seed).uniform(-2.0, 2.0, self.dim)


# --- sine least squares -------------------------------------------------------

def problem_sine_lsq(n: int) -> ProblemDefinition:
    """``f(x, y) = ||y - sin(x)||^2 / 2`` on R^n x R^n, globally 1-PL.

    Points are stored as ``z = (x, y)``; S is the graph ``y = sin(x)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")

    def split(z):
        z = np.asarray(z, dtype=float)
        return z[:n], z[n:]

    def f(z):
        x, y = split(z)
        r = y - np.sin(x)
        return 0.5 * float(r @ r)

    def grad(z):
        x, y = split(z)
        r = y - np.sin(x)
        return np.concatenate([-np.cos(x) * r, r])

    def hess(z):
        x, y = split(z)
        r = y - np.sin(x)
        c = np.cos(x)
        H = np.zeros((2 * n, 2 * n))
        idx = np.arange(n)
        H[idx, idx] = np.sin(x) * r + c**2
        H[idx, idx + n] = -c
        H[idx + n, idx] = -c
        H[idx + n, idx + n] = 1.0
        return SymmetricOperator.from_matrix(H, check=False)

    def on_s(p):
        p = np.asarray(p, dtype=float)
        return np.concatenate([p, np.sin(p)])

    return ProblemDefinition(
        name=f"sine-lsq:n={n}", dim=2 * n, f=f, grad=grad, hess=hess,
        solution_param=on_s, param_dim=n, mu=1.0,
    )


# --- 2d example where theta = 1 breaks quadratic convergence -------------------------

def problem_remark_counterexample() -> ProblemDefinition:
    """``f(x, y) = 3/16 (1 + 64/3 x^2) y^2``, minimized on the line ``y = 0``."""

    def f(z):
        x, y = z
        return 3.0 / 16.0 * y**2 + 4.0 * x**2 * y**2

    def grad(z):
        x, y = z
        return np.array([8.0 * x * y**2, 3.0 / 8.0 * y + 8.0 * x**2 * y])

    def hess(z):
        x, y = z
        H = np.array([[8.0 * y**2, 16.0 * x * y], [16.0 * x * y, 3.0 / 8.0 + 8.0 * x**2]])
        return SymmetricOperator.from_matrix(H, check=False)

    def path(eps):
        return np.array([math.sqrt(1.0 - eps) / 8.0, math.sqrt(eps)])

    def on_s(p):
        return np.array([float(np.asarray(p).ravel()[0]), 0.0])

    return ProblemDefinition(
        name="remark2d", dim=2, f=f, grad=grad, hess=hess,
        solution_param=on_s, param_dim=1, path=path,
    )


# --- diagonal quadratic --------------------------------------------------------

def problem_diagonal_quadratic(measure: SpectralMeasure) -> ProblemDefinition:
    """``f(x) = x^T A x / 2 - b^T x`` with ``A = diag(eigenvalues)``, ``b = weights``.

    ``unbounded_direction`` is set when some eigenvalue is not positive, that
    is when f is unbounded below or flat along a coordinate direction.
    """
    lam = np.array(measure.eigenvalues, dtype=float)
    b = np.array(measure.weights, dtype=float)
    A = SymmetricOperator.from_matrix(np.diag(lam), check=False)
    scale = max(np.abs(lam).max(initial=0.0), 1.0)
    unbounded = bool(np.any(lam <= 1e-14 * scale))

    def f(x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (lam * x) - b @ x)

    def grad(x):
        return lam * np.asarray(x, dtype=float) - b

    solution = None
    if not unbounded:
        xstar = b / lam
        solution = lambda p: xstar.copy()  # noqa: E731

    return ProblemDefinition(
        name="diag", dim=lam.size, f=f, grad=grad, hess=lambda x: A,
        solution_param=solution, param_dim=0,
        mu=float(lam.min()) if not unbounded and lam.size else None,
        unbounded_direction=unbounded, metadata={"measure": measure},
    )


def problem_from_name(spec: str) -> ProblemDefinition:
    """Resolve ``sine-lsq:n=100``, ``remark2d`` or ``diag:file=measure.csv``."""
    head, _, rest = spec.partition(":")
    opts = {}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise ValueError(f"malformed problem option {item!r} in {spec!r}")
            opts[key.strip()] = val.strip()
    if head == "sine-lsq":
        unknown = set(opts) - {"n"}
        if unknown:
            raise ValueError(f"unknown options {sorted(unknown)} for sine-lsq")
        return problem_sine_lsq(int(opts.get("n", 100)))
    if head == "remark2d":
        if opts:
            raise ValueError("remark2d takes no options")
        return problem_remark_counterexample()
    if head == "diag":
        if set(opts) != {"file"}:
            raise ValueError("diag needs exactly the option file=...")
        m = read_measure_csv(opts["file"])
        if not isinstance(m, SpectralMeasure):
            m = m.full()
        return problem_diagonal_quadratic(m)
    raise ValueError(f"unknown problem {spec!r}")


# --- derivative checks --------------------------------------------------------

def _random_points(problem, count, seed, spread=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-spread, spread, (count, problem.dim))


def gradient_check(problem: ProblemDefinition, points=None, h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between central differences of f and ``grad``."""
    pts = _random_points(problem, 20, seed) if points is None else np.atleast_2d(points)
    worst = 0.0
    eye = np.eye(problem.dim)
    for x in pts:
        g = problem.grad(x)
        fd = np.array([(problem.f(x + h * e) - problem.f(x - h * e)) / (2 * h) for e in eye])
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0))
    return float(worst)


def hessian_check(problem: ProblemDefinition, points=None, h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between differences of ``grad`` along v and ``hess @ v``."""
    pts = _random_points(problem, 20, seed) if points is None else np.atleast_2d(points)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for x in pts:
        v = rng.standard_normal(problem.dim)
        v /= np.linalg.norm(v)
        Hv = problem.hess(x) @ v
        fd = (problem.grad(x + h * v) - problem.grad(x - h * v)) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - Hv) / max(np.linalg.norm(Hv), 1.0))
    return float(worst)


def finite_difference_hessian(problem: ProblemDefinition, x, h: float = 1e-6) -> SymmetricOperator:
    """Symmetrized central-difference Hessian built from ``grad``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for e in np.eye(problem.dim):
        cols.append((problem.grad(x + h * e) - problem.grad(x - h * e)) / (2 * h))
    H = np.column_stack(cols)
    return SymmetricOperator.from_matrix(0.5 * (H + H.T), check=False)


# --- diagnostics ------------------------------------------------------------------

class SpectralGapError(ValueError):
    pass


def gradient_alignment(problem: ProblemDefinition, x, d: int, min_gap: float = 2.0):
    """``||(I - P) grad f(x)||`` with P the projector on the top-d Hessian eigenspace.

    Returns ``(residual, grad_norm)``. The Hessian must have
    ``|lambda_d| >= min_gap * max_{i > d} |lambda_i|``.
    """
    x = np.asarray(x, dtype=float)
    eig = symmetric_eigendecompose(problem.hess(x).dense())
    vals = eig.eigenvalues
    if not 1 <= d <= vals.size:
        raise ValueError(f"d = {d} outside [1, {vals.size}]")
    rest = np.abs(vals[d:]).max(initial=0.0)
    if rest > 0 and abs(vals[d - 1]) < min_gap * rest:
        raise SpectralGapError(
            f"no spectral gap after {d} eigenvalues: lambda_d = {vals[d - 1]:.3e}, "
            f"max |rest| = {rest:.3e}, ratio {abs(vals[d - 1]) / rest:.3g} < {min_gap}"
        )
    g = problem.grad(x)
    U = eig.eigenvectors[:, :d]
    res = g - U @ (U.T @ g)
    return float(np.linalg.norm(res)), float(np.linalg.norm(g))


@dataclass
class NegativeCurvatureSearch:
    found: bool
    witnesses: Dict[float, List[np.ndarray]]
    min_eigenvalues: Dict[float, float]

    @property
    def found_at_all_distances(self) -> bool:
        return all(len(w) > 0 for w in self.witnesses.values())


def hessian_has_negative_eigenvalue_near_S(
    problem: ProblemDefinition,
    trials: int = 20,
    distances=(1e-1, 1e-2, 1e-3),
    seed: int = 0,
) -> NegativeCurvatureSearch:
    """Look for points at the given distances from S where the Hessian is indefinite."""
    if problem.solution_param is None:
        raise ValueError(f"{problem.name} has no parametrization of S")
    rng = np.random.default_rng(seed)
    witnesses: Dict[float, List[np.ndarray]] = {}
    mins: Dict[float, float] = {}
    for dist in distances:
        witnesses[dist] = []
        mins[dist] = math.inf
        for _ in range(trials):
            p = rng.uniform(-2.0, 2.0, problem.param_dim)
            u = rng.standard_normal(problem.dim)
            x = problem.solution_param(p) + dist * u / np.linalg.norm(u)
            lmin = float(np.linalg.eigvalsh(problem.hess(x).dense()).min())
            mins[dist] = min(mins[dist], lmin)
            if lmin < 0:
                witnesses[dist].append(x)
    return NegativeCurvatureSearch(any(witnesses.values()), witnesses, mins)
