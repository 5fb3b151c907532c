"""Lanczos polynomials of a discrete measure and the perturbation machinery
that compares CG on a split problem (head plus small tail) with CG on the head.

Conventions
-----------
* ``pi_n``   monic orthogonal (Lanczos) polynomial, roots = Ritz values.
* ``varsigma_n = pi_n / pi_n(0)``, the CG residual polynomial.
* ``phi_{n-1}`` with ``varsigma_n(x) = 1 - x phi_{n-1}(x)``, the CG iterate polynomial.
* ``zeta_n`` minimal-norm polynomial of degree n with ``zeta_n(lam) = 1``.
* ``xi_n = zeta_n / zeta_n(0)``.

Polynomials are never expanded in monomials: everything is evaluated through
the three-term recurrence, the reproducing kernel, or Ritz-value products.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .spectral import (
    MERGE_RTOL,
    WEIGHT_TOL,
    SpectralError,
    SpectralMeasure,
    SplitSpectralMeasure,
)


class NotWellDefinedError(ArithmeticError):
    """A CG iteration is not well defined (a Ritz value is not positive)."""


class XiUndefinedError(ArithmeticError):
    """``zeta_n(0) = 0`` so ``xi_n`` cannot be normalized at zero."""


# --- recurrence -------------------------------------------------------------

@dataclass(frozen=True)
class JacobiRecurrence:
    """Three-term recurrence of the Lanczos polynomials of ``measure``.

    ``alpha[k]`` are the diagonal entries and ``beta[k] > 0`` the off-diagonal
    entries of the orthonormal Jacobi matrix, so that the monic polynomials obey
    ``pi_{k+1} = (x - alpha[k]) pi_k - beta[k-1]**2 pi_{k-1}``.
    ``norms_sq[n] = ||pi_n||**2`` for ``n = 0..grade``; the last entry is zero.

    ``atom_values[i, k]`` is the orthonormal polynomial of degree k at support
    atom i, read off the reorthogonalized Lanczos basis. At the atoms this is
    far more accurate than running the recurrence forward once Ritz values
    have converged, so evaluations that land exactly on an atom use it.
    """

    measure: SpectralMeasure
    support: SpectralMeasure
    alpha: np.ndarray
    beta: np.ndarray
    norms_sq: np.ndarray
    grade: int
    atom_values: Optional[np.ndarray] = None

    @property
    def b_norm(self) -> float:
        return math.sqrt(self.norms_sq[0])

    def jacobi_matrix(self, n: int) -> np.ndarray:
        return np.diag(self.alpha[:n]) + np.diag(self.beta[: n - 1], 1) + np.diag(self.beta[: n - 1], -1)


def _merge_atoms(measure: SpectralMeasure, weight_tol: float) -> SpectralMeasure:
    supp = measure.support(weight_tol)
    lam, w = supp.eigenvalues, supp.weights
    if lam.size < 2:
        return supp
    radius = max(np.abs(lam).max(), np.finfo(float).tiny)
    out_l, out_w = [], []
    start = 0
    for i in range(1, lam.size + 1):
        if i == lam.size or lam[start] - lam[i] > MERGE_RTOL * radius:
            block_w = w[start:i]
            out_l.append(float(np.average(lam[start:i], weights=block_w**2)))
            out_w.append(float(np.linalg.norm(block_w)))
            start = i
    return SpectralMeasure(np.array(out_l), np.array(out_w))


def stieltjes(measure: SpectralMeasure, weight_tol: float = WEIGHT_TOL) -> JacobiRecurrence:
    """Recurrence coefficients of the Lanczos polynomials of ``measure``.

    Runs Lanczos with full reorthogonalization on the diagonal matrix of the
    weighted support, which is the discrete Stieltjes procedure carried out on
    orthonormal vectors. The grade is the number of distinct weighted atoms.
    """
    support = _merge_atoms(measure, weight_tol)
    ell = len(support)
    if ell == 0:
        raise SpectralError("measure has no atom of positive weight")
    lam, w = support.eigenvalues, support.weights
    alpha = np.zeros(ell)
    beta = np.zeros(max(ell - 1, 0))
    Q = np.zeros((ell, ell))
    Q[:, 0] = w / np.linalg.norm(w)
    for k in range(ell):
        z = lam * Q[:, k]
        alpha[k] = Q[:, k] @ z
        if k == ell - 1:
            break
        z -= alpha[k] * Q[:, k]
        if k > 0:
            z -= beta[k - 1] * Q[:, k - 1]
        for _ in range(2):
            z -= Q[:, : k + 1] @ (Q[:, : k + 1].T @ z)
        beta[k] = np.linalg.norm(z)
        if not beta[k] > 0:
            raise SpectralError(f"Lanczos breakdown at step {k + 1} before the grade {ell}")
        Q[:, k + 1] = z / beta[k]
    norms_sq = np.zeros(ell + 1)
    norms_sq[0] = w @ w
    for k in range(ell - 1):
        norms_sq[k + 1] = norms_sq[k] * beta[k] ** 2
    atom_values = Q / w[:, None]
    for arr in (alpha, beta, norms_sq, atom_values):
        arr.setflags(write=False)
    return JacobiRecurrence(measure, support, alpha, beta, norms_sq, ell, atom_values)


def _atom_hits(rec: JacobiRecurrence, x: np.ndarray):
    """Positions in ``x`` equal to a support atom, and the matching atom indices."""
    if rec.atom_values is None or x.size == 0:
        return None
    asc = rec.support.eigenvalues[::-1]
    flat = x.ravel()
    pos = np.clip(np.searchsorted(asc, flat), 0, asc.size - 1)
    hit = asc[pos] == flat
    if not hit.any():
        return None
    return np.flatnonzero(hit), asc.size - 1 - pos[hit]


def _check_degree(rec: JacobiRecurrence, n: int, upper: Optional[int] = None):
    upper = rec.grade if upper is None else upper
    if not 0 <= n <= upper:
        raise ValueError(f"degree {n} outside [0, {upper}]")


def orthonormal_values(rec: JacobiRecurrence, n: int, x) -> np.ndarray:
    """Values of the orthonormal polynomials ``pi_k / ||pi_k||`` for k = 0..n.

    Returns an array of shape ``(n + 1,) + shape(x)``. Requires ``n < grade``.
    """
    _check_degree(rec, n, rec.grade - 1)
    x = np.asarray(x, dtype=float)
    out = np.empty((n + 1,) + x.shape)
    out[0] = 1.0 / rec.b_norm
    if n >= 1:
        out[1] = (x - rec.alpha[0]) * out[0] / rec.beta[0]
    for k in range(1, n):
        out[k + 1] = ((x - rec.alpha[k]) * out[k] - rec.beta[k - 1] * out[k - 1]) / rec.beta[k]
    hits = _atom_hits(rec, x)
    if hits is not None:
        flat = out.reshape(n + 1, -1)
        flat[:, hits[0]] = rec.atom_values[hits[1], : n + 1].T
    return out


def eval_pi(rec: JacobiRecurrence, n: int, x):
    """Monic Lanczos polynomial ``pi_n`` evaluated at ``x``."""
    _check_degree(rec, n)
    x = np.asarray(x, dtype=float)
    prev = np.zeros_like(x)
    cur = np.ones_like(x)
    for k in range(n):
        nxt = (x - rec.alpha[k]) * cur
        if k > 0:
            nxt -= rec.beta[k - 1] ** 2 * prev
        prev, cur = cur, nxt
    hits = _atom_hits(rec, x)
    if hits is not None and n > 0:
        flat = cur.reshape(-1)
        if n == rec.grade:
            flat[hits[0]] = 0.0  # pi_grade annihilates the support
        else:
            flat[hits[0]] = rec.atom_values[hits[1], n] * math.sqrt(rec.norms_sq[n])
    return cur


def ritz_values(rec: JacobiRecurrence, n: int) -> np.ndarray:
    """Roots of ``pi_n`` (eigenvalues of the leading n x n Jacobi matrix), increasing."""
    if not 1 <= n <= rec.grade:
        raise ValueError(f"n = {n} outside [1, {rec.grade}]")
    if n == 1:
        return np.array([rec.alpha[0]])
    vals = eigh_tridiagonal(rec.alpha[:n], rec.beta[: n - 1], eigvals_only=True)
    return np.sort(vals)


def is_well_defined(rec: JacobiRecurrence, n: int) -> bool:
    if n == 0:
        return True
    return bool(ritz_values(rec, n)[0] > 0)


def _require_well_defined(rec: JacobiRecurrence, n: int) -> np.ndarray:
    if n == 0:
        return np.empty(0)
    gam = ritz_values(rec, n)
    scale = max(abs(gam[-1]), abs(gam[0]))
    if not gam[0] > 1e-14 * scale:
        raise NotWellDefinedError(
            f"iteration {n} not well defined: smallest Ritz value {gam[0]:.3e}"
        )
    return gam


def eval_varsigma(rec: JacobiRecurrence, n: int, x):
    """CG residual polynomial ``varsigma_n = pi_n / pi_n(0)``."""
    _check_degree(rec, n)
    _require_well_defined(rec, n)
    x = np.asarray(x, dtype=float)
    if n == 0:
        return np.ones_like(x)
    return eval_pi(rec, n, x) / eval_pi(rec, n, 0.0)


def eval_phi(rec: JacobiRecurrence, m: int, x):
    """CG iterate polynomial ``phi_m`` with ``varsigma_{m+1}(x) = 1 - x phi_m(x)``.

    Uses ``1 - prod(1 - x/g_i) = sum_k (x/g_k) prod_{i<k}(1 - x/g_i)`` over the
    Ritz values, which has no cancellation at ``x = 0`` where it gives
    ``sum 1/g_i``.
    """
    n = m + 1
    _check_degree(rec, n)
    gam = _require_well_defined(rec, n)
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    prod = np.ones_like(x)
    for g in gam[::-1]:
        out = out + prod / g
        prod = prod * (1.0 - x / g)
    return out


def cg_polynomial_iterate(rec: JacobiRecurrence, n: int) -> np.ndarray:
    """The CG iterate ``v_n = phi_{n-1}(A) b`` on the diagonal realization of ``rec.measure``."""
    m = rec.measure
    return eval_phi(rec, n - 1, m.eigenvalues) * m.weights


# --- zeta / xi -------------------------------------------------------------

@dataclass(frozen=True)
class PolyHandle:
    """A polynomial of known degree evaluated through a closure."""

    degree: int
    tag: str
    fn: Callable[[np.ndarray], np.ndarray]
    norm_sq: float = math.nan
    root_fn: Optional[Callable[[], np.ndarray]] = None

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def roots(self) -> np.ndarray:
        if self.root_fn is None:
            raise NotImplementedError(f"no root finder for {self.tag}")
        return self.root_fn()


def kernel(rec: JacobiRecurrence, n: int, lam: float, x):
    """Reproducing kernel ``K_n(lam, x) = sum_{i<=n} pi_i(lam) pi_i(x) / ||pi_i||^2``."""
    coef = orthonormal_values(rec, n, lam)
    vals = orthonormal_values(rec, n, x)
    return np.tensordot(coef, vals, axes=(0, 0))


def _zeta_roots(rec: JacobiRecurrence, n: int, lam: float) -> np.ndarray:
    """Roots of zeta_n: Gauss-Radau nodes with prescribed node ``lam``, minus ``lam``."""
    if n == 0:
        return np.empty(0)
    ratio = float(eval_pi(rec, n + 1, lam) / eval_pi(rec, n, lam))
    diag = np.array(rec.alpha[: n + 1], dtype=float)
    diag[n] += ratio
    nodes = eigh_tridiagonal(diag, rec.beta[:n], eigvals_only=True)
    drop = int(np.argmin(np.abs(nodes - lam)))
    return np.sort(np.delete(nodes, drop))


def zeta(rec: JacobiRecurrence, n: int, lam: float) -> PolyHandle:
    """``zeta_n`` for the measure of ``rec``: minimal norm subject to ``zeta(lam) = 1``.

    Evaluated as ``K_n(lam, x) / K_n(lam, lam)``; ``||zeta_n||^2 = 1 / K_n(lam, lam)``.
    """
    _check_degree(rec, n, rec.grade - 1)
    lam = float(lam)
    k_ll = float(kernel(rec, n, lam, lam))
    if not k_ll > 0:
        raise ArithmeticError(f"K_{n}(lam, lam) = {k_ll} is not positive")
    coef = orthonormal_values(rec, n, lam)

    def fn(x):
        return np.tensordot(coef, orthonormal_values(rec, n, x), axes=(0, 0)) / k_ll

    return PolyHandle(n, "zeta", fn, 1.0 / k_ll, lambda: _zeta_roots(rec, n, lam))


def xi(rec: JacobiRecurrence, n: int, lam: float) -> PolyHandle:
    """``xi_n = zeta_n / zeta_n(0)``, normalized to one at the origin."""
    _check_degree(rec, n, rec.grade - 1)
    lam = float(lam)
    coef = orthonormal_values(rec, n, lam)
    k_ll = float(coef @ coef)
    k_l0 = float(kernel(rec, n, lam, 0.0))
    scale = k_ll  # |K(lam, 0)| <= sqrt(K(lam,lam) K(0,0)); compare against K(lam,lam)
    if abs(k_l0) <= 1e-14 * scale:
        raise XiUndefinedError(f"zeta_{n}(0) vanishes for lam = {lam}")

    def fn(x):
        return np.tensordot(coef, orthonormal_values(rec, n, x), axes=(0, 0)) / k_l0

    handle = PolyHandle(n, "xi", fn, k_ll / k_l0**2, lambda: _zeta_roots(rec, n, lam))
    return handle


class InterlacingCheck(NamedTuple):
    strict: bool
    min_separation: float  # relative to the largest |Ritz value|
    near_ties: int  # gaps below rtol that needed the sign test
    sign_alternates: bool


def check_interlacing(rec: JacobiRecurrence, n: int, lam: float, rtol: float = 1e-10) -> InterlacingCheck:
    """Strict interlacing of the roots of ``zeta_n`` (normalized at ``lam``) with those of ``pi_{n+1}``.

    Gaps of at least ``rtol`` (relative) are accepted from the computed roots.
    Smaller gaps are decided by the values of ``zeta_n`` at the roots of
    ``pi_{n+1}``: strict interlacing holds iff these are nonzero and alternate
    in sign, which needs no root location at all.
    """
    if not 1 <= n <= rec.grade - 1:
        raise ValueError(f"n = {n} outside [1, {rec.grade - 1}]")
    gam = ritz_values(rec, n + 1)
    h = zeta(rec, n, lam)
    z = h.roots()
    scale = np.abs(gam).max()
    gaps = np.concatenate([z - gam[:-1], gam[1:] - z]) / scale
    vals = h(gam)
    alternates = bool(np.all(vals != 0) and np.all(np.sign(vals[1:]) == -np.sign(vals[:-1])))
    near = int(np.count_nonzero(gaps < rtol))
    strict = near == 0 or alternates
    return InterlacingCheck(strict, float(gaps.min()), near, alternates)


# --- sigma system ---------------------------------------------------------------

@dataclass(frozen=True)
class SigmaSystem:
    """Perturbation system relating the Lanczos polynomials of the full and head problems.

    ``sigma`` solves ``(D + B^2 C) sigma = B^2 w`` where, over tail atoms,
    ``C[i, j] = xi^j_{n-1}(lambda_i)``, ``D_jj = ||xi^j_{n-1}||^2 / xi^j_{n-1}(lambda_j)``,
    ``B = diag(tail weights)`` and ``w_j = varsigma_n(lambda_j)``.
    """

    split: SplitSpectralMeasure
    n: int
    head_rec: JacobiRecurrence
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray  # diagonal entries
    w: np.ndarray
    sigma: np.ndarray
    xis: tuple
    solve_residual: float
    delta: float
    tau: float
    c: float
    eta: float
    omega: float

    @property
    def s(self) -> float:
        return float(self.sigma.sum())

    @property
    def sigma_l1(self) -> float:
        return float(np.abs(self.sigma).sum())

    @property
    def B_fro_sq(self) -> float:
        return float(self.B @ self.B)


def eta_omega(delta: float, tau: float, c: float, lambda_d: float, B_fro_sq: float):
    """Constants controlling ``||sigma||_1 <= omega`` at a c-selected iteration."""
    ratio = B_fro_sq / (lambda_d * c)
    eta = tau + (1 + tau) * (1 + delta) ** 2 * ratio
    omega = (1 + eta) * (1 + delta) * ratio
    return eta, omega


def sigma_system(
    split: SplitSpectralMeasure,
    n: int,
    c: Optional[float] = None,
    head_rec: Optional[JacobiRecurrence] = None,
) -> SigmaSystem:
    """Assemble and solve the sigma system at iteration ``n`` (1 <= n <= head grade).

    ``c`` only enters the reported ``eta`` and ``omega``. By default it is the
    largest admissible value for which every ``||xi^j_{n-1}||^2 >= lambda_d c``.
    """
    rec = head_rec if head_rec is not None else stieltjes(split.head)
    if not 1 <= n <= rec.grade:
        raise ValueError(f"n = {n} outside [1, {rec.grade}]")
    lam_d = split.lambda_d
    tail_l = split.tail.eigenvalues
    B = np.array(split.tail.weights, dtype=float)
    m = tail_l.size
    w = eval_varsigma(rec, n, tail_l) if m else np.empty(0)
    xis = tuple(xi(rec, n - 1, lj) for lj in tail_l)
    if m:
        C = np.column_stack([h(tail_l) for h in xis])
        D = np.array([h.norm_sq / h(lj) for h, lj in zip(xis, tail_l)])
        M = np.diag(D) + (B**2)[:, None] * C
        rhs = B**2 * w
        if not np.any(rhs):
            sigma = np.zeros(m)
        else:
            if np.linalg.cond(M) > 1e14:
                raise np.linalg.LinAlgError("D + B^2 C is numerically singular")
            sigma = np.linalg.solve(M, rhs)
        res = float(np.linalg.norm(M @ sigma - rhs))
        delta = float(np.abs(C - 1.0).max())
        tau = float(np.abs(w - 1.0).max())
        xi_norms = np.array([h.norm_sq for h in xis])
    else:
        C = np.empty((0, 0))
        D = np.empty(0)
        sigma = np.empty(0)
        res = 0.0
        delta = tau = 0.0
        xi_norms = np.empty(0)
    c_max = rec.norms_sq[0] / lam_d
    if c is None:
        c = min(xi_norms.min() / lam_d, c_max) if m else c_max
    eta, omega = eta_omega(delta, tau, c, lam_d, float(B @ B))
    return SigmaSystem(split, n, rec, B, C, D, w, sigma, xis, res, delta, tau, c, eta, omega)


def _sample_points(split: SplitSpectralMeasure, seed: int = 0, count: int = 16) -> np.ndarray:
    full = split.full()
    lo, hi = full.eigenvalues.min(), full.eigenvalues.max()
    rng = np.random.default_rng(seed)
    return np.concatenate([full.eigenvalues, rng.uniform(lo - 1.0, hi + 1.0, count)])


def rho_identity_sides(system: SigmaSystem, x):
    """Both sides of ``pi~_n = pi_n - pi_n(0) sum_j sigma_j xi^j_{n-1}`` at ``x``."""
    n = system.n
    full_rec = stieltjes(system.split.full())
    lhs = eval_pi(full_rec, n, x)
    pi_n = eval_pi(system.head_rec, n, x)
    corr = np.zeros_like(pi_n)
    for s_j, h in zip(system.sigma, system.xis):
        corr = corr + s_j * h(x)
    rhs = pi_n - eval_pi(system.head_rec, n, 0.0) * corr
    return lhs, rhs, pi_n


def verify_rho_identity(split: SplitSpectralMeasure, n: int, seed: int = 0) -> float:
    """Max residual of the Lanczos-polynomial identity, relative to ``max |pi_n|``.

    Sampled at every atom of the full measure and 16 seeded uniform points in
    ``[lambda_min - 1, lambda_max + 1]``.
    """
    system = sigma_system(split, n)
    x = _sample_points(split, seed)
    lhs, rhs, pi_n = rho_identity_sides(system, x)
    scale = np.abs(pi_n).max()
    return float(np.abs(lhs - rhs).max() / scale)


class RootDisplacement(NamedTuple):
    lhs: float  # max over roots z of pi~_n of min_i |1 - z / gamma_i|
    rhs: float  # ||sigma||_1
    min_root_tilde: float
    min_root_head: float
    holds: bool


def root_displacement_bound(split: SplitSpectralMeasure, n: int) -> RootDisplacement:
    """Compare the relative displacement of the roots of ``pi~_n`` with ``||sigma||_1``.

    ``holds`` also covers the lower bound ``(1 - ||sigma||_1) gamma_n`` on the
    roots of ``pi~_n`` whenever ``||sigma||_1 < 1``.
    """
    system = sigma_system(split, n)
    gam = ritz_values(system.head_rec, n)
    z = ritz_values(stieltjes(split.full()), n)
    rel = np.abs(1.0 - z[:, None] / gam[None, :]).min(axis=1)
    lhs = float(rel.max())
    rhs = system.sigma_l1
    holds = lhs <= rhs + 1e-9
    if rhs < 1:
        holds = holds and z.min() >= (1 - rhs) * gam.min() - 1e-9 * gam.min()
    return RootDisplacement(lhs, rhs, float(z.min()), float(gam.min()), bool(holds))


def _tail_growth(lam_i: float, lam_d: float, n: int) -> float:
    """``|((1 - lam_i/lam_d)^n - 1) / lam_i|``, equal to ``n / lam_d`` at ``lam_i = 0``."""
    if lam_i == 0.0:
        return n / lam_d
    return abs(math.expm1(n * math.log1p(-lam_i / lam_d)) / lam_i)


class IterateComparison(NamedTuple):
    head_diff: float  # ||v~_{1:d} - v||
    head_bound: float
    tail_abs: np.ndarray
    tail_bounds: np.ndarray
    tail_bounds_ok: bool
    head_ok: bool
    sigma_l1: float
    v: np.ndarray
    v_tilde: np.ndarray


def _cg_iterate(A: np.ndarray, b: np.ndarray, n: int):
    from .tcg import TcgParams, tcg

    trace = tcg(A, b, params=TcgParams(mode="plain", max_iterations=n))
    if trace.iterations < n:
        return None, trace
    return trace.steps[n - 1].v, trace


def iterate_comparison(split: SplitSpectralMeasure, n: int, slack: float = 1e-9) -> IterateComparison:
    """Run CG ``n`` steps on the head and full diagonal problems and check the iterate bounds.

    Requires ``||sigma||_1 < 1``; CG on the full problem failing to reach step n
    then contradicts the theory and raises :class:`NotWellDefinedError`.
    """
    system = sigma_system(split, n)
    sl1 = system.sigma_l1
    if not sl1 < 1:
        raise ValueError(f"||sigma||_1 = {sl1:.3e} >= 1 at n = {n}")
    A, b = split.head.dense()
    At, bt = split.full().dense()
    if split.head.total_mass == 0:
        raise ValueError("head has no weight")
    v, _ = _cg_iterate(A, b, n)
    vt, trace = _cg_iterate(At, bt, n)
    if v is None:
        raise NotWellDefinedError(f"CG on the head stopped at {trace.iterations} < {n}")
    if vt is None:
        raise NotWellDefinedError(
            f"CG on the full problem stopped at {trace.iterations} < {n} "
            f"({trace.termination}) although ||sigma||_1 = {sl1:.3e} < 1"
        )
    d = split.d
    head_diff = float(np.linalg.norm(vt[:d] - v))
    head_bound = sl1 / (1 - sl1) * float(np.linalg.norm(v))
    lam_d = split.lambda_d
    tail_abs = np.abs(vt[d:])
    tail_bounds = np.array(
        [abs(bi) / (1 - sl1) * _tail_growth(li, lam_d, n)
         for li, bi in zip(split.tail.eigenvalues, split.tail.weights)]
    )
    tail_ok = bool(np.all(tail_abs <= tail_bounds + slack))
    head_ok = head_diff <= head_bound + slack
    return IterateComparison(head_diff, head_bound, tail_abs, tail_bounds, tail_ok, head_ok, sl1, v, vt)


class DeltaTau(NamedTuple):
    delta: float
    tau: float
    delta_bound: float
    tau_bound: float


def delta_tau(split: SplitSpectralMeasure, n: int) -> DeltaTau:
    """Closeness of ``xi^j_{n-1}`` and ``varsigma_n`` to one on the tail, with a priori bounds."""
    system = sigma_system(split, n)
    ell = system.head_rec.grade
    eps = float(np.abs(split.tail.eigenvalues).max()) if len(split.tail) else 0.0
    base = eps / split.lambda_d
    return DeltaTau(
        system.delta,
        system.tau,
        math.expm1((ell - 1) * math.log1p(base)),
        math.expm1(ell * math.log1p(base)),
    )


def psd_contraction_check(S, M):
    """``X = (I + S M)^{-1} S``; returns ``(max |X_ij|, max |S_ij|)``."""
    S = np.asarray(S, dtype=float)
    M = np.asarray(M, dtype=float)
    for name, P in (("S", S), ("M", M)):
        if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-10:
            raise ValueError(f"{name} is not positive semidefinite")
    K = np.eye(S.shape[0]) + S @ M
    if np.linalg.cond(K) > 1e14:
        raise ArithmeticError("I + S M is numerically singular")
    X = np.linalg.solve(K, S)
    return float(np.abs(X).max()), float(np.abs(S).max())


# --- regime of small tail --------------------------------------------------------

def cg_objective(rec: JacobiRecurrence, n: int) -> float:
    """``sum_i varsigma_n(lambda_i)^2 / lambda_i * b_i^2`` over the support of ``rec``."""
    supp = rec.support
    vals = eval_varsigma(rec, n, supp.eigenvalues)
    return float(np.sum(vals**2 / supp.eigenvalues * supp.weights**2))


def measure_norm_sq(rec: JacobiRecurrence, values_fn) -> float:
    supp = rec.support
    vals = values_fn(supp.eigenvalues)
    return float(np.sum(vals**2 * supp.weights**2))


@dataclass(frozen=True)
class CIteration:
    c: float
    n: int
    objective: float
    varsigma_norm_sq: float
    xi_norms_sq: np.ndarray
    system: SigmaSystem
    varsigma_ok: bool  # ||varsigma_n||^2 <= lambda_1 c
    xi_ok: bool  # ||xi^j_{n-1}||^2 >= lambda_d c for all j
    sigma_ok: bool  # ||sigma||_1 <= omega


def c_iteration(split: SplitSpectralMeasure, c: float, slack: float = 1e-12) -> CIteration:
    """Select the smallest n whose CG objective on the head is at most ``c``.

    ``c`` must lie in ``(0, ||b||^2 / lambda_d]``.
    """
    rec = stieltjes(split.head)
    lam_d, lam_1 = split.lambda_d, split.lambda_1
    c_max = rec.norms_sq[0] / lam_d
    if not 0 < c <= c_max * (1 + 1e-12):
        raise ValueError(f"c = {c} outside (0, {c_max}]")
    n = rec.grade
    obj = 0.0
    for k in range(1, rec.grade + 1):
        obj_k = cg_objective(rec, k)
        if obj_k <= c:
            n, obj = k, obj_k
            break
    system = sigma_system(split, n, c=c, head_rec=rec)
    vs = measure_norm_sq(rec, lambda x: eval_varsigma(rec, n, x))
    xin = np.array([h.norm_sq for h in system.xis])
    return CIteration(
        c=c,
        n=n,
        objective=obj,
        varsigma_norm_sq=vs,
        xi_norms_sq=xin,
        system=system,
        varsigma_ok=vs <= lam_1 * c + slack,
        xi_ok=bool(np.all(xin >= lam_d * c - slack)),
        sigma_ok=system.sigma_l1 <= system.omega + slack,
    )


class CBounds(NamedTuple):
    n: int
    omega: float
    v_norm: float
    v_bound: float
    r_norm_sq: float
    r_bound: float
    v_ok: bool
    r_ok: bool


def c_bounds(split: SplitSpectralMeasure, c: float, slack: float = 1e-9) -> CBounds:
    """Iterate and residual bounds at the c-selected iteration, checked against CG.

    Only meaningful when ``omega < 1``; raises ``ValueError`` otherwise.
    """
    it = c_iteration(split, c)
    sysm = it.system
    if not sysm.omega < 1:
        raise ValueError(f"omega = {sysm.omega:.3e} >= 1")
    n = it.n
    At, bt = split.full().dense()
    from .tcg import TcgParams, tcg

    trace = tcg(At, bt, params=TcgParams(mode="plain", max_iterations=n))
    if trace.iterations < n:
        raise NotWellDefinedError(f"CG on the full problem stopped before iteration {n}")
    step = trace.steps[n - 1]
    om, eta, de, ta = sysm.omega, sysm.eta, sysm.delta, sysm.tau
    bf = sysm.B_fro_sq
    v_bound = float(np.linalg.norm(bt)) / ((1 - om) * split.lambda_d)
    r_bound = (split.lambda_1 * c + (1 + eta) * (1 + de) * om * bf + (1 + ta) ** 2 * bf) / (1 - om) ** 2
    r_sq = step.r_norm**2
    return CBounds(n, om, step.v_norm, v_bound, r_sq, r_bound,
                   step.v_norm <= v_bound + slack, r_sq <= r_bound + slack)


def difference_norms(rec: JacobiRecurrence, n: int, lam: float) -> np.ndarray:
    """Norms of ``p_k = (varsigma_n - xi_k) / x`` for k = 0..n-1 on a positive measure."""
    supp = rec.support
    x = supp.eigenvalues
    if np.any(x <= 0):
        raise ValueError("difference polynomials need a positive measure")
    vs = eval_varsigma(rec, n, x)
    out = []
    for k in range(n):
        pk = (vs - xi(rec, k, lam)(x)) / x
        out.append(math.sqrt(np.sum(pk**2 * supp.weights**2)))
    return np.array(out)


# --- diagnostics CSV ---------------------------------------------------------

SIGMA_CSV_HEADER = ["n", "sigma_l1", "s", "delta", "tau", "eta", "omega", "min_root_tilde", "min_root_head"]


def sigma_diagnostics(split: SplitSpectralMeasure, n_values=None) -> List[dict]:
    head_rec = stieltjes(split.head)
    full_rec = stieltjes(split.full())
    rows = []
    for n in n_values or range(1, head_rec.grade + 1):
        system = sigma_system(split, n, head_rec=head_rec)
        rows.append(
            dict(
                n=n,
                sigma_l1=system.sigma_l1,
                s=system.s,
                delta=system.delta,
                tau=system.tau,
                eta=system.eta,
                omega=system.omega,
                min_root_tilde=float(ritz_values(full_rec, n)[0]),
                min_root_head=float(ritz_values(head_rec, n)[0]),
            )
        )
    return rows


def write_sigma_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGMA_CSV_HEADER)
        for row in rows:
            w.writerow([row["n"]] + [format(float(row[k]), ".17g") for k in SIGMA_CSV_HEADER[1:]])
