"""Exact solution of the trust-region subproblem

    minimize  -<b, s> + <s, A s>/2   subject to  ||s|| <= Delta

by eigendecomposition and a safeguarded Newton iteration on the secular
equation ``1/||s(lam)|| = 1/Delta`` where ``s(lam) = (A + lam I)^{-1} b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import as_operator, symmetric_eigendecompose

MAX_DIM = 500


@dataclass(frozen=True)
class TrsSolution:
    step: np.ndarray
    multiplier: float
    on_boundary: bool
    hard_case: bool
    newton_iterations: int = 0


def _secular(coords, lam_sorted, lam):
    denom = lam_sorted + lam
    s_hat = coords / denom
    norm = float(np.linalg.norm(s_hat))
    # d/dlam ||s||  = -sum coords^2 / denom^3 / ||s||
    dnorm = -float(np.sum(coords**2 / denom**3)) / norm
    return s_hat, norm, dnorm


def solve_trs_exact(A, b, Delta: float, rtol: float = 1e-12, max_iter: int = 200) -> TrsSolution:
    """Global minimizer of the quadratic model over the ball of radius ``Delta``.

    Parameters
    ----------
    A : array_like or SymmetricOperator
        Dense symmetric matrix, ``dim <= 500``.
    b : array_like
        Negative model gradient, so an interior solution solves ``A s = b``.
    Delta : float
        Radius.

    Returns
    -------
    TrsSolution
        Step, multiplier ``lam >= 0`` with ``(A + lam I) s = b`` and ``A + lam I`` psd.
    """
    op = as_operator(A)
    if op.dim > MAX_DIM:
        raise ValueError(f"dense exact TRS limited to dim <= {MAX_DIM}")
    if not Delta > 0:
        raise ValueError("Delta must be positive")
    b = np.asarray(b, dtype=float).ravel()
    eig = symmetric_eigendecompose(op.dense())
    vals = eig.eigenvalues[::-1]  # increasing
    Q = eig.eigenvectors[:, ::-1]
    coords = Q.T @ b
    lmin = float(vals[0])
    scale = max(abs(vals).max(), 1e-300)
    bnorm = float(np.linalg.norm(b))

    if bnorm == 0.0:
        if lmin >= 0:
            return TrsSolution(np.zeros_like(b), 0.0, False, False)
        return TrsSolution(Delta * Q[:, 0], -lmin, True, True)

    # interior Newton step
    if lmin > 0:
        s_hat = coords / vals
        if np.linalg.norm(s_hat) <= Delta:
            return TrsSolution(Q @ s_hat, 0.0, False, False)

    lo = max(0.0, -lmin)
    # hard case: b (numerically) orthogonal to the bottom eigenspace
    bottom = vals <= lmin + 1e-10 * scale
    if lmin <= 0 and np.linalg.norm(coords[bottom]) <= 1e-10 * bnorm:
        rest = ~bottom
        s_hat = np.zeros_like(coords)
        s_hat[rest] = coords[rest] / (vals[rest] - lmin)
        perp = float(np.linalg.norm(s_hat))
        if perp <= Delta:
            tau = math.sqrt(max(Delta**2 - perp**2, 0.0))
            s_hat[np.argmax(bottom)] = tau  # first bottom eigenvector
            return TrsSolution(Q @ s_hat, lo, True, True)

    # root of phi(lam) = 1/||s(lam)|| - 1/Delta on (lo, hi]; phi is increasing and concave
    hi = max(lo, bnorm / Delta - lmin) * (1 + 1e-12) + 1e-300
    a, c = lo, hi
    lam = hi
    it = 0
    for it in range(1, max_iter + 1):
        s_hat, norm, dnorm = _secular(coords, vals, lam)
        if abs(norm - Delta) <= rtol * Delta:
            break
        if norm > Delta:
            a = lam
        else:
            c = lam
        # Newton on 1/||s|| - 1/Delta
        phi = 1.0 / norm - 1.0 / Delta
        dphi = -dnorm / norm**2
        cand = lam - phi / dphi if dphi > 0 else math.nan
        lam = cand if a < cand < c else 0.5 * (a + c)
        if c - a <= 1e-15 * max(c, 1e-300):
            s_hat, norm, dnorm = _secular(coords, vals, lam)
            break
    # hard-case-like degeneracy: lam pinned at the pole with ||s|| < Delta
    hard = lam - lo <= 1e-12 * scale and norm < Delta * (1 - 1e-8)
    if hard:
        tau = math.sqrt(max(Delta**2 - norm**2, 0.0))
        s_hat = s_hat.copy()
        s_hat[0] += tau
    step = Q @ s_hat
    if not hard:
        step *= Delta / np.linalg.norm(step)
    return TrsSolution(step, float(lam), True, bool(hard), it)


def kkt_residuals(A, b, Delta: float, sol: TrsSolution) -> dict:
    """Stationarity, psd-ness, complementarity and feasibility defects of a solution."""
    op = as_operator(A)
    b = np.asarray(b, dtype=float)
    M = op.dense()
    lam = sol.multiplier
    s = sol.step
    stat = float(np.linalg.norm(M @ s + lam * s - b))
    min_eig = float(np.linalg.eigvalsh(M + lam * np.eye(M.shape[0])).min())
    return dict(
        stationarity=stat,
        min_eigenvalue=min_eig,
        complementarity=abs(lam * (Delta - float(np.linalg.norm(s)))),
        excess=float(np.linalg.norm(s)) - Delta,
    )
