"""Dense symmetric linear algebra and discrete spectral measures.

A spectral measure is the pair (eigenvalues, weights) that defines the
discrete semi-inner product

    <p, q> = sum_i w_i**2 * p(lambda_i) * q(lambda_i)

on which conjugate gradients and the Lanczos polynomials operate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

MERGE_RTOL = 1e-9
WEIGHT_TOL = 1e-12


class SpectralError(ValueError):
    """Raised on invalid operators or measures."""


@dataclass(frozen=True)
class SymmetricOperator:
    """Symmetric linear map given by a matvec and optionally a dense matrix."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    matrix: Optional[np.ndarray] = None

    @classmethod
    def from_matrix(cls, matrix, check: bool = True) -> "SymmetricOperator":
        M = np.array(matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise SpectralError(f"expected a square matrix, got shape {M.shape}")
        if check:
            scale = max(np.abs(M).max(initial=0.0), 1.0)
            asym = np.abs(M - M.T).max(initial=0.0)
            if asym > 1e-12 * scale:
                raise SpectralError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
        M.setflags(write=False)
        return cls(dim=M.shape[0], apply=M.dot, matrix=M)

    def __matmul__(self, v):
        return self.apply(np.asarray(v, dtype=float))

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        eye = np.eye(self.dim)
        cols = np.column_stack([self.apply(eye[:, i]) for i in range(self.dim)])
        return 0.5 * (cols + cols.T)


def as_operator(A) -> SymmetricOperator:
    if isinstance(A, SymmetricOperator):
        return A
    return SymmetricOperator.from_matrix(A, check=False)


def check_symmetric_operator(op: SymmetricOperator, trials: int = 10, seed: int = 0) -> float:
    """Largest normalized asymmetry |<u, Av> - <v, Au>| seen on random unit vectors.

    When a dense realization is present, also checks that ``apply`` agrees with it.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    norm_est = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.dim)
        u /= np.linalg.norm(u)
        norm_est = max(norm_est, np.linalg.norm(op @ u))
    for _ in range(trials):
        u = rng.standard_normal(op.dim)
        v = rng.standard_normal(op.dim)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        Av, Au = op @ v, op @ u
        worst = max(worst, abs(u @ Av - v @ Au) / max(norm_est, 1e-300))
        if op.matrix is not None:
            diff = np.abs(Av - op.matrix @ v).max()
            if diff > 1e-12 * max(norm_est, 1.0):
                raise SpectralError(f"apply disagrees with the dense matrix by {diff:.3e}")
    return worst


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # nonincreasing
    eigenvectors: np.ndarray  # columns, orthonormal

    def reconstruct(self) -> np.ndarray:
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


def symmetric_eigendecompose(A) -> EigenDecomposition:
    """Eigendecomposition of a dense symmetric matrix, eigenvalues nonincreasing."""
    op = A if isinstance(A, SymmetricOperator) else SymmetricOperator.from_matrix(A)
    if op.matrix is None:
        raise SpectralError("a dense realization is required")
    M = op.matrix
    if M.shape[0] > 2000:
        raise SpectralError("dense eigendecomposition limited to dim <= 2000")
    scale = max(np.abs(M).max(initial=0.0), 1.0)
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * scale:
        raise SpectralError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(M)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return EigenDecomposition(vals, vecs)


@dataclass(frozen=True)
class SpectralMeasure:
    """Atoms ``eigenvalues`` (nonincreasing) with signed ``weights``.

    Zero-weight atoms are allowed; they belong to the spectrum but not to the
    weighted support, see :meth:`support`.
    """

    eigenvalues: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).ravel()
        w = np.array(self.weights, dtype=float).ravel()
        if lam.shape != w.shape:
            raise SpectralError("eigenvalues and weights must have the same length")
        if lam.size and np.any(np.diff(lam) > 0):
            raise SpectralError("eigenvalues must be sorted nonincreasing")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(w))):
            raise SpectralError("measure entries must be finite")
        lam.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unsorted(cls, eigenvalues, weights) -> "SpectralMeasure":
        lam = np.asarray(eigenvalues, dtype=float).ravel()
        w = np.asarray(weights, dtype=float).ravel()
        order = np.argsort(-lam, kind="stable")
        return cls(lam[order], w[order])

    def __len__(self):
        return self.eigenvalues.size

    @property
    def total_mass(self) -> float:
        """sum of squared weights, i.e. ||b||**2."""
        return float(self.weights @ self.weights)

    def zero_weight_mask(self, weight_tol: float = WEIGHT_TOL) -> np.ndarray:
        return np.abs(self.weights) <= weight_tol

    def support(self, weight_tol: float = WEIGHT_TOL) -> "SpectralMeasure":
        keep = ~self.zero_weight_mask(weight_tol)
        return SpectralMeasure(self.eigenvalues[keep], self.weights[keep])

    def inner(self, p_values: np.ndarray, q_values: np.ndarray) -> float:
        """Semi-inner product of two polynomials given by their values at the atoms."""
        return float(np.sum(self.weights**2 * p_values * q_values))

    def dense(self):
        """Diagonal realization ``(A, b)``."""
        return np.diag(self.eigenvalues), self.weights.copy()


def grade(measure: SpectralMeasure, weight_tol: float = WEIGHT_TOL) -> int:
    """Number of atoms carrying weight above ``weight_tol``.

    Atoms are assumed distinct (as produced by :func:`measure_from_operator`).
    """
    return int(np.count_nonzero(~measure.zero_weight_mask(weight_tol)))


def measure_from_operator(A, b, merge_rtol: float = MERGE_RTOL) -> SpectralMeasure:
    """Spectral measure of ``(A, b)``: distinct eigenvalues with weights ``||P_lambda b||``.

    Eigenvalues closer than ``merge_rtol`` times the spectral radius are merged
    into one atom.
    """
    b = np.asarray(b, dtype=float).ravel()
    eig = symmetric_eigendecompose(A)
    if b.size != eig.eigenvalues.size:
        raise SpectralError("b has the wrong dimension")
    coords = eig.eigenvectors.T @ b
    vals = eig.eigenvalues
    radius = max(np.abs(vals).max(initial=0.0), np.finfo(float).tiny)
    lams, weights = [], []
    start = 0
    for i in range(1, vals.size + 1):
        if i == vals.size or vals[start] - vals[i] > merge_rtol * radius:
            lams.append(vals[start:i].mean())
            weights.append(np.linalg.norm(coords[start:i]))
            start = i
    return SpectralMeasure(np.array(lams), np.array(weights))


@dataclass(frozen=True)
class SplitSpectralMeasure:
    """Well-conditioned head ``(A, b)`` plus a small-eigenvalue tail.

    The head has smallest eigenvalue ``lambda_d > 0`` and every tail eigenvalue
    is strictly below it.
    """

    head: SpectralMeasure
    tail: SpectralMeasure = field(
        default_factory=lambda: SpectralMeasure(np.empty(0), np.empty(0))
    )

    def __post_init__(self):
        if len(self.head) == 0:
            raise SpectralError("head must contain at least one atom")
        lam_d = self.head.eigenvalues[-1]
        if not lam_d > 0:
            raise SpectralError(f"head eigenvalues must be positive (lambda_d = {lam_d})")
        if len(self.tail) and not lam_d > self.tail.eigenvalues[0]:
            raise SpectralError(
                f"no eigenvalue gap: lambda_d = {lam_d} <= largest tail eigenvalue "
                f"{self.tail.eigenvalues[0]}"
            )

    @property
    def d(self) -> int:
        return len(self.head)

    @property
    def lambda_d(self) -> float:
        return float(self.head.eigenvalues[-1])

    @property
    def lambda_1(self) -> float:
        return float(self.head.eigenvalues[0])

    def full(self) -> SpectralMeasure:
        return SpectralMeasure(
            np.concatenate([self.head.eigenvalues, self.tail.eigenvalues]),
            np.concatenate([self.head.weights, self.tail.weights]),
        )


# --- CSV -----------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_measure_csv(path, measure, split: bool = False) -> None:
    """Write a measure (or a split measure with a ``part`` column) as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if isinstance(measure, SplitSpectralMeasure):
            writer.writerow(["lambda", "weight", "part"])
            for part, m in (("head", measure.head), ("tail", measure.tail)):
                for lam, w in zip(m.eigenvalues, m.weights):
                    writer.writerow([_fmt(lam), _fmt(w), part])
        else:
            writer.writerow(["lambda", "weight"])
            for lam, w in zip(measure.eigenvalues, measure.weights):
                writer.writerow([_fmt(lam), _fmt(w)])


def read_measure_csv(path):
    """Read a measure CSV; returns a :class:`SplitSpectralMeasure` when a ``part`` column exists."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SpectralError(f"{path}: empty measure file")
    missing = {"lambda", "weight"} - set(rows[0])
    if missing:
        raise SpectralError(f"{path}: missing columns {sorted(missing)}")
    if "part" in rows[0]:
        parts = {"head": ([], []), "tail": ([], [])}
        for row in rows:
            part = row["part"].strip()
            if part not in parts:
                raise SpectralError(f"{path}: unknown part {part!r}")
            parts[part][0].append(float(row["lambda"]))
            parts[part][1].append(float(row["weight"]))
        head = SpectralMeasure.from_unsorted(*parts["head"])
        tail = SpectralMeasure.from_unsorted(*parts["tail"])
        return SplitSpectralMeasure(head, tail)
    return SpectralMeasure.from_unsorted(
        [float(r["lambda"]) for r in rows], [float(r["weight"]) for r in rows]
    )
