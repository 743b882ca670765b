"""Sparse direct and iterative kernels used across the solver stack.

Factorization wraps a pivoted sparse LU with an explicit near-singularity
check and one step of iterative refinement per solve, which keeps the
divergence rows of bordered saddle systems satisfied to near round-off
even at strong coefficient contrast.

The conjugate gradient solver measures convergence in the natural norm
sqrt(r' M^{-1} r).  With an identity preconditioner this is the plain
Euclidean residual norm; with the two-grid preconditioner it is the
correct residual measure on the divergence-free subspace, where the
unprojected residual stalls at a gradient component by design.  The CG
coefficients feed a Lanczos tridiagonal whose extreme eigenvalues
estimate the condition number of the preconditioned operator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import eigh, eigvalsh_tridiagonal
from scipy.sparse.linalg import splu


class SingularMatrixError(RuntimeError):
    """Factorization met a pivot too small to trust."""


class PcgBreakdownError(RuntimeError):
    """CG observed curvature or preconditioner output incompatible with
    a symmetric positive definite pair.

    When an iterate exists at the point of failure it is attached as
    the `iterate` attribute.
    """


@dataclass
class SaddleFactorization:
    """Pivoted LU of a (bordered) sparse matrix with refined solves."""

    matrix: sparse.csc_matrix
    lu: object

    @property
    def shape(self):
        return self.matrix.shape

    def solve(self, rhs, refine: int = 1) -> np.ndarray:
        """Solve to LU accuracy, then polish with `refine` residual
        correction passes (cheap: one triangular solve each)."""
        rhs = np.asarray(rhs, dtype=float)
        x = self.lu.solve(rhs)
        for _ in range(refine):
            r = rhs - self.matrix @ x
            x += self.lu.solve(r)
        return x


def factor(matrix, pivot_rtol: float = 1e-14) -> SaddleFactorization:
    """Factor a square sparse matrix, rejecting near-singular pivots.

    The pivot threshold is relative to the largest entry of the matrix;
    an offending pivot is reported by its elimination index.
    """
    matrix = sparse.csc_matrix(matrix)
    n = matrix.shape[0]
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix is {matrix.shape}, expected square")
    if n == 0:
        raise ValueError("cannot factor an empty matrix")
    scale = np.abs(matrix.data).max() if matrix.nnz else 0.0
    if scale == 0.0:
        raise SingularMatrixError("matrix is identically zero")
    try:
        lu = splu(matrix)
    except RuntimeError as err:
        raise SingularMatrixError(f"sparse LU failed: {err}") from err
    pivots = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(pivots < pivot_rtol * scale)
    if len(bad):
        k = int(bad[0])
        raise SingularMatrixError(
            f"pivot {k} of {n} is {pivots[k]:.3e}, below "
            f"{pivot_rtol:.0e} * max entry {scale:.3e}"
        )
    return SaddleFactorization(matrix=matrix, lu=lu)


@dataclass
class PcgReport:
    """Iteration record of one preconditioned CG run."""

    iterations: int
    converged: bool
    residuals: list = field(default_factory=list)
    condition_estimate: float = 1.0
    wall_time: float = 0.0
    lanczos: tuple = ()

    @property
    def final_relative_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0


def condition_estimate(alphas, betas) -> float:
    """Spectral condition estimate from CG coefficients.

    Builds the Lanczos tridiagonal T with T[0,0] = 1/a0,
    T[j,j] = 1/a_j + b_j/a_{j-1} and off-diagonal sqrt(b_j)/a_{j-1};
    its extreme eigenvalues approximate those of the preconditioned
    operator.  Fewer than two iterations give 1.0.
    """
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)
    k = len(alphas)
    if k == 0:
        return 1.0
    diag = np.empty(k)
    diag[0] = 1.0 / alphas[0]
    if k == 1:
        return 1.0
    diag[1:] = 1.0 / alphas[1:] + betas / alphas[:-1]
    off = np.sqrt(betas) / alphas[:-1]
    ev = eigvalsh_tridiagonal(diag, off)
    lo, hi = float(ev[0]), float(ev[-1])
    if lo <= 0:
        return float("inf")
    return hi / lo


def pcg(apply_operator, apply_preconditioner, rhs, rel_tol: float = 1e-7,
        max_iter: int = 500, reorthogonalize: bool = False,
        abs_floor: float = 0.0):
    """Preconditioned conjugate gradients in the natural norm.

    `apply_operator` and `apply_preconditioner` are callables mapping a
    vector to a vector; both must be symmetric positive definite on the
    subspace containing the right-hand side and all iterates.  Returns
    (solution, PcgReport).  Non-positive curvature or a non-positive
    preconditioned inner product raises PcgBreakdownError, since either
    contradicts the SPD assumption.

    `abs_floor` is an absolute stopping level for the natural norm.
    When the preconditioner projects onto a subspace, a right-hand side
    with no component there produces a natural norm made of pure
    roundoff; iterating on it amplifies noise instead of converging.
    Callers that know the roundoff level of their data pass it here and
    such systems stop immediately with the zero solution.
    """
    t0 = time.perf_counter()
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    alphas, betas = [], []
    history = []
    past = []  # normalized (r, z) pairs, kept only when reorthogonalizing

    z = apply_preconditioner(r)
    rho = float(r @ z)
    if rho < 0:
        raise PcgBreakdownError(
            f"initial preconditioned inner product {rho:.3e} is negative"
        )
    norm0 = np.sqrt(rho)
    if norm0 <= abs_floor:
        report = PcgReport(iterations=0, converged=True,
                           residuals=[1.0 if norm0 else 0.0],
                           wall_time=time.perf_counter() - t0)
        return x, report
    history.append(1.0)
    floor_rel = abs_floor / norm0
    p = z.copy()
    converged = False
    sqrt_rho = np.sqrt(rho)
    for it in range(1, max_iter + 1):
        Ap = apply_operator(p)
        curvature = float(p @ Ap)
        if curvature <= 0:
            err = PcgBreakdownError(
                f"non-positive curvature {curvature:.3e} at iteration {it}; "
                "operator is not SPD on the iterate subspace"
            )
            err.iterate = x
            raise err
        alpha = rho / curvature
        x += alpha * p
        if reorthogonalize:
            past.append((r / sqrt_rho, z / sqrt_rho))
        r -= alpha * Ap
        z = apply_preconditioner(r)
        if reorthogonalize:
            for r_hat, z_hat in past:
                z -= (z @ r_hat) * z_hat
        rho_next = float(r @ z)
        if rho_next < 0:
            err = PcgBreakdownError(
                f"preconditioned inner product {rho_next:.3e} turned "
                f"negative at iteration {it}"
            )
            err.iterate = x
            raise err
        alphas.append(alpha)
        sqrt_rho = np.sqrt(max(rho_next, 0.0))
        history.append(sqrt_rho / norm0)
        if history[-1] <= max(rel_tol, floor_rel):
            converged = True
            rho = rho_next
            break
        if history[-1] > 1e8:
            err = PcgBreakdownError(
                f"natural-norm residual grew {history[-1]:.1e}-fold by "
                f"iteration {it}; the operator/preconditioner pair is not "
                "behaving as SPD on this right-hand side")
            err.iterate = x
            raise err
        beta = rho_next / rho
        betas.append(beta)
        p = z + beta * p
        rho = rho_next
    report = PcgReport(
        iterations=len(alphas),
        converged=converged,
        residuals=history,
        condition_estimate=condition_estimate(alphas, betas[: len(alphas) - 1]),
        wall_time=time.perf_counter() - t0,
        lanczos=(tuple(alphas), tuple(betas)),
    )
    return x, report


def generalized_symmetric_eig(a, s):
    """Dense generalized symmetric eigensolve a x = lambda s x.

    `a` must be symmetric positive semidefinite and `s` symmetric
    positive definite; eigenvalues come back ascending with
    s-orthonormal eigenvectors (LAPACK's Cholesky reduction).
    """
    a = np.asarray(a, dtype=float)
    s = np.asarray(s, dtype=float)
    if a.shape != s.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"shape mismatch: a {a.shape}, s {s.shape}")
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError as err:
        raise ValueError(
            "metric matrix is not positive definite; cannot reduce the "
            "generalized problem"
        ) from err
    w, v = eigh(a, s)
    return w, v
