"""Two-grid preconditioned CG solver for the mixed velocity system.

The flow problem is solved in two stages.  A preprocessing step produces
a velocity whose divergence matches the source cell by cell, built from
a coarse saddle solve plus independent per-block corrections.  The
remaining divergence-free correction is then computed by CG on the
velocity mass operator, preconditioned with a V-cycle that combines an
additive overlapping-block smoother with a Galerkin coarse correction.

Both preconditioner stages return divergence-free velocities and
annihilate discrete gradients, so plain CG updates never leave the
constraint subspace and no explicit projection is needed.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .mixed_fem import MixedOperators, block_solvers
from .sparse_linalg import PcgBreakdownError, factor, pcg, PcgReport
from .coarse_space import CoarseBasis, CoarseOperator, coarse_operator


@dataclass
class SolverSettings:
    """Knobs for the preconditioned solve.

    `eta` damps the additive smoother; with up to 2**d overlapping
    regions covering a dof, eta <= 2**-d keeps the smoother a
    contraction, and 0.2 is a safe default in 2D and 3D.
    """

    rel_tol: float = 1e-7
    max_iter: int = 500
    eta: float = 0.2
    pre_smooth: int = 1
    post_smooth: int = 1
    overlap: int = 2
    reorthogonalize: bool = False


class TwoGridPreconditioner:
    """Additive block smoother wrapped around a coarse correction.

    apply() runs a symmetric V-cycle: `pre_smooth` damped smoother
    sweeps, one coarse solve, `post_smooth` sweeps, recomputing the
    residual between stages.  Equal sweep counts keep the operator
    symmetric positive definite, which CG requires.
    """

    def __init__(self, grid, operators: MixedOperators, coarse: CoarseOperator,
                 blocks: list, eta: float, pre_smooth: int = 1,
                 post_smooth: int = 1):
        self.grid = grid
        self.operators = operators
        self.coarse = coarse
        self.blocks = blocks
        self.eta = eta
        self.pre_smooth = pre_smooth
        self.post_smooth = post_smooth

    def smooth(self, r: np.ndarray) -> np.ndarray:
        """One damped additive sweep: sum of local saddle solves of r."""
        z = np.zeros_like(r)
        for bs in self.blocks:
            idx = bs.velocity_idx
            sol = bs.solve(bs.assemble_rhs(r[idx], None))
            z[idx] += self.eta * sol[:bs.n_velocity]
        return z

    def coarse_correct(self, r: np.ndarray) -> np.ndarray:
        P_v = self.coarse.basis.P_v
        y_v, _, _ = self.coarse.solve(P_v.T @ r, None)
        return P_v @ y_v

    def apply(self, r: np.ndarray) -> np.ndarray:
        A = self.operators.A
        z = np.zeros_like(r)
        for _ in range(self.pre_smooth):
            z += self.smooth(r - A @ z)
        z += self.coarse_correct(r - A @ z)
        for _ in range(self.post_smooth):
            z += self.smooth(r - A @ z)
        return z


def build_preconditioner(grid, operators: MixedOperators, basis: CoarseBasis,
                         settings: SolverSettings | None = None,
                         coarse: CoarseOperator | None = None):
    settings = settings or SolverSettings()
    if settings.overlap < 1:
        # without oversampling the block interiors miss every coarse-face
        # dof and the V-cycle goes singular there, stalling CG silently
        raise ValueError("smoother overlap must be at least 1 fine layer")
    if settings.pre_smooth != settings.post_smooth or settings.pre_smooth < 1:
        raise ValueError(
            "CG needs a symmetric positive definite V-cycle; use equal "
            "pre/post smoothing counts of at least 1")
    if coarse is None:
        coarse = coarse_operator(basis, operators)
    blocks = block_solvers(grid, operators, overlap=settings.overlap)
    return TwoGridPreconditioner(grid, operators, coarse, blocks,
                                 settings.eta, settings.pre_smooth,
                                 settings.post_smooth)


@dataclass
class PreprocessResult:
    velocity: np.ndarray
    coarse_velocity: np.ndarray
    divergence_error: float
    coarse_residual: float = 0.0
    block_correction_norms: np.ndarray | None = None


def preprocess(grid, operators: MixedOperators, coarse: CoarseOperator,
               source: np.ndarray,
               solvers: list | None = None) -> PreprocessResult:
    """Velocity matching the source divergence exactly, cell by cell.

    A coarse saddle solve balances the source between blocks; local
    block solves then absorb the within-block mismatch.  The coarse
    pressure space contains the block indicators, so each local problem
    is compatible by construction; a large block imbalance therefore
    means the coarse solve itself went wrong and is treated as fatal.
    """
    P_v = coarse.basis.P_v
    P_p = coarse.basis.P_p
    rhs_p = P_p.T @ source
    y_v, y_p, mu = coarse.solve(None, rhs_p)
    v_coarse = P_v @ y_v
    full = np.concatenate([np.zeros(coarse.n_velocity), rhs_p, [0.0]])
    sol = np.concatenate([y_v, y_p, [mu]])
    coarse_residual = float(
        np.max(np.abs(coarse.factorization.matrix @ sol - full)))

    scale = max(1.0, float(np.max(np.abs(source))))
    residual = source - operators.B @ v_coarse
    Av = operators.A @ v_coarse
    v = v_coarse.copy()
    if solvers is None:
        solvers = block_solvers(grid, operators, overlap=0)
    norms = np.zeros(len(solvers))
    for bs in solvers:
        cells = bs.pressure_idx
        imbalance = abs(float(residual[cells].sum()))
        if imbalance > 1e-10 * scale * len(cells):
            raise RuntimeError(
                f"block {bs.block} source imbalance {imbalance:.3e} after the "
                f"coarse solve; the coarse pressure space is inconsistent")
        idx = bs.velocity_idx
        sol = bs.solve(bs.assemble_rhs(-Av[idx], residual[cells]))
        correction = sol[:bs.n_velocity]
        norms[bs.block] = np.linalg.norm(correction)
        v[idx] += correction

    err = float(np.max(np.abs(operators.B @ v - source)))
    if err > 1e-10 * scale:
        raise RuntimeError(f"preprocessing left divergence error {err:.3e}")
    return PreprocessResult(v, v_coarse, err, coarse_residual, norms)


@dataclass
class SolveResult:
    velocity: np.ndarray
    report: PcgReport
    pressure: np.ndarray | None = None
    divergence_error: float = 0.0


def solve(grid, operators: MixedOperators, basis: CoarseBasis,
          source: np.ndarray, settings: SolverSettings | None = None,
          with_pressure: bool = False,
          preconditioner: TwoGridPreconditioner | None = None) -> SolveResult:
    """Full velocity solve: preprocessing plus preconditioned CG.

    CG runs on the mass operator restricted to divergence-free
    velocities, starting from the preprocessed field; the reported
    residual history is in the preconditioner norm, relative to the
    first residual.
    """
    settings = settings or SolverSettings()
    if preconditioner is None:
        preconditioner = build_preconditioner(grid, operators, basis, settings)
    pre = preprocess(grid, operators, preconditioner.coarse, source)

    A = operators.A
    rhs = -(A @ pre.velocity)
    # when the preprocessed field already solves the momentum equation,
    # the rhs is a pure discrete gradient and its natural norm is all
    # roundoff; stop CG at the roundoff level of the preprocessed energy
    energy = max(float(-(pre.velocity @ rhs)), 0.0)
    floor = 4.0 * np.sqrt(np.finfo(float).eps * energy)
    try:
        w, report = pcg(lambda x: A @ x, preconditioner.apply, rhs,
                        rel_tol=settings.rel_tol, max_iter=settings.max_iter,
                        reorthogonalize=settings.reorthogonalize,
                        abs_floor=floor)
    except PcgBreakdownError as exc:
        iterate = getattr(exc, "iterate", None)
        if iterate is not None:
            div = float(np.max(np.abs(operators.B @ iterate)))
            raise PcgBreakdownError(
                f"{exc}; iterate divergence norm {div:.3e}") from exc
        raise
    v = pre.velocity + w
    result = SolveResult(v, report)
    result.divergence_error = float(np.max(np.abs(operators.B @ v - source)))
    if with_pressure:
        result.pressure = recover_pressure(operators, v)
    return result


def recover_pressure(operators: MixedOperators, v: np.ndarray) -> np.ndarray:
    """Zero-mean cell pressures from the momentum balance.

    Solves the normal equations of  grad(p) = -A v  with the mean pinned
    by a bordered direct factorization; B B^T is a standard cell
    Laplacian, singular only along constants.
    """
    B = operators.B
    n = B.shape[0]
    normal = (B @ B.T).tocsc()
    ones = np.ones((n, 1))
    bordered = sparse.bmat([[normal, ones], [ones.T, None]], format="csc")
    Av = operators.A @ v
    rhs = np.concatenate([-(B @ Av), [0.0]])
    p = factor(bordered).solve(rhs)[:n]
    p -= p.mean()
    momentum = np.linalg.norm(Av + B.T @ p)
    if momentum > 1e-5 * max(np.linalg.norm(Av), 1e-300):
        warnings.warn(
            f"pressure recovery momentum residual {momentum:.3e}; the "
            f"velocity is probably not converged", RuntimeWarning)
    return p
