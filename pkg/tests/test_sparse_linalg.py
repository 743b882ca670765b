import numpy as np
import pytest
import scipy.sparse as sparse

from msflow import sparse_linalg
from msflow.sparse_linalg import (PcgBreakdownError, SingularMatrixError,
                                  condition_estimate, factor,
                                  generalized_symmetric_eig, pcg)


def random_saddle(rng, nv=30, npr=12):
    M = rng.standard_normal((nv, nv))
    A = M @ M.T + nv * np.eye(nv)
    B = rng.standard_normal((npr, nv))
    K = np.zeros((nv + npr + 1, nv + npr + 1))
    K[:nv, :nv] = A
    K[:nv, nv:-1] = B.T
    K[nv:-1, :nv] = B
    K[nv:-1, -1] = 1.0
    K[-1, nv:-1] = 1.0
    return K


def test_factor_matches_dense_solve(rng):
    K = random_saddle(rng)
    rhs = rng.standard_normal(K.shape[0])
    fact = factor(sparse.csc_matrix(K))
    assert np.allclose(fact.solve(rhs), np.linalg.solve(K, rhs),
                       rtol=1e-10, atol=1e-10)


def test_factor_multiple_rhs(rng):
    K = random_saddle(rng)
    rhs = rng.standard_normal((K.shape[0], 3))
    got = factor(sparse.csc_matrix(K)).solve(rhs)
    assert np.allclose(got, np.linalg.solve(K, rhs), rtol=1e-10, atol=1e-10)


def test_factor_rejects_singular():
    K = sparse.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError):
        factor(K)


def test_refinement_tightens_residual(rng):
    # badly scaled system where one refinement pass visibly helps
    n = 40
    scale = np.logspace(-8, 8, n)
    M = rng.standard_normal((n, n))
    K = M @ M.T + np.diag(scale) * n
    rhs = rng.standard_normal(n)
    fact = factor(sparse.csc_matrix(K))
    raw = fact.solve(rhs, refine=0)
    refined = fact.solve(rhs, refine=1)
    assert np.linalg.norm(K @ refined - rhs) <= \
        np.linalg.norm(K @ raw - rhs) + 1e-12


def test_pcg_solves_spd_system(rng):
    n = 50
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, report = pcg(lambda v: A @ v, lambda v: v, b, rel_tol=1e-12,
                    max_iter=200)
    assert report.converged
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-8, atol=1e-10)
    assert report.residuals[0] == 1.0
    assert report.residuals[-1] <= 1e-12


def test_pcg_zero_rhs_short_circuits():
    x, report = pcg(lambda v: v, lambda v: v, np.zeros(5))
    assert report.iterations == 0 and report.converged
    assert np.all(x == 0)


def test_pcg_perfect_preconditioner_one_iteration(rng):
    n = 30
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    inv = np.linalg.inv(A)
    b = rng.standard_normal(n)
    x, report = pcg(lambda v: A @ v, lambda v: inv @ v, b, rel_tol=1e-10)
    assert report.iterations <= 2
    assert abs(report.condition_estimate - 1.0) < 1e-8


def test_pcg_detects_indefinite_operator(rng):
    n = 10
    A = -np.eye(n)
    b = rng.standard_normal(n)
    with pytest.raises(PcgBreakdownError) as excinfo:
        pcg(lambda v: A @ v, lambda v: v, b)
    assert hasattr(excinfo.value, "iterate")
    assert excinfo.value.iterate.shape == (n,)


def test_pcg_max_iter_reports_not_converged(rng):
    n = 60
    scale = np.logspace(0, 6, n)
    A = np.diag(scale)
    b = rng.standard_normal(n)
    x, report = pcg(lambda v: A @ v, lambda v: v, b, rel_tol=1e-14, max_iter=5)
    assert not report.converged
    assert report.iterations == 5


def test_condition_estimate_tracks_spectrum(rng):
    # diagonal system: CG's Lanczos matrix reproduces the extreme
    # eigenvalues well before full convergence
    eigs = np.linspace(1.0, 50.0, 40)
    A = np.diag(eigs)
    b = rng.standard_normal(40)
    x, report = pcg(lambda v: A @ v, lambda v: v, b, rel_tol=1e-12,
                    max_iter=200)
    assert 0.8 * 50.0 <= report.condition_estimate <= 1.02 * 50.0
    alphas, betas = report.lanczos
    assert condition_estimate(alphas, betas[:len(alphas) - 1]) == \
        report.condition_estimate


def test_condition_estimate_degenerate_inputs():
    assert condition_estimate([], []) == 1.0
    assert condition_estimate([0.5], []) == 1.0


def test_reorthogonalize_no_worse(rng):
    n = 80
    scale = np.logspace(0, 6, n)
    M = rng.standard_normal((n, n))
    A = M @ M.T + np.diag(scale)
    b = rng.standard_normal(n)
    x1, r1 = pcg(lambda v: A @ v, lambda v: v, b, rel_tol=1e-8, max_iter=400)
    x2, r2 = pcg(lambda v: A @ v, lambda v: v, b, rel_tol=1e-8, max_iter=400,
                 reorthogonalize=True)
    assert r2.converged
    assert r2.iterations <= r1.iterations + 2


def test_generalized_eig_residuals(rng):
    n = 12
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    W = rng.standard_normal((n, n))
    S = W @ W.T + n * np.eye(n)
    vals, vecs = generalized_symmetric_eig(A, S)
    assert np.all(np.diff(vals) >= 0)
    for k in range(n):
        r = A @ vecs[:, k] - vals[k] * (S @ vecs[:, k])
        assert np.linalg.norm(r) <= 1e-10 * max(1.0, abs(vals[k]))
    gram = vecs.T @ S @ vecs
    assert np.allclose(gram, np.eye(n), atol=1e-10)
