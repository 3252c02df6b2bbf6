import numpy as np
import pytest

from lagcoupling.errors import NumericalError
from lagcoupling.glasso import (PrecisionPair, build_penalty, glasso_objective, lasso_solve, pglasso_banded)
from oracles import dense_glasso


def random_pd(p, rng, cond=5.0):
    A = rng.standard_normal((p, p + 3))
    S = A @ A.T / (p + 3)
    return S + np.eye(p) * np.trace(S) / p / cond


def test_penalty_t2():
    pen = build_penalty(2, 0.1, 0.0, 0.05, 1, 1)
    L = pen.dense()
    assert L.shape == (4, 4)
    assert np.all(np.diag(L) == 0.05)
    assert L[0, 1] == 0 and L[2, 3] == 0
    assert np.all(L[:2, 2:] == 0.1)
    assert np.all(np.isfinite(L))


def test_penalty_forbidden_cross():
    L = build_penalty(3, 0.1, 0.2, 0.05, 1, 1).dense()
    assert np.isinf(L[0, 5]) and np.isinf(L[2, 3])
    assert np.isinf(L[0, 2])
    assert L[0, 4] == 0.1


def test_penalty_symmetric_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = int(rng.integers(2, 12))
        L = build_penalty(T, rng.random(), rng.random(), rng.random(),
                          int(rng.integers(0, T)), int(rng.integers(0, T))).dense()
        assert np.array_equal(L, L.T)


def test_band_mask_matches_penalty():
    pen = build_penalty(8, 0.1, 0.0, 0.1, 2, 3)
    assert np.array_equal(pen.band_mask(), np.isfinite(pen.dense()[:8, 8:]))


def test_lasso_unpenalized():
    rng = np.random.default_rng(1)
    Q = random_pd(5, rng)
    c = rng.standard_normal(5)
    x = lasso_solve(Q, c, np.zeros(5))
    assert np.max(np.abs(x + np.linalg.solve(Q, c))) < 1e-8


def test_lasso_soft_threshold():
    x = lasso_solve(np.eye(2), np.array([-1.0, -0.05]), np.array([0.1, 0.1]))
    assert np.allclose(x, [0.9, 0.0], atol=1e-12)


def test_lasso_full_shrinkage():
    c = np.array([0.3, -0.2, 0.1])
    assert np.all(lasso_solve(np.eye(3), c, np.full(3, 0.3)) == 0)


def test_lasso_not_pd():
    with pytest.raises(NumericalError):
        lasso_solve(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2), np.zeros(2))


def _start(S, lam):
    return PrecisionPair.from_covariance(S + np.diag(np.diag(lam)))


def test_pglasso_diagonal_only():
    rng = np.random.default_rng(2)
    S = random_pd(6, rng)
    lam = np.full((6, 6), np.inf)
    np.fill_diagonal(lam, 0.3)
    pp, _ = pglasso_banded(_start(S, lam), S, lam, ths=1e-12)
    assert np.allclose(pp.omega, np.diag(1 / (np.diag(S) + 0.3)), atol=1e-12)


def test_pglasso_mle_limit():
    rng = np.random.default_rng(3)
    S = random_pd(6, rng)
    lam = np.zeros((6, 6))
    pp, _ = pglasso_banded(_start(S, lam), S, lam, iter_max=500, ths=1e-12)
    assert np.max(np.abs(pp.omega - np.linalg.inv(S))) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_pglasso_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    pen = build_penalty(3, rng.uniform(0.02, 0.3), rng.uniform(0, 0.2), rng.uniform(0, 0.2), 1, 1)
    S = random_pd(6, rng)
    lam = pen.dense()
    pp, _ = pglasso_banded(_start(S, lam), S, pen, iter_max=2000, ths=1e-12)
    ref = dense_glasso(S, lam)
    assert np.max(np.abs(pp.omega - ref)) < 1e-5


def test_pglasso_monotone_exact_band_coherent():
    rng = np.random.default_rng(4)
    T = 8
    pen = build_penalty(T, 0.1, 0.05, 0.1, 2, 3)
    lam = pen.dense()
    S = random_pd(2 * T, rng)
    pp = _start(S, lam)
    prev = glasso_objective(pp.omega, S, lam)
    for _ in range(15):
        pp, _ = pglasso_banded(pp, S, lam, iter_max=1, ths=0.0)
        obj = glasso_objective(pp.omega, S, lam)
        assert obj <= prev + 1e-9
        assert np.all(pp.omega[np.isinf(lam)] == 0)
        prev = obj
    assert np.max(np.abs(pp.omega @ pp.sigma - np.eye(2 * T))) <= 1e-6


def test_pglasso_time_reversal_equivariance():
    rng = np.random.default_rng(5)
    T = 6
    pen = build_penalty(T, 0.08, 0.02, 0.1, 2, 2)
    lam = pen.dense()
    S = random_pd(2 * T, rng)
    perm = np.concatenate([np.arange(T)[::-1], T + np.arange(T)[::-1]])
    a, _ = pglasso_banded(_start(S, lam), S, lam, iter_max=3000, ths=1e-13)
    Sp = S[np.ix_(perm, perm)]
    lp = lam[np.ix_(perm, perm)]
    assert np.array_equal(lp, lam)
    b, _ = pglasso_banded(_start(Sp, lp), Sp, lp, iter_max=3000, ths=1e-13)
    assert np.max(np.abs(b.omega - a.omega[np.ix_(perm, perm)])) < 1e-7


def test_pglasso_reports_convergence():
    rng = np.random.default_rng(6)
    S = random_pd(6, rng)
    lam = build_penalty(3, 0.1, 0.0, 0.1, 1, 1).dense()
    _, info = pglasso_banded(_start(S, lam), S, lam, iter_max=200, ths=1e-8)
    assert info["converged"] and info["iterations"] <= 200
