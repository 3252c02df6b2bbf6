"""Banded-penalty graphical LASSO.

The precision matrix is indexed jointly over both regions: joint index
``i = k * T + t`` for region ``k`` in ``{0, 1}`` and time ``t``. Penalties
are finite only inside the bands ``|t - s| <= d_auto`` (within a region)
and ``|t - s| <= d_cross`` (across regions); everything outside is forced
to zero.

The solver is a primal block coordinate descent (P-gLASSO) that keeps the
covariance ``Sigma = inv(Omega)`` up to date by rank-one corrections. Each
row/column subproblem is a LASSO over the finite-penalty neighbours only,
so its size is at most ``2 * d_auto + 2 * d_cross + 1``.
"""
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import NumericalError, ParamError

__all__ = [
    "PenaltyMatrix",
    "PrecisionPair",
    "build_penalty",
    "glasso_objective",
    "lasso_solve",
    "pglasso_banded",
]

LASSO_TOL = 1e-10
LASSO_MAX_SWEEPS = 100_000


@dataclass(frozen=True)
class PenaltyMatrix:
    T: int
    d_auto: int
    d_cross: int
    lambda_auto: float
    lambda_cross: float
    lambda_diag: float

    def dense(self):
        """The full ``2T x 2T`` penalty array, ``inf`` outside the bands."""
        T = self.T
        t = np.arange(T)
        lag = np.abs(t[:, None] - t[None, :])
        auto = np.where(lag <= self.d_auto, self.lambda_auto, np.inf)
        np.fill_diagonal(auto, self.lambda_diag)
        cross = np.where(lag <= self.d_cross, self.lambda_cross, np.inf)
        return np.block([[auto, cross], [cross.T, auto]])

    def band_mask(self):
        """Boolean ``T x T`` mask of cross-region cells inside the band."""
        t = np.arange(self.T)
        return np.abs(t[:, None] - t[None, :]) <= self.d_cross

    def with_lambda_cross(self, value):
        return PenaltyMatrix(self.T, self.d_auto, self.d_cross, self.lambda_auto, float(value), self.lambda_diag)


def build_penalty(T, lambda_cross, lambda_auto, lambda_diag, d_cross, d_auto):
    if T < 1:
        raise ParamError("T must be positive")
    if not (0 <= d_cross < T and 0 <= d_auto < T):
        raise ParamError(f"bandwidths d_cross={d_cross}, d_auto={d_auto} must lie in [0, T-1]")
    for name, v in (("lambda_cross", lambda_cross), ("lambda_auto", lambda_auto), ("lambda_diag", lambda_diag)):
        if not v >= 0:
            raise ParamError(f"{name} must be nonnegative")
    return PenaltyMatrix(int(T), int(d_auto), int(d_cross), float(lambda_auto), float(lambda_cross), float(lambda_diag))


@dataclass
class PrecisionPair:
    omega: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_covariance(cls, sigma):
        sigma = np.array(sigma, dtype=float)
        return cls(_spd_inverse(sigma, "initial covariance"), sigma)

    def copy(self):
        return PrecisionPair(self.omega.copy(), self.sigma.copy())


def _spd_inverse(a, what="matrix"):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc
    ci = np.linalg.inv(c)
    inv = ci.T @ ci
    return (inv + inv.T) / 2


def glasso_objective(omega, sigma_bar, penalty):
    """``-log det(omega) + tr(omega sigma_bar) + sum |Lambda * omega|``.

    ``penalty`` is a :class:`PenaltyMatrix` or a dense array. Infinite
    penalties contribute nothing where ``omega`` is exactly zero and make
    the objective infinite otherwise.
    """
    lam = penalty.dense() if isinstance(penalty, PenaltyMatrix) else np.asarray(penalty, dtype=float)
    omega = np.asarray(omega, dtype=float)
    sign, logdet = np.linalg.slogdet(omega)
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("omega is not positive definite") from exc
    inf = np.isinf(lam)
    if np.any(omega[inf] != 0):
        return np.inf
    pen = np.sum(lam[~inf] * np.abs(omega[~inf]))
    return float(-logdet + np.sum(omega * sigma_bar) + pen)


@njit(cache=True)
def _cholesky(a):
    n = a.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, b):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def _lasso_cd(Q, c, pen, x, tol, max_sweeps):
    """Cyclic coordinate descent for 0.5 x'Qx + c'x + sum pen|x|.

    Returns (x, status) with status 0 converged, 1 not PD, 2 sweep cap hit.
    Convergence is certified by the duality gap.
    """
    n = Q.shape[0]
    if n == 0:
        return x, 0
    L, ok = _cholesky(Q)
    if not ok:
        return x, 1
    g = Q @ x + c
    for sweep in range(max_sweeps):
        for i in range(n):
            qii = Q[i, i]
            z = qii * x[i] - g[i]
            if z > pen[i]:
                xi = (z - pen[i]) / qii
            elif z < -pen[i]:
                xi = (z + pen[i]) / qii
            else:
                xi = 0.0
            delta = xi - x[i]
            if delta != 0.0:
                x[i] = xi
                for j in range(n):
                    g[j] += delta * Q[j, i]
        # gap = -x'u + pen'|x| + 0.5 r'Q^{-1}r with u = clip(-g), r = g + u
        gap = 0.0
        r = np.empty(n)
        for i in range(n):
            u = -g[i]
            if u > pen[i]:
                u = pen[i]
            elif u < -pen[i]:
                u = -pen[i]
            r[i] = g[i] + u
            gap += pen[i] * abs(x[i]) - x[i] * u
        gap += 0.5 * np.dot(r, _chol_solve(L, r))
        if gap <= tol:
            return x, 0
    return x, 2


def lasso_solve(Q, c, penalties, init=None, tol=LASSO_TOL):
    """Minimise ``0.5 x'Qx + c'x + sum_i penalties_i |x_i|``.

    Cyclic coordinate soft-thresholding, run until the duality gap is at
    most ``tol``.
    """
    Q = np.ascontiguousarray(Q, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    pen = np.ascontiguousarray(penalties, dtype=float)
    if np.any(pen < 0) or np.any(~np.isfinite(pen)):
        raise ParamError("LASSO penalties must be finite and nonnegative")
    x = np.zeros(len(c)) if init is None else np.array(init, dtype=float)
    x, status = _lasso_cd(Q, c, pen, x, tol, LASSO_MAX_SWEEPS)
    if status == 1:
        raise NumericalError("LASSO quadratic form is not positive definite")
    if status == 2:
        raise NumericalError("LASSO did not reach the requested duality gap")
    return _polish(Q, c, pen, x)


def _polish(Q, c, pen, x):
    """Exact solve on the support of ``x``, kept only if it satisfies the KKT conditions."""
    act = np.flatnonzero(x)
    if act.size == 0:
        return x
    sgn = np.sign(x[act])
    try:
        y = np.linalg.solve(Q[np.ix_(act, act)], -(c[act] + pen[act] * sgn))
    except np.linalg.LinAlgError:
        return x
    if np.any(np.sign(y) != sgn):
        return x
    z = np.zeros_like(x)
    z[act] = y
    g = Q @ z + c
    idle = np.ones(len(x), dtype=bool)
    idle[act] = False
    if np.any(np.abs(g[idle]) > pen[idle] * (1 + 1e-12) + 1e-14):
        return x
    return z


@njit(cache=True)
def _pglasso(omega, sigma, S, lam, nbr_idx, nbr_cnt, iter_max, ths, lasso_tol):
    """In-place banded P-gLASSO sweeps.

    Returns (iterations, status, failing column); status 0 converged,
    1 iteration cap, 2 lost positive definiteness, 3 LASSO sweep cap.
    """
    P = S.shape[0]
    sigma_last = np.empty_like(sigma)
    for it in range(iter_max):
        sigma_last[:, :] = sigma
        for p in range(P):
            nd = nbr_cnt[p]
            D = nbr_idx[p, :nd]
            sp_old = sigma[p, p]
            if not sp_old > 0.0:
                return it + 1, 2, p
            sig_old = sigma[:, p].copy()
            sig_old[p] = 0.0
            sp = S[p, p] + lam[p, p]
            if not sp > 0.0:
                return it + 1, 2, p
            # W = Sigma_{-p,-p} - sig sig' / Sigma_pp; only W[:, D] is needed
            WD = np.empty((P, nd))
            for a in range(nd):
                q = D[a]
                f = sig_old[q] / sp_old
                for i in range(P):
                    WD[i, a] = sigma[i, q] - sig_old[i] * f
            for a in range(nd):
                WD[p, a] = 0.0
            Q = np.empty((nd, nd))
            c = np.empty(nd)
            pen = np.empty(nd)
            x = np.empty(nd)
            for a in range(nd):
                q = D[a]
                c[a] = S[p, q]
                pen[a] = lam[p, q]
                x[a] = omega[p, q]
                for b in range(nd):
                    Q[a, b] = sp * WD[q, b]
            x, st = _lasso_cd(Q, c, pen, x, lasso_tol, 100000)
            if st == 1:
                return it + 1, 2, p
            if st == 2:
                return it + 1, 3, p
            for i in range(P):
                if i != p:
                    omega[p, i] = 0.0
                    omega[i, p] = 0.0
            for a in range(nd):
                omega[p, D[a]] = x[a]
                omega[D[a], p] = x[a]
            sig_new = -sp * (WD @ x)
            sig_new[p] = 0.0
            acc = 0.0
            for a in range(nd):
                acc += x[a] * sig_new[D[a]]
            omega[p, p] = (1.0 - acc) / sp
            # Sigma_{-p,-p} = W + sig_new sig_new' / sp
            for i in range(P):
                if i == p:
                    continue
                fi_old = sig_old[i] / sp_old
                fi_new = sig_new[i] / sp
                for j in range(P):
                    if j == p:
                        continue
                    sigma[i, j] += sig_new[j] * fi_new - sig_old[j] * fi_old
            for i in range(P):
                sigma[i, p] = sig_new[i]
                sigma[p, i] = sig_new[i]
            sigma[p, p] = sp
        diff = 0.0
        for i in range(P):
            for j in range(P):
                dd = abs(sigma[i, j] - sigma_last[i, j])
                if dd > diff:
                    diff = dd
        if diff < ths:
            return it + 1, 0, -1
    return iter_max, 1, -1


def _neighbours(lam):
    P = lam.shape[0]
    finite = np.isfinite(lam)
    np.fill_diagonal(finite, False)
    cnt = finite.sum(axis=1).astype(np.int64)
    idx = np.zeros((P, max(int(cnt.max(initial=0)), 1)), dtype=np.int64)
    for p in range(P):
        nz = np.flatnonzero(finite[p])
        idx[p, : len(nz)] = nz
    return idx, cnt


def pglasso_banded(pp, sigma_bar, penalty, iter_max=100, ths=1e-3, lasso_tol=LASSO_TOL):
    """Minimise the banded graphical-LASSO objective, warm-started from ``pp``.

    Parameters
    ----------
    pp : PrecisionPair
        Starting point; ``pp.sigma`` must be the inverse of ``pp.omega``.
    sigma_bar : ndarray, shape (P, P)
        Empirical covariance.
    penalty : PenaltyMatrix or ndarray
        Dense arrays may hold ``inf`` to force zeros.
    iter_max : int
        Cap on full column sweeps.
    ths : float
        Stop once a sweep moves no covariance entry by ``ths`` or more.

    Returns
    -------
    result : PrecisionPair
    info : dict
        ``iterations`` and ``converged``.
    """
    lam = penalty.dense() if isinstance(penalty, PenaltyMatrix) else np.asarray(penalty, dtype=float)
    S = np.ascontiguousarray(sigma_bar, dtype=float)
    P = S.shape[0]
    if lam.shape != (P, P) or pp.omega.shape != (P, P):
        raise ParamError("shape mismatch between covariance, penalty and starting point")
    if np.any(lam < 0) or not np.array_equal(lam, lam.T):
        raise ParamError("penalty must be symmetric and nonnegative")
    if np.any(~np.isfinite(np.diag(lam))):
        raise ParamError("diagonal penalties must be finite")
    omega = np.array(pp.omega, dtype=float, order="C")
    sigma = np.array(pp.sigma, dtype=float, order="C")
    idx, cnt = _neighbours(lam)
    lam_c = np.where(np.isfinite(lam), lam, 0.0)
    its, status, col = _pglasso(omega, sigma, S, lam_c, idx, cnt, int(iter_max), float(ths), float(lasso_tol))
    if status == 2:
        raise NumericalError(f"positive definiteness lost at sweep {its}, column {col}")
    if status == 3:
        raise NumericalError(f"LASSO subproblem stalled at sweep {its}, column {col}")
    # remove accumulated rounding from the rank-one updates
    omega = (omega + omega.T) / 2
    sigma = _spd_inverse(omega, f"precision after sweep {its}")
    return PrecisionPair(omega, sigma), {"iterations": its, "converged": status == 0}
