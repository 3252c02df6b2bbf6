"""Alternating fit of canonical weights and the banded latent precision matrix.

Each region ``k`` and time ``t`` gets a weight vector ``w_k^(t)``; the
projections ``w_k^(t)' X_k^(t)`` form ``2T`` latent series whose sample
covariance ``sigma_bar`` has unit diagonal. The fitter alternates

1. a banded graphical-LASSO update of ``omega`` given ``sigma_bar``;
2. one sweep of closed-form weight updates given ``omega``;

until the latent covariance stops moving. Both steps decrease the same
penalised negative log-likelihood, so the objective trace is monotone.
"""
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericalError, ParamError
from .glasso import PenaltyMatrix, PrecisionPair, build_penalty, glasso_objective, pglasso_banded
from .signal import kernel_autocorrelation

logger = logging.getLogger(__name__)

__all__ = [
    "FitResult",
    "Hyperparams",
    "LatentProblem",
    "calibrate_lambda_diag",
    "default_lambda_cross_grid",
    "empirical_canonical_cov",
    "fit",
    "initialize_weights",
    "penalized_nll",
    "tune_lambda_cross",
    "update_weight",
]


@dataclass(frozen=True)
class Hyperparams:
    penalty: PenaltyMatrix
    iter_max: int = 100
    ths: float = 1e-3
    seed: int = 0
    weight_sweeps: int = 10
    glasso_sweeps: int = 1

    @classmethod
    def from_values(cls, T, d_auto, d_cross, lambda_cross, lambda_auto=0.0, lambda_diag=0.0, **kw):
        return cls(build_penalty(T, lambda_cross, lambda_auto, lambda_diag, d_cross, d_auto), **kw)

    def with_lambda_cross(self, value):
        return replace(self, penalty=self.penalty.with_lambda_cross(value))


@dataclass
class FitResult:
    """Output of :func:`fit`.

    ``weights[k]`` and ``loadings[k]`` are ``(T, d_k)`` arrays. ``omega``
    and ``sigma_bar`` are ``2T x 2T`` with region 1 first.
    """

    weights: list
    loadings: list
    omega: np.ndarray
    sigma_bar: np.ndarray
    objective_trace: list
    converged: bool
    iterations: int
    penalty: PenaltyMatrix = None
    sigma: np.ndarray = field(default=None, repr=False)

    @property
    def T(self):
        return self.omega.shape[0] // 2

    @property
    def omega_cross(self):
        T = self.T
        return self.omega[:T, T:]


class LatentProblem:
    """Centred and whitened data, computed once per dataset.

    For each region ``k`` and time ``t`` the centred trials are whitened by
    the Cholesky factor ``L`` of their within-time covariance ``V``, so a
    weight ``w`` maps to a unit vector ``u = L' w`` and projections are
    ``Y u``. Permuting trials only reorders rows; :meth:`permuted` reuses
    the factors.
    """

    def __init__(self, data, _cache=None):
        self.data = data
        self.N = data.n_trials
        self.T = data.n_times
        self.dims = data.dims
        self.Xc = [x - x.mean(axis=0) for x in data.regions()]
        if _cache is None:
            self.V = []
            self.chol = []
            for k, xc in enumerate(self.Xc):
                V = np.einsum("ntd,nte->ted", xc, xc) / (self.N - 1)
                try:
                    L = np.linalg.cholesky(V)
                except np.linalg.LinAlgError:
                    bad = _first_singular(V)
                    raise NumericalError(f"within-time covariance singular for region {k + 1}, time {bad}")
                self.V.append(V)
                self.chol.append(L)
        else:
            self.V, self.chol = _cache
        dmax = max(self.dims)
        self.Y = np.zeros((2 * self.T, self.N, dmax))
        for k, xc in enumerate(self.Xc):
            for t in range(self.T):
                # Y = Xc L^{-T}
                self.Y[k * self.T + t, :, : self.dims[k]] = solve_triangular(
                    self.chol[k][t], xc[:, t, :].T, lower=True).T
        self.dim_of = np.repeat(np.asarray(self.dims, dtype=np.int64), self.T)

    def permuted(self, perm1, perm2):
        return LatentProblem(self.data.permuted(perm1, perm2), _cache=(self.V, self.chol))

    def index(self, k, t):
        return k * self.T + t

    def solve_v(self, k, t, b):
        return cho_solve((self.chol[k][t], True), b)

    def to_unit(self, weights):
        """Whitened unit vectors ``(2T, dmax)`` for weights."""
        U = np.zeros((2 * self.T, self.Y.shape[2]))
        for k in range(2):
            U[k * self.T:(k + 1) * self.T, : self.dims[k]] = np.einsum("tdc,td->tc", self.chol[k], weights[k])
        return U

    def from_unit(self, U):
        out = []
        for k in range(2):
            u = U[k * self.T:(k + 1) * self.T, : self.dims[k]]
            out.append(np.stack([solve_triangular(self.chol[k][t].T, u[t], lower=False) for t in range(self.T)]))
        return out

    def projections(self, weights):
        """``(N, 2T)`` latent series for the given weights."""
        return np.concatenate([np.einsum("ntd,td->nt", self.Xc[k], weights[k]) for k in range(2)], axis=1)


def _first_singular(V):
    for t in range(V.shape[0]):
        try:
            np.linalg.cholesky(V[t])
        except np.linalg.LinAlgError:
            return t
    return -1


def _problem(data):
    return data if isinstance(data, LatentProblem) else LatentProblem(data)


def initialize_weights(data):
    """Equal weights scaled to unit projected variance, ``1 / sqrt(1'V1)``."""
    prob = _problem(data)
    weights = []
    for k in range(2):
        d = prob.Xc[k].shape[2]
        w = np.ones((prob.T, d))
        v = np.einsum("ted,td,te->t", prob.V[k], w, w)
        weights.append(w / np.sqrt(v)[:, None])
    return weights


def normalize_weights(data, weights):
    prob = _problem(data)
    out = []
    for k in range(2):
        w = np.array(weights[k], dtype=float)
        v = np.einsum("ted,td,te->t", prob.V[k], w, w)
        if np.any(v <= 0):
            raise ParamError("weight vector with zero projected variance")
        out.append(w / np.sqrt(v)[:, None])
    return out


def empirical_canonical_cov(data, weights):
    """Sample covariance (ddof=1) of the ``2T`` projected series."""
    prob = _problem(data)
    Z = prob.projections(weights)
    S = Z.T @ Z / (prob.N - 1)
    return (S + S.T) / 2


def _weight_step(prob, k, t, Z, omega, w_cur):
    j = prob.index(k, t)
    b = omega[j].copy()
    b[j] = 0.0
    nz = np.flatnonzero(b)
    if nz.size == 0:
        return w_cur, False
    v = Z[:, nz] @ b[nz]
    Ab = prob.Xc[k][:, t, :].T @ v / (prob.N - 1)
    if not np.any(Ab):
        return w_cur, False
    w = prob.solve_v(k, t, Ab)
    w /= np.sqrt(w @ prob.V[k][t] @ w)
    # the penalised objective depends on w only through 2 w'Ab; keep the lower sign
    if w @ Ab > 0:
        w = -w
    return w, True


def update_weight(k, t, data, weights, omega):
    """Closed-form update of one weight vector with everything else fixed.

    ``k`` is 0 or 1 (region), ``t`` the time index. Returns the new
    ``d_k``-vector; when the relevant precision row is zero the current
    weight comes back unchanged.
    """
    prob = _problem(data)
    Z = prob.projections(weights)
    w, _ = _weight_step(prob, k, t, Z, omega, np.asarray(weights[k][t], dtype=float))
    return w


def penalized_nll(omega, sigma_bar, penalty):
    """Penalised Gaussian negative log-likelihood of a latent precision."""
    return glasso_objective(omega, sigma_bar, penalty)


def _canonical_signs(weights):
    signs = []
    for w in weights:
        m = w.mean(axis=1)
        s = np.sign(m)
        zero = s == 0
        if np.any(zero):
            idx = np.argmax(np.abs(w[zero]), axis=1)
            s[zero] = np.sign(w[zero][np.arange(idx.size), idx])
        s[s == 0] = 1.0
        signs.append(s)
    return np.concatenate(signs)


FIT_LASSO_TOL = 1e-8
WEIGHT_TOL = 1e-4


def _sym(a):
    return (a + a.T) / 2


@njit(cache=True, nogil=True)
def _weight_sweep(Y, dims, Zt, omega, U):
    """One Gauss-Seidel sweep of whitened weight updates, in place.

    For latent ``j`` the objective depends on ``u_j`` only through
    ``2 u_j' g`` with ``g = Y_j' sum_l omega_jl z_l``, minimised over unit
    vectors by ``u_j = -g / |g|``. Rows with no off-diagonal precision or a
    zero gradient are left alone. Returns the largest change in any entry.
    """
    P, N, _ = Y.shape
    delta = 0.0
    v = np.empty(N)
    for j in range(P):
        d = dims[j]
        v[:] = 0.0
        active = False
        for l in range(P):
            b = omega[j, l]
            if l != j and b != 0.0:
                active = True
                for n in range(N):
                    v[n] += b * Zt[l, n]
        if not active:
            continue
        g = np.zeros(d)
        for n in range(N):
            vn = v[n]
            for a in range(d):
                g[a] += Y[j, n, a] * vn
        norm = 0.0
        for a in range(d):
            norm += g[a] * g[a]
        if norm == 0.0:
            continue
        norm = np.sqrt(norm)
        for a in range(d):
            u = -g[a] / norm
            ch = abs(u - U[j, a])
            if ch > delta:
                delta = ch
            U[j, a] = u
        for n in range(N):
            z = 0.0
            for a in range(d):
                z += Y[j, n, a] * U[j, a]
            Zt[j, n] = z
    return delta


def fit(data, hp, init=None, record_trace=True):
    """Fit weights and banded precision by coordinate descent.

    Parameters
    ----------
    data : PairedDataset or LatentProblem
        Preprocessed amplitudes, shape ``(N, T, d_k)`` per region.
    hp : Hyperparams
    init : list of two ``(T, d_k)`` arrays, optional
        Starting weights (rescaled to unit projected variance). Defaults to
        equal weights.

    Returns
    -------
    FitResult
        ``converged`` is False when ``hp.iter_max`` outer iterations pass
        without the latent covariance settling below ``hp.ths``.
    """
    prob = _problem(data)
    pen = hp.penalty
    if pen.T != prob.T:
        raise ParamError(f"penalty built for T={pen.T}, data has T={prob.T}")
    lam = pen.dense()
    weights = initialize_weights(prob) if init is None else normalize_weights(prob, init)
    U = prob.to_unit(weights)
    Zt = np.ascontiguousarray(prob.projections(weights).T)
    n1 = prob.N - 1
    sigma_bar = _sym(Zt @ Zt.T / n1)
    pp = PrecisionPair.from_covariance(sigma_bar + pen.lambda_diag * np.eye(2 * prob.T))
    trace = []
    converged = False
    it = 0
    for it in range(1, hp.iter_max + 1):
        sigma_last = pp.sigma
        pp, _ = pglasso_banded(pp, sigma_bar, lam, hp.glasso_sweeps, hp.ths, FIT_LASSO_TOL)
        if record_trace:
            trace.append(glasso_objective(pp.omega, sigma_bar, lam))
        omega = np.ascontiguousarray(pp.omega)
        for _ in range(hp.weight_sweeps):
            delta = _weight_sweep(prob.Y, prob.dim_of, Zt, omega, U)
            sigma_bar = _sym(Zt @ Zt.T / n1)
            if record_trace:
                trace.append(glasso_objective(pp.omega, sigma_bar, lam))
            if delta < WEIGHT_TOL:
                break
        if np.max(np.abs(pp.sigma - sigma_last)) < hp.ths:
            converged = True
            break
    if not converged:
        logger.warning("fit stopped after %d iterations without converging", it)
    weights = prob.from_unit(U)

    s = _canonical_signs(weights)
    T = prob.T
    weights = [weights[0] * s[:T, None], weights[1] * s[T:, None]]
    flip = np.outer(s, s)
    omega = pp.omega * flip
    sigma = pp.sigma * flip
    sigma_bar = sigma_bar * flip
    loadings = [np.einsum("ted,te->td", prob.V[k], weights[k]) for k in range(2)]
    return FitResult(weights, loadings, omega, sigma_bar, trace, converged, it, pen, sigma)


def calibrate_lambda_diag(data, kernel, step=None, grid=None):
    """Pick the diagonal ridge that best restores the filter-induced autocorrelation.

    For every channel the trial-wise ``T x T`` autocorrelation ``S`` is
    ridged and inverted; the off-diagonal of ``inv(S + lambda I)``, after a
    free least-squares rescaling, is compared with the autocorrelation
    matrix implied by ``kernel``. The grid value with the smallest total
    residual wins (ties go to the smaller value).

    Parameters
    ----------
    data : PairedDataset
    kernel : MorletKernel or ndarray
        Either the filter used in preprocessing, or an explicit ``T x T``
        target matrix.
    step : int, optional
        Decimation factor between the kernel rate and the data rate.
        Inferred from the sample rates when omitted.
    grid : sequence of float, optional
        Defaults to 33 log-spaced values on ``[1e-4, 10]``.
    """
    T = data.n_times
    if grid is None:
        grid = np.logspace(-4, 1, 33)
    if isinstance(kernel, np.ndarray):
        K = np.asarray(kernel, dtype=float)
    else:
        if step is None:
            step = int(round(kernel.sample_rate_hz / data.sample_rate_hz))
        max_lag = min(T - 1, (len(kernel.taps) - 1) // step)
        acf = kernel_autocorrelation(kernel, max_lag, step)
        full = np.zeros(T)
        full[: max_lag + 1] = acf[max_lag:]
        lag = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :])
        K = full[lag]
    off = ~np.eye(T, dtype=bool)
    k_off = K[off]
    corr = []
    for x in data.regions():
        xc = x - x.mean(axis=0)
        cov = np.einsum("nti,nsi->its", xc, xc) / (x.shape[0] - 1)
        sd = np.sqrt(np.einsum("itt->it", cov))
        if np.any(sd == 0):
            raise NumericalError("a channel has zero variance at some time")
        corr.append(cov / (sd[:, :, None] * sd[:, None, :]))
    corr = np.concatenate(corr)
    kk = k_off @ k_off
    eye = np.eye(T)
    scores = []
    for lam in grid:
        P = np.linalg.inv(corr + lam * eye)
        p_off = P[:, off]
        pp = np.einsum("ij,ij->i", p_off, p_off)
        pk = p_off @ k_off
        scores.append(np.sum(kk - pk ** 2 / pp))
    scores = np.asarray(scores)
    # relative tolerance so numerically tied scores resolve to the smaller lambda
    best = np.min(scores)
    i = int(np.flatnonzero(scores <= best + 1e-12 * max(1.0, abs(best)))[0])
    return float(grid[i])


def default_lambda_cross_grid():
    return list(np.logspace(np.log10(2.0), -2, 16))


def tune_lambda_cross(data, hp, grid=None, max_false=0, rng=None, alpha_bh=0.05,
                      n_bootstrap=50, return_details=False):
    """Choose the cross penalty from false discoveries on trial-permuted data.

    One region's trials are shuffled so every cross entry is null. Grid
    values are tried from the smallest up: the permuted data are fitted,
    de-sparsified and tested with bootstrap p-values and BH at
    ``alpha_bh``, and the first value with at most ``max_false`` rejections
    is returned. If none qualifies, the largest value is returned with a
    warning.
    """
    from .inference import run_inference

    rng = np.random.default_rng(rng)
    grid = sorted(default_lambda_cross_grid() if grid is None else grid)
    prob = _problem(data)
    perm = rng.permutation(prob.N)
    permuted = prob.permuted(None, perm)
    chosen = None
    history = []
    for lam in grid:
        seed = int(rng.integers(2**63))
        rep = run_inference(permuted, hp.with_lambda_cross(lam), n_bootstrap=n_bootstrap,
                            alpha_bh=alpha_bh, rng=seed, excursion=False)
        n_rej = int(rep.rejected.sum())
        history.append((lam, n_rej))
        logger.info("lambda_cross=%.4g: %d false discoveries", lam, n_rej)
        if n_rej <= max_false:
            chosen = lam
            break
    flagged = chosen is None
    if flagged:
        warnings.warn("no lambda_cross in the grid met the false-discovery cap; using the largest")
        chosen = grid[-1]
    if return_details:
        return float(chosen), {"history": history, "flagged": flagged}
    return float(chosen)
