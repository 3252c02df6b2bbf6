"""Time-resolved partial R² between the two latent series.

The latent covariance implied by a fit is treated as locally stationary:
lagged covariance blocks are averaged over a short moving window, and the
residual variances of two nested linear predictions of one region's latent
from lags of both regions are read off by Schur complements, so no
regression is ever run. Regression 1 uses the target's own lags
``1..d_auto`` and the other region's lags ``1..d_cross``; regression 2
drops the other region's lags in ``[tau1, tau2]``. Then
``R² = 1 - v1 / v2``.

Stacked-vector layout used throughout, with ``L = max(d_auto, d_cross)``::

    [Z1(t), Z1(t-1), ..., Z1(t-L), Z2(t), Z2(t-1), ..., Z2(t-L)]
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import NumericalError, ParamError
from .fit import LatentProblem, fit, _sym
from .glasso import PrecisionPair, pglasso_banded
from .inference import desparsify
from .seeding import child_seeds

logger = logging.getLogger(__name__)

__all__ = [
    "GrangerConfig",
    "GrangerReport",
    "local_lag_covariance",
    "partial_r2",
    "r2_null_band",
    "r2_series",
    "granger_report",
]

DIRECTIONS = ("1->2", "2->1")


@dataclass(frozen=True)
class GrangerConfig:
    """Settings for the partial R² summaries.

    The coefficients of the underlying lagged state-space model are never
    estimated: the covariance plug-in gives the residual variances directly.

    Attributes
    ----------
    window_samples : int
        Width of the moving window over which covariance blocks are averaged.
    d_auto, d_cross : int
        Own-lag and other-region lag depths.
    tau1, tau2 : int
        Other-region lags excluded from the restricted regression.
    n_perm : int
        Permutations for the null band.
    use_desparsified : bool
        Plug in ``inv(omega_tilde)`` instead of ``inv(omega_hat)``.
    refit : bool
        Null replicates refit the weights too (slow); by default the
        weights stay fixed and only the precision is re-estimated.
    """

    window_samples: int = 1
    d_auto: int = 3
    d_cross: int = 3
    tau1: int = 1
    tau2: int = 3
    n_perm: int = 2000
    seed: int = 0
    use_desparsified: bool = False
    refit: bool = False

    def __post_init__(self):
        for name in ("window_samples", "d_auto", "d_cross", "tau1", "tau2", "n_perm"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ParamError(f"{name} must be an integer")
        if self.window_samples < 1:
            raise ParamError("window_samples must be positive")
        if self.d_auto < 0 or self.d_cross < 1:
            raise ParamError("need d_auto >= 0 and d_cross >= 1")
        if not 1 <= self.tau1 <= self.tau2 <= self.d_cross:
            raise ParamError(f"need 1 <= tau1 <= tau2 <= d_cross, got {self.tau1}, {self.tau2}, {self.d_cross}")
        if self.n_perm < 1:
            raise ParamError("n_perm must be positive")

    @property
    def max_lag(self):
        return max(self.d_auto, self.d_cross)

    def window(self, t):
        """Times averaged for a window centred at ``t``."""
        lo = (self.window_samples - 1) // 2
        return np.arange(t - lo, t - lo + self.window_samples)

    def valid_times(self, T):
        """Centres whose whole window has ``max_lag`` history inside ``[0, T)``.

        There are ``T - max_lag - (window_samples - 1)`` of them.
        """
        lo = (self.window_samples - 1) // 2
        hi = self.window_samples - 1 - lo
        return np.arange(self.max_lag + lo, T - hi)


@dataclass
class GrangerReport:
    """Partial R² in both directions at ``times`` (indices on the latent grid).

    ``r2_12`` measures how much region 1's past adds to predicting region
    2, ``r2_21`` the reverse. Null bands are pointwise 95th percentiles.
    """

    times: np.ndarray
    r2_12: np.ndarray
    r2_21: np.ndarray
    null_p95_12: np.ndarray = None
    null_p95_21: np.ndarray = None
    null_samples: np.ndarray = field(default=None, repr=False)

    def excursions(self, direction):
        """Boolean mask of times where R² exceeds the null band."""
        r2, band = (self.r2_12, self.null_p95_12) if direction == "1->2" else (self.r2_21, self.null_p95_21)
        if band is None:
            raise ParamError("report has no null band")
        return r2 > band


def local_lag_covariance(sigma_latent, t, cfg):
    """Window-averaged covariance of the stacked lag vector at time ``t``.

    Parameters
    ----------
    sigma_latent : ndarray, shape (2T, 2T)
        Latent covariance, region 1 first.
    t : int
        Window centre (0-based).
    cfg : GrangerConfig

    Returns
    -------
    ndarray, shape (2 (L + 1), 2 (L + 1))
    """
    S = np.asarray(sigma_latent, dtype=float)
    T = S.shape[0] // 2
    L = cfg.max_lag
    win = cfg.window(t)
    if win[0] - L < 0 or win[-1] > T - 1:
        raise ParamError(f"window around t={t} with {L} lags does not fit in [0, {T})")
    lags = np.arange(L + 1)
    out = np.zeros((2 * (L + 1), 2 * (L + 1)))
    for c in win:
        idx = np.concatenate([c - lags, T + c - lags])
        out += S[np.ix_(idx, idx)]
    return out / len(win)


def _resid_var(C, target, cond):
    if len(cond) == 0:
        return C[target, target]
    A = C[np.ix_(cond, cond)]
    b = C[cond, target]
    try:
        f = cho_factor(A, lower=True, check_finite=False)
    except LinAlgError:
        raise NumericalError("local lag covariance is not positive definite")
    return C[target, target] - b @ cho_solve(f, b, check_finite=False)


def partial_r2(local_cov, direction, cfg):
    """Partial R² of the source region's lags ``tau1..tau2`` for the target.

    Parameters
    ----------
    local_cov : ndarray
        Output of :func:`local_lag_covariance`.
    direction : {"1->2", "2->1"}
        Source and target region.
    cfg : GrangerConfig
    """
    if direction not in DIRECTIONS:
        raise ParamError(f"direction must be one of {DIRECTIONS}")
    C = np.asarray(local_cov, dtype=float)
    L = cfg.max_lag
    if C.shape != (2 * (L + 1), 2 * (L + 1)):
        raise ParamError(f"local covariance must be {2 * (L + 1)} square")
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NumericalError("local lag covariance is not positive definite")
    tgt_off, src_off = (L + 1, 0) if direction == "1->2" else (0, L + 1)
    own = [tgt_off + a for a in range(1, cfg.d_auto + 1)]
    other = list(range(1, cfg.d_cross + 1))
    full = own + [src_off + s for s in other]
    kept = own + [src_off + s for s in other if s < cfg.tau1 or s > cfg.tau2]
    v1 = _resid_var(C, tgt_off, full)
    v2 = _resid_var(C, tgt_off, kept)
    if not v2 > 0:
        raise NumericalError("restricted residual variance is not positive")
    return float(np.clip(1.0 - v1 / v2, 0.0, 1.0))


def _series(sigma, cfg):
    T = sigma.shape[0] // 2
    times = cfg.valid_times(T)
    if times.size == 0:
        raise ParamError(f"no valid times: T={T} is too short for the lags and window")
    r12 = np.empty(times.size)
    r21 = np.empty(times.size)
    for i, t in enumerate(times):
        C = local_lag_covariance(sigma, t, cfg)
        r12[i] = partial_r2(C, "1->2", cfg)
        r21[i] = partial_r2(C, "2->1", cfg)
    return times, r12, r21


def _plugin_sigma(omega, sigma_bar, lambda_diag, use_desparsified):
    if use_desparsified:
        omega = desparsify(omega, sigma_bar, lambda_diag)
    try:
        c = cho_factor(omega, lower=True)
    except LinAlgError:
        raise NumericalError("precision used for the plug-in is not positive definite")
    return _sym(cho_solve(c, np.eye(omega.shape[0])))


def r2_series(fit_result, cfg):
    """Partial R² in both directions from a fitted latent precision.

    Returns
    -------
    GrangerReport
        Without null bands.
    """
    lam = fit_result.penalty.lambda_diag
    sigma = _plugin_sigma(fit_result.omega, fit_result.sigma_bar, lam, cfg.use_desparsified)
    times, r12, r21 = _series(sigma, cfg)
    return GrangerReport(times, r12, r21)


def r2_null_band(data, hp, cfg, rng=None, fit_result=None, threads=1):
    """Pointwise 95th percentiles of R² over region-2 trial permutations.

    Parameters
    ----------
    data : PairedDataset or LatentProblem
    hp : Hyperparams
        Penalties reused for every permuted precision estimate.
    cfg : GrangerConfig
    rng : int, SeedSequence or Generator, optional
        Defaults to ``cfg.seed``.
    fit_result : FitResult, optional
        Fit of the unpermuted data; its weights are held fixed unless
        ``cfg.refit``. Fitted here when omitted.

    Returns
    -------
    p95_12, p95_21 : ndarray
    samples : ndarray, shape (n_perm, 2, n_times)
    """
    if cfg.n_perm < 20:
        raise ParamError("need at least 20 permutations for a 95th percentile")
    prob = data if isinstance(data, LatentProblem) else LatentProblem(data)
    if fit_result is None:
        fit_result = fit(prob, hp, record_trace=False)
    seeds = child_seeds(cfg.seed if rng is None else rng, "permutation", cfg.n_perm)
    lam = hp.penalty.dense()
    ld = hp.penalty.lambda_diag
    Z = prob.projections(fit_result.weights)
    T = prob.T
    start = PrecisionPair(fit_result.omega, fit_result.sigma)

    def one(b):
        perm = np.random.default_rng(seeds[b]).permutation(prob.N)
        if cfg.refit:
            res = fit(prob.permuted(None, perm), hp, record_trace=False)
            omega, sbar = res.omega, res.sigma_bar
        else:
            Zp = np.concatenate([Z[:, :T], Z[perm, T:]], axis=1)
            sbar = _sym(np.cov(Zp, rowvar=False))
            pp, _ = pglasso_banded(start, sbar, lam, hp.iter_max, hp.ths)
            omega = pp.omega
        _, r12, r21 = _series(_plugin_sigma(omega, sbar, ld, cfg.use_desparsified), cfg)
        return np.stack([r12, r21])

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            samples = np.stack(list(ex.map(one, range(cfg.n_perm))))
    else:
        samples = np.stack([one(b) for b in range(cfg.n_perm)])
    p95 = np.percentile(samples, 95, axis=0)
    return p95[0], p95[1], samples


def granger_report(data, hp, cfg, fit_result=None, rng=None, threads=1):
    """R² series with null bands in one call."""
    prob = data if isinstance(data, LatentProblem) else LatentProblem(data)
    if fit_result is None:
        fit_result = fit(prob, hp, record_trace=False)
    rep = r2_series(fit_result, cfg)
    p12, p21, samples = r2_null_band(prob, hp, cfg, rng, fit_result, threads)
    rep.null_p95_12, rep.null_p95_21, rep.null_samples = p12, p21, samples
    return rep
