"""Entry-wise and cluster-wise inference on the cross-precision block.

The penalised estimate is de-sparsified, its null variance is estimated
from fits to trial-permuted data (permuting each region independently
destroys cross-region coupling but keeps within-region structure), and
the resulting Gaussian p-values go through Benjamini-Hochberg. Rejected
cells are grouped into edge-connected clusters and each cluster is scored
against the permutation distribution of the largest cluster statistic.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import NumericalError, ParamError
from .seeding import child_seeds
from .fit import LatentProblem, fit

logger = logging.getLogger(__name__)

__all__ = [
    "Cluster",
    "InferenceReport",
    "bh_select",
    "bootstrap_variance",
    "clusters",
    "desparsify",
    "entry_pvalues",
    "excursion_pvalues",
    "permutation_replicates",
    "run_inference",
]

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class Cluster:
    cells: list
    statistic: float
    pvalue: float = float("nan")

    @property
    def size(self):
        return len(self.cells)


@dataclass
class InferenceReport:
    """Inference output for the ``T x T`` cross block (rows region 1, columns region 2).

    ``var_map`` and ``pvals`` are NaN outside the band.
    """

    omega_tilde: np.ndarray
    var_map: np.ndarray
    pvals: np.ndarray
    bh_threshold: float
    rejected: np.ndarray
    clusters: list
    band: np.ndarray
    alpha_bh: float
    replicates: np.ndarray = field(default=None, repr=False)

    @property
    def omega_tilde_cross(self):
        T = self.band.shape[0]
        return self.omega_tilde[:T, T:]


def desparsify(omega_hat, sigma_bar, lambda_diag):
    """Bias-corrected precision ``2 W - W (S + lambda I) W``."""
    omega_hat = np.asarray(omega_hat, dtype=float)
    M = np.asarray(sigma_bar, dtype=float) + lambda_diag * np.eye(omega_hat.shape[0])
    out = 2 * omega_hat - omega_hat @ M @ omega_hat
    return (out + out.T) / 2


def _one_replicate(prob, hp, seq):
    rng = np.random.default_rng(seq)
    p1 = rng.permutation(prob.N)
    p2 = rng.permutation(prob.N)
    res = fit(prob.permuted(p1, p2), hp, record_trace=False)
    T = prob.T
    return desparsify(res.omega, res.sigma_bar, hp.penalty.lambda_diag)[:T, T:]


def permutation_replicates(data, hp, B, rng=None, threads=1):
    """Cross blocks of de-sparsified fits to ``B`` trial-permuted copies.

    Each replicate permutes the trials of both regions independently with
    its own seed-derived stream, so the output does not depend on
    ``threads``.

    Returns
    -------
    ndarray, shape (B, T, T)
    """
    if B < 2:
        raise ParamError("need at least two replicates")
    prob = data if isinstance(data, LatentProblem) else LatentProblem(data)
    seeds = child_seeds(rng, "bootstrap", B)

    def run(b):
        try:
            return _one_replicate(prob, hp, seeds[b])
        except NumericalError as exc:
            raise NumericalError(f"replicate {b}: {exc}") from exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            reps = list(ex.map(run, range(B)))
    else:
        reps = [run(b) for b in range(B)]
    return np.stack(reps)


def bootstrap_variance(replicates, band=None):
    """Per-cell unbiased sample variance across replicates (axis 0).

    Raises NumericalError if any cell inside ``band`` (all cells when
    omitted) has zero variance.
    """
    reps = np.asarray(replicates, dtype=float)
    if reps.shape[0] < 2:
        raise ParamError("need at least two replicates")
    var = reps.var(axis=0, ddof=1)
    check = var if band is None else var[band]
    if np.any(~(check > 0)):
        raise NumericalError("bootstrap replicates have zero variance in some cell")
    if band is not None:
        var = np.where(band, var, np.nan)
    return var


def entry_pvalues(omega_tilde_cross, var_map, band):
    """Two-sided Gaussian p-values ``2 - 2 Phi(|x| / sd)`` on the band, NaN elsewhere."""
    band = np.asarray(band, dtype=bool)
    x = np.asarray(omega_tilde_cross, dtype=float)
    v = np.asarray(var_map, dtype=float)
    p = np.full(x.shape, np.nan)
    z = np.abs(x[band]) / np.sqrt(v[band])
    p[band] = np.minimum(1.0, 2 * stats.norm.sf(z))
    return p


def bh_select(pvals, alpha_bh):
    """Benjamini-Hochberg step-up over the non-NaN entries.

    Returns ``(threshold, rejected)``; the threshold is ``k * alpha / n`` for
    the largest qualifying ``k`` and 0 when nothing qualifies.
    """
    p = np.asarray(pvals, dtype=float)
    valid = ~np.isnan(p)
    n = int(valid.sum())
    if n == 0:
        raise ParamError("no p-values to test")
    ps = np.sort(p[valid])
    crit = alpha_bh * np.arange(1, n + 1) / n
    ok = np.flatnonzero(ps <= crit)
    if ok.size == 0:
        return 0.0, np.zeros(p.shape, dtype=bool)
    thr = float(crit[ok[-1]])
    return thr, valid & (np.where(valid, p, np.inf) <= thr)


def clusters(rejected, band=None):
    """Edge-connected (4-neighbour) components of ``rejected`` within ``band``.

    Returns a list of ``(k, 2)`` integer arrays of ``(t, s)`` cells, ordered
    by their first cell in row-major order.
    """
    mask = np.asarray(rejected, dtype=bool)
    if band is not None:
        mask = mask & np.asarray(band, dtype=bool)
    lab, n = ndimage.label(mask, structure=_FOUR)
    out = []
    for i in range(1, n + 1):
        out.append(np.argwhere(lab == i))
    return out


def _stat(cells, pvals):
    p = pvals[cells[:, 0], cells[:, 1]]
    return float(-2 * np.sum(np.log(np.maximum(p, np.finfo(float).tiny))))


def max_cluster_statistic(pvals, threshold, band=None):
    """Largest cluster statistic among cells with ``p <= threshold`` (0 if none)."""
    if not threshold > 0:
        return 0.0
    p = np.asarray(pvals, dtype=float)
    mask = np.where(np.isnan(p), False, p <= threshold)
    cl = clusters(mask, band)
    return max((_stat(c, p) for c in cl), default=0.0)


def excursion_pvalues(cluster_cells, pvals, replicate_pvals, bh_threshold, band=None):
    """Permutation p-values of cluster statistics ``T = -2 sum log p``.

    Each replicate's p-value map is thresholded at ``bh_threshold`` and
    clustered the same way; its largest statistic (0 without clusters)
    forms the null. Returns ``(statistics, pvalues)``.
    """
    pvals = np.asarray(pvals, dtype=float)
    tk = np.array([_stat(np.asarray(c), pvals) for c in cluster_cells])
    tmax = np.array([max_cluster_statistic(rp, bh_threshold, band) for rp in replicate_pvals])
    pv = np.array([np.mean(tmax >= t) for t in tk])
    return tk, pv


def run_inference(data, hp, n_bootstrap=200, alpha_bh=0.05, rng=None, excursion=True,
                  fit_result=None, replicates=None, threads=1):
    """Fit (unless ``fit_result`` is given), bootstrap and test the cross block.

    Parameters
    ----------
    data : PairedDataset or LatentProblem
    hp : Hyperparams
    n_bootstrap : int
        Number of permutation replicates (ignored when ``replicates`` is given).
    replicates : ndarray, optional
        Precomputed ``(B, T, T)`` replicate cross blocks.

    Returns
    -------
    InferenceReport
    """
    prob = data if isinstance(data, LatentProblem) else LatentProblem(data)
    if fit_result is None:
        fit_result = fit(prob, hp)
    T = prob.T
    band = hp.penalty.band_mask()
    omega_tilde = desparsify(fit_result.omega, fit_result.sigma_bar, hp.penalty.lambda_diag)
    if replicates is None:
        replicates = permutation_replicates(prob, hp, n_bootstrap, rng, threads)
    var = bootstrap_variance(replicates, band)
    pv = entry_pvalues(omega_tilde[:T, T:], var, band)
    thr, rej = bh_select(pv, alpha_bh)
    cl = clusters(rej, band)
    found = []
    if cl and excursion:
        rep_p = [entry_pvalues(r, var, band) for r in replicates]
        tk, cp = excursion_pvalues(cl, pv, rep_p, thr, band)
        found = [Cluster([tuple(map(int, c)) for c in cells], float(t), float(p))
                 for cells, t, p in zip(cl, tk, cp)]
    else:
        found = [Cluster([tuple(map(int, c)) for c in cells], _stat(cells, pv)) for cells in cl]
    logger.info("%d rejected cells in %d clusters", int(rej.sum()), len(found))
    return InferenceReport(omega_tilde, var, pv, thr, rej, found, band, alpha_bh, replicates)
