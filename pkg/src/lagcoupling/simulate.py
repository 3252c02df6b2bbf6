"""Synthetic paired recordings with planted lead-lag amplitude coupling.

Two generators are provided:

* a shared-oscillatory-driver model producing raw multichannel LFP-like
  series (pink spatially correlated noise plus delayed copies of latent
  oscillations), with a variant whose drivers carry random per-region phase
  so that there is amplitude coupling but no coherence;
* a probabilistic-CCA generator whose latent precision matrix is known
  exactly, built on top of a baseline amplitude dataset.
"""
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import NumericalError, ParamError
from .seeding import root_sequence, substream
from .signal import preprocess
from .tensorio import PairedDataset

logger = logging.getLogger(__name__)

__all__ = [
    "DriverConfig",
    "PccaConfig",
    "default_epoch_mask",
    "driver_envelope_loadings",
    "ground_truth_precision",
    "pcca_precision",
    "pink_noise",
    "simulate_driver_dataset",
    "simulate_driver_no_coherence",
    "simulate_pcca_dataset",
    "spatial_covariance",
]


def _grid_coords(grid_side):
    ij = np.indices((grid_side, grid_side)).reshape(2, -1).T
    return ij.astype(float)


def spatial_covariance(grid_side, sigma_spatial):
    """Squared-exponential covariance between cells of a unit-spaced square grid."""
    if grid_side < 1:
        raise ParamError("grid_side must be >= 1")
    if not sigma_spatial > 0:
        raise ParamError("sigma_spatial must be positive")
    xy = _grid_coords(grid_side)
    d2 = np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2 * sigma_spatial ** 2))


def _sqrt_psd(c):
    vals, vecs = np.linalg.eigh(c)
    if vals.min() <= -1e-10 * max(1.0, vals.max()):
        raise ParamError("spatial covariance is not positive semidefinite")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def pink_noise(n_samples, n_channels, alpha, spatial_cov, rng, _mix=None):
    """Spatially correlated ``1/f**alpha`` noise by spectral synthesis.

    Independent complex Gaussian Fourier coefficients with modulus
    ``f**(-alpha/2)`` are inverted, scaled to unit expected variance and
    mixed across channels by the symmetric square root of ``spatial_cov``
    (identity when None).
    The DC coefficient is zero, so each channel has mean zero.

    Returns
    -------
    ndarray, shape (n_samples, n_channels)
    """
    if not alpha > 0:
        raise ParamError("alpha must be positive")
    rng = np.random.default_rng(rng)
    if _mix is not None:
        mix = _mix
    elif spatial_cov is None:
        mix = np.eye(n_channels)
    else:
        mix = _sqrt_psd(np.asarray(spatial_cov, dtype=float))
    if mix.shape != (n_channels, n_channels):
        raise ParamError("spatial_cov shape does not match n_channels")
    if n_samples < 3:
        # no usable frequency content; fall back to white noise
        white = rng.standard_normal((n_samples, n_channels))
        return white @ mix
    nf = n_samples // 2 + 1
    f = np.arange(nf, dtype=float)
    amp = np.zeros(nf)
    amp[1:] = f[1:] ** (-alpha / 2)
    coef = (rng.standard_normal((nf, n_channels)) + 1j * rng.standard_normal((nf, n_channels))) / np.sqrt(2)
    x = np.fft.irfft(coef * amp[:, None], n=n_samples, axis=0)
    # expected variance of the inverse transform
    p = amp ** 2
    if n_samples % 2 == 0:
        var = (2 * p[1:-1].sum() + p[-1] / 2) / n_samples ** 2
    else:
        var = 2 * p[1:].sum() / n_samples ** 2
    return (x / np.sqrt(var)) @ mix


@dataclass
class DriverConfig:
    """Shared-oscillatory-driver model settings.

    ``epochs`` holds ``(center_ms, lag_ms)`` pairs; a positive lag means
    region 1 leads region 2. Each driver is a sinusoid at ``f_latent_hz``
    whose amplitude is the product of a Gaussian window (SD
    ``window_sd_ms``) around the epoch centre, a per-trial log-normal
    factor with unit median (log-SD ``trial_amp_sd``) and a smooth
    within-trial log-normal modulation (log-SD ``mod_sd``, time scale
    ``mod_timescale_ms``). ``driver_amplitude`` sets the overall driver
    scale against unit-variance background noise; ``gamma`` multiplies the
    spatial loadings. ``pad_ms`` of extra signal is simulated on both
    sides of the analysis interval so band-pass filtering has no edge
    effects there; :func:`~lagcoupling.signal.preprocess` trims it again.
    """

    n_trials: int = 1000
    duration_ms: float = 500.0
    sample_rate_hz: float = 1000.0
    grid_side: int = 5
    f_latent_hz: float = 14.0
    gamma: float = 0.077
    sigma_spatial: float = 0.8
    pink_alpha: float = 1.4
    epochs: tuple = ((80.0, 30.0), (200.0, -30.0), (400.0, -30.0))
    seed: int = 0
    window_sd_ms: float = 40.0
    trial_amp_sd: float = 0.5
    mod_sd: float = 1.0
    mod_timescale_ms: float = 20.0
    driver_amplitude: float = 3.0
    pad_ms: float = 200.0

    def __post_init__(self):
        self.epochs = tuple((float(c), float(l)) for c, l in self.epochs)
        self.validate()

    @property
    def n_samples(self):
        return int(round(self.duration_ms * self.sample_rate_hz / 1000.0))

    @property
    def pad_samples(self):
        return int(round(self.pad_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_channels(self):
        return self.grid_side ** 2

    def validate(self):
        if self.n_trials < 2:
            raise ParamError("need at least two trials")
        if self.n_samples < 2:
            raise ParamError("duration too short for the sample rate")
        if self.grid_side < 1:
            raise ParamError("grid_side must be >= 1")
        if self.gamma < 0:
            raise ParamError("gamma must be nonnegative")
        if not self.sigma_spatial > 0:
            raise ParamError("sigma_spatial must be positive")
        if not self.pink_alpha > 0:
            raise ParamError("pink_alpha must be positive")
        if not 0 < self.f_latent_hz < self.sample_rate_hz / 2:
            raise ParamError("f_latent_hz must lie below Nyquist")
        for c, lag in self.epochs:
            if not abs(lag) < self.duration_ms:
                raise ParamError(f"epoch lag {lag} ms must be shorter than the duration")
        if self.pad_ms < 0:
            raise ParamError("pad_ms must be nonnegative")
        for name in ("window_sd_ms", "mod_timescale_ms"):
            if not getattr(self, name) > 0:
                raise ParamError(f"{name} must be positive")
        for name in ("trial_amp_sd", "mod_sd", "driver_amplitude"):
            if getattr(self, name) < 0:
                raise ParamError(f"{name} must be nonnegative")


def _driver_anchors(cfg, seq):
    rng = np.random.default_rng(substream(seq, "anchors"))
    return rng.integers(cfg.n_channels, size=(2, len(cfg.epochs)))


def _loading_bumps(cfg, anchors):
    """``(2, n_epochs, d)`` spatial bumps ``exp(-dist^2/(2 sigma^2))`` at the anchors."""
    cov = spatial_covariance(cfg.grid_side, cfg.sigma_spatial)
    return cov[anchors]


def _simulate_driver(cfg, rng, random_phase):
    seq = root_sequence(cfg.seed if rng is None else rng)
    pad = cfg.pad_samples
    n, d, J = cfg.n_samples + 2 * pad, cfg.n_channels, len(cfg.epochs)
    fs = cfg.sample_rate_hz
    anchors = _driver_anchors(cfg, seq)
    beta = cfg.gamma * _loading_bumps(cfg, anchors)
    mix = _sqrt_psd(spatial_covariance(cfg.grid_side, cfg.sigma_spatial))
    t_ms = (np.arange(n) - pad) * 1000.0 / fs
    centers = np.array([c for c, _ in cfg.epochs])
    lags = np.array([l for _, l in cfg.epochs])
    # region k sees the driver at time t - tau_k; tau_1 = -lag/2, tau_2 = +lag/2
    tau = np.stack([-lags / 2, lags / 2])
    margin = int(np.ceil(np.max(np.abs(tau)) * fs / 1000.0)) + 2
    u_ms = (np.arange(-margin, n + margin) - pad) * 1000.0 / fs
    mod_sigma = cfg.mod_timescale_ms * fs / 1000.0
    out = np.empty((2, cfg.n_trials, n, d))
    need_signal = cfg.gamma > 0 and cfg.driver_amplitude > 0
    for i in range(cfg.n_trials):
        trng = np.random.default_rng(substream(seq, "trial", i))
        for k in range(2):
            out[k, i] = pink_noise(n, d, cfg.pink_alpha, None, trng, _mix=mix)
        amp = np.exp(cfg.trial_amp_sd * trng.standard_normal(J))
        phase = trng.uniform(0, 2 * np.pi, J)
        # drawn in both variants so they share every other random number
        extra = trng.uniform(0, 2 * np.pi, (2, J))
        if not random_phase:
            extra[:] = 0.0
        white = trng.standard_normal((J, u_ms.size))
        if not need_signal:
            continue
        smooth = gaussian_filter1d(white, mod_sigma, axis=1, mode="wrap")
        smooth /= smooth.std(axis=1, keepdims=True) + 1e-300
        mod = np.exp(cfg.mod_sd * smooth)
        for j in range(J):
            for k in range(2):
                u = t_ms - tau[k, j]
                env = np.interp(u, u_ms, mod[j]) * np.exp(-((u - centers[j]) ** 2) / (2 * cfg.window_sd_ms ** 2))
                wave = np.cos(2 * np.pi * cfg.f_latent_hz * u / 1000.0 + phase[j] + extra[k, j])
                out[k, i] += np.outer(cfg.driver_amplitude * amp[j] * env * wave, beta[k, j])
    meta = {
        "model": "driver_no_coherence" if random_phase else "driver",
        "config": _cfg_dict(cfg),
        "anchors": anchors.tolist(),
        "pad_samples": pad,
        "seed_entropy": int(seq.entropy) if isinstance(seq.entropy, int) else str(seq.entropy),
    }
    return PairedDataset(out[0], out[1], fs, meta)


def _cfg_dict(cfg):
    d = asdict(cfg)
    if "epochs" in d:
        d["epochs"] = [list(e) for e in d["epochs"]]
    return d


def simulate_driver_dataset(cfg, rng=None):
    """Raw two-region recordings from the shared-driver model.

    Each region's channels carry pink noise plus ``sum_j beta_kj *
    L_j(t - tau_kj)`` where the loadings ``beta_kj`` are spatial bumps of
    height ``gamma`` at random anchors (stored in ``meta["anchors"]``) and
    the drivers ``L_j`` share their trial-random phase between regions.

    Parameters
    ----------
    cfg : DriverConfig
    rng : int or SeedSequence, optional
        Root seed; defaults to ``cfg.seed``. Each trial draws from its own
        derived stream.
    """
    return _simulate_driver(cfg, rng, random_phase=False)


def simulate_driver_no_coherence(cfg, rng=None):
    """As :func:`simulate_driver_dataset`, with an independent uniform phase shift
    per region, driver and trial, which removes phase coupling but keeps the
    amplitude coupling."""
    return _simulate_driver(cfg, rng, random_phase=True)


def driver_envelope_loadings(cfg, anchors, n_times, decimate_factor):
    """Envelope-domain loadings per time for the driver model.

    At each decimated time the loading of region ``k`` is the window-weighted
    sum of its driver bumps. Returns two ``(T, d)`` arrays.
    """
    anchors = np.asarray(anchors)
    bumps = _loading_bumps(cfg, anchors)
    t_ms = np.arange(n_times) * decimate_factor * 1000.0 / cfg.sample_rate_hz
    out = []
    for k in range(2):
        L = np.zeros((n_times, cfg.n_channels))
        for j, (c, lag) in enumerate(cfg.epochs):
            tau = -lag / 2 if k == 0 else lag / 2
            g = np.exp(-((t_ms - tau - c) ** 2) / (2 * cfg.window_sd_ms ** 2))
            L += g[:, None] * bumps[k, j][None, :]
        # keep a small floor so every time has a usable direction
        L += 1e-3 * bumps[k].sum(axis=0)[None, :]
        out.append(L)
    return out


def ground_truth_precision(loadings, datasets, lambda_diag):
    """Average of ``inv(cov(Z) + lambda_diag I)`` over datasets with known loadings.

    The latents of each dataset are its canonical variables under the given
    loadings: ``Z_k(t) = beta' inv(V) X`` scaled to unit variance, with
    ``V`` the within-time sample covariance.

    Parameters
    ----------
    loadings : pair of ``(T, d_k)`` arrays
    datasets : PairedDataset or iterable of PairedDataset
        The repeats to average over.
    lambda_diag : float
    """
    if isinstance(datasets, PairedDataset):
        datasets = [datasets]
    acc = None
    count = 0
    for ds in datasets:
        Z = []
        for k, x in enumerate(ds.regions()):
            xc = x - x.mean(axis=0)
            V = np.einsum("ntd,nte->ted", xc, xc) / (ds.n_trials - 1)
            w = np.linalg.solve(V, np.asarray(loadings[k], dtype=float)[:, :, None])[:, :, 0]
            z = np.einsum("ntd,td->nt", xc, w)
            Z.append(z / z.std(axis=0, ddof=1))
        Z = np.concatenate(Z, axis=1)
        S = Z.T @ Z / (ds.n_trials - 1)
        M = S + lambda_diag * np.eye(S.shape[0])
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("latent covariance is singular; use lambda_diag > 0") from exc
        P = np.linalg.inv(M)
        acc = P if acc is None else acc + P
        count += 1
    if count == 0:
        raise ParamError("no datasets given")
    out = acc / count
    return (out + out.T) / 2


def default_epoch_mask(T, lag=None, length=None, half_width=0):
    """Three lag-diagonal bands on ``T`` samples.

    Centres sit at 20%, 50% and 80% of the window. The first band has no
    latency, the second lies below the diagonal (region 2 leads) and the
    third above it (region 1 leads). Each band covers lags within
    ``half_width`` of its own; ``half_width >= 1`` makes an epoch one
    4-connected region but shrinks the admissible per-cell intensity.
    Returns a list of ``(t, s)`` cross-block cells.
    """
    lag = max(1, round(0.06 * T)) if lag is None else int(lag)
    length = max(2, round(0.2 * T)) if length is None else int(length)
    cells = []
    for frac, shift in ((0.2, 0), (0.5, -lag), (0.8, lag)):
        c = int(round(frac * (T - 1)))
        for t in range(c - length // 2, c - length // 2 + length):
            for s in range(t + shift - half_width, t + shift + half_width + 1):
                if 0 <= t < T and 0 <= s < T and (t, s) not in cells:
                    cells.append((t, s))
    return cells


@dataclass
class PccaConfig:
    """Known-precision probabilistic-CCA generator settings.

    The latent precision has auto blocks ``inv(S0_k + lambda_reg I)`` with
    ``S0_k[t, s] = exp(-c0_k (t - s)^2)`` and a cross block that is
    negative on ``epoch_mask`` and zero elsewhere; ``r`` in ``[0, 1)`` is
    the intensity as a fraction of the largest positive-definite value.
    ``noise_scale`` sets the SD of the spatially correlated white noise
    added to the baseline envelopes, relative to their own SD. Smooth
    envelopes alone carry lagged within-region correlation strong enough
    to out-compete the planted latent, so the default is 3.
    """

    N: int = 500
    T: int = 30
    d1: int = 25
    d2: int = 25
    c01: float = 0.148
    c02: float = 0.163
    lambda_reg: float = 1.0
    r: float = 0.6
    epoch_mask: list = None
    seed: int = 0
    noise_scale: float = 3.0

    def __post_init__(self):
        if self.epoch_mask is None:
            self.epoch_mask = default_epoch_mask(self.T)
        self.epoch_mask = [tuple(int(v) for v in c) for c in self.epoch_mask]
        if self.noise_scale < 0:
            raise ParamError("noise_scale must be non-negative")
        if self.N < 2 or self.T < 1 or self.d1 < 1 or self.d2 < 1:
            raise ParamError("N >= 2 and T, d1, d2 >= 1 required")
        if self.lambda_reg <= 0 or self.c01 <= 0 or self.c02 <= 0:
            raise ParamError("lambda_reg, c01 and c02 must be positive")
        for t, s in self.epoch_mask:
            if not (0 <= t < self.T and 0 <= s < self.T):
                raise ParamError(f"epoch cell {(t, s)} outside 0..{self.T - 1}")

    def truth_mask(self):
        m = np.zeros((self.T, self.T), dtype=bool)
        for t, s in self.epoch_mask:
            m[t, s] = True
        return m


def _sym_power(a, p):
    vals, vecs = np.linalg.eigh(a)
    return (vecs * vals ** p) @ vecs.T


def pcca_precision(cfg):
    """Latent ``(omega, sigma)`` of the generator, ``sigma`` rescaled to unit diagonal.

    The cross block is ``-r * rho`` on the mask cells, where ``rho`` is the
    largest value keeping the precision positive definite for this mask,
    so any ``0 <= r < 1`` is admissible. Raises ParamError otherwise.
    """
    if not 0 <= cfg.r < 1:
        raise ParamError(f"connection intensity r={cfg.r} must lie in [0, 1) for a positive definite precision")
    T = cfg.T
    t = np.arange(T)
    lag2 = (t[:, None] - t[None, :]) ** 2
    blocks = []
    for c in (cfg.c01, cfg.c02):
        S0 = np.exp(-c * lag2)
        blocks.append(np.linalg.inv(S0 + cfg.lambda_reg * np.eye(T)))
    mask = cfg.truth_mask().astype(float)
    if mask.any():
        g = _sym_power(blocks[0], -0.5) @ mask @ _sym_power(blocks[1], -0.5)
        rho = 1.0 / np.linalg.norm(g, 2)
    else:
        rho = 0.0
    cross = -cfg.r * rho * mask
    omega = np.block([[blocks[0], cross], [cross.T, blocks[1]]])
    omega = (omega + omega.T) / 2
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise ParamError(f"latent precision is not positive definite at r={cfg.r}")
    sigma = np.linalg.inv(omega)
    sd = np.sqrt(np.diag(sigma))
    sigma = sigma / np.outer(sd, sd)
    omega = omega * np.outer(sd, sd)
    return (omega + omega.T) / 2, (sigma + sigma.T) / 2


def default_pcca_baseline(cfg, decimate_factor=10, sample_rate_hz=1000.0, grid_side=None, seed=None):
    """Amplitude-envelope baseline for :func:`simulate_pcca_dataset`.

    Pure background noise from the driver model (``gamma = 0``), band-passed
    and decimated to ``cfg.T`` samples. Both regions must have the same
    square channel count.
    """
    if cfg.d1 != cfg.d2:
        raise ParamError("the built-in baseline needs d1 == d2")
    side = int(round(np.sqrt(cfg.d1))) if grid_side is None else grid_side
    if side * side != cfg.d1:
        raise ParamError("the built-in baseline needs a square channel count")
    dcfg = DriverConfig(n_trials=cfg.N, duration_ms=cfg.T * decimate_factor * 1000.0 / sample_rate_hz,
                        sample_rate_hz=sample_rate_hz, grid_side=side, gamma=0.0,
                        seed=cfg.seed if seed is None else seed)
    raw = simulate_driver_dataset(dcfg, substream(dcfg.seed, "pcca-baseline"))
    env = preprocess(raw, decimate_factor=decimate_factor)
    r1, r2 = env.regions()
    return PairedDataset(np.ascontiguousarray(r1), np.ascontiguousarray(r2), env.sample_rate_hz, env.meta)


def simulate_pcca_dataset(cfg, baseline=None, rng=None):
    """Observations with an exactly known latent precision.

    ``X_k(t) = Y_k(t) - beta w' (Y_k(t) - E Y_k(t)) + beta Z_k(t)`` where
    ``Y`` is the baseline with trials permuted independently per region and
    optional added white noise, ``Z ~ N(0, sigma)`` and ``w' beta = 1``. The
    projection ``w' X`` recovers ``Z`` up to a constant, so the true weights
    are ``w`` and the true latent precision is :func:`pcca_precision`.

    Returns
    -------
    PairedDataset
        ``meta`` holds ``true_weights``, ``true_loadings``, ``truth_mask``.
    """
    omega, sigma = pcca_precision(cfg)
    seq = root_sequence(cfg.seed if rng is None else rng)
    if baseline is None:
        baseline = default_pcca_baseline(cfg, seed=int(np.random.default_rng(substream(seq, "baseline-seed")).integers(2**63)))
    if baseline.n_trials < cfg.N or baseline.n_times != cfg.T or baseline.dims != (cfg.d1, cfg.d2):
        raise ParamError("baseline must have >= N trials and matching T, d1, d2")
    prng = np.random.default_rng(substream(seq, "permutation"))
    nrng = np.random.default_rng(substream(seq, "noise"))
    zrng = np.random.default_rng(substream(seq, "latent"))
    Ys = []
    for k, y in enumerate(baseline.regions()):
        y = y[prng.permutation(baseline.n_trials)[: cfg.N]]
        d = y.shape[2]
        if cfg.noise_scale > 0:
            side = int(round(np.sqrt(d)))
            cov = spatial_covariance(side, 0.8) if side * side == d else np.eye(d)
            mix = _sqrt_psd(cov)
            scale = y.std(axis=(0, 1))
            y = y + cfg.noise_scale * (nrng.standard_normal(y.shape) @ mix) * scale
        Ys.append(y)
    L = np.linalg.cholesky(sigma)
    Z = zrng.standard_normal((cfg.N, 2 * cfg.T)) @ L.T
    X, W, B = [], [], []
    for k, y in enumerate(Ys):
        yc = y - y.mean(axis=0)
        V = np.einsum("ntd,nte->ted", yc, yc) / (cfg.N - 1)
        d = y.shape[2]
        bump = spatial_covariance(int(round(np.sqrt(d))), 0.8)[d // 2] if int(round(np.sqrt(d))) ** 2 == d else np.ones(d)
        beta = np.tile(bump * V.diagonal(axis1=1, axis2=2).mean(axis=0) ** 0.5, (cfg.T, 1))
        w = np.linalg.solve(V, beta[:, :, None])[:, :, 0]
        w /= np.einsum("td,td->t", w, beta)[:, None]
        zk = Z[:, k * cfg.T:(k + 1) * cfg.T]
        proj = np.einsum("ntd,td->nt", yc, w)
        x = y - proj[:, :, None] * beta[None] + zk[:, :, None] * beta[None]
        X.append(x)
        W.append(w)
        B.append(beta)
    meta = {
        "model": "pcca",
        "config": asdict(cfg),
        "true_weights": [w.tolist() for w in W],
        "true_loadings": [b.tolist() for b in B],
    }
    meta["config"]["epoch_mask"] = [list(c) for c in cfg.epoch_mask]
    return PairedDataset(X[0], X[1], baseline.sample_rate_hz, meta)
