"""Complex Morlet band-pass filtering, amplitude envelopes and decimation."""
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import LengthError, ParamError
from .tensorio import PairedDataset

__all__ = [
    "MorletKernel",
    "amplitude_envelope",
    "cross_coherence",
    "decimate",
    "filter_analytic",
    "kernel_autocorrelation",
    "morlet_kernel",
    "preprocess",
]


@dataclass(frozen=True)
class MorletKernel:
    f0_hz: float
    bandwidth_ms: float
    sample_rate_hz: float
    taps: np.ndarray

    @property
    def half_width(self):
        return (len(self.taps) - 1) // 2

    def response(self, f_hz):
        """Discrete-time Fourier transform of the taps at ``f_hz``."""
        n = np.arange(-self.half_width, self.half_width + 1)
        return np.sum(self.taps * np.exp(-2j * np.pi * f_hz * n / self.sample_rate_hz))

    def gain(self, f_hz):
        """Amplitude gain for a real sinusoid at ``f_hz``.

        The kernel is analytic (one-sided in frequency), so a real cosine
        ``cos(2 pi f t)`` comes out with modulus ``|H(f)| / 2``; the taps are
        scaled so this equals 1 at ``f0``.
        """
        return abs(self.response(f_hz)) / 2.0


def morlet_kernel(f0_hz, bandwidth_ms, sample_rate_hz):
    """Build a complex Morlet kernel truncated at +/- 4 standard deviations.

    Parameters
    ----------
    f0_hz : float
        Centre frequency; must be below Nyquist.
    bandwidth_ms : float
        Standard deviation of the Gaussian envelope, in milliseconds.
    sample_rate_hz : float
    """
    if not sample_rate_hz > 0:
        raise ParamError("sample rate must be positive")
    if not 0 < f0_hz < sample_rate_hz / 2:
        raise ParamError(f"f0={f0_hz} Hz must lie in (0, Nyquist={sample_rate_hz / 2})")
    if not bandwidth_ms > 0:
        raise ParamError("bandwidth must be positive")
    sigma = bandwidth_ms / 1000.0
    half = math.ceil(4 * sigma * sample_rate_hz)
    n = np.arange(-half, half + 1)
    tn = n / sample_rate_hz
    env = np.exp(-(tn ** 2) / (2 * sigma ** 2))
    taps = np.exp(2j * np.pi * f0_hz * tn) * env
    # H(f0) = sum(env); doubling makes a unit cosine yield a unit envelope
    taps *= 2.0 / env.sum()
    return MorletKernel(float(f0_hz), float(bandwidth_ms), float(sample_rate_hz), taps)


def filter_analytic(series, k, axis=-1):
    """Convolve with the kernel, reflect-padding both ends; same-length output."""
    x = np.asarray(series, dtype=float)
    n = x.shape[axis]
    if n < len(k.taps):
        raise LengthError(f"series of length {n} is shorter than the {len(k.taps)}-tap kernel")
    h = k.half_width
    x = np.moveaxis(x, axis, -1)
    pad = [(0, 0)] * (x.ndim - 1) + [(h, h)]
    xp = np.pad(x, pad, mode="reflect")
    taps = k.taps.reshape((1,) * (x.ndim - 1) + (-1,))
    y = fftconvolve(xp, taps, mode="valid", axes=-1)
    return np.moveaxis(y, -1, axis)


def amplitude_envelope(z):
    return np.abs(z)


def decimate(series, factor, axis=-1):
    """Keep every ``factor``-th sample starting at index 0 (no extra anti-aliasing)."""
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise ParamError(f"decimation factor must be a positive integer, got {factor!r}")
    x = np.asarray(series)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, int(factor))
    return x[tuple(sl)]


def cross_coherence(z1, z2):
    """Across-trial coherence between two sets of complex series.

    Parameters
    ----------
    z1 : ndarray, shape (N, T1)
    z2 : ndarray, shape (N, T2)
        Analytic signals, trials first.

    Returns
    -------
    ndarray, shape (T1, T2)
        ``|mean(z1[:, t] conj(z2[:, s]))| / sqrt(mean|z1[:, t]|^2 mean|z2[:, s]|^2)``,
        in ``[0, 1]``.
    """
    a = np.asarray(z1)
    b = np.asarray(z2)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ParamError("need two (N, T) arrays with the same number of trials")
    cross = np.abs(a.T @ b.conj()) / a.shape[0]
    pa = np.mean(np.abs(a) ** 2, axis=0)
    pb = np.mean(np.abs(b) ** 2, axis=0)
    denom = np.sqrt(np.outer(pa, pb))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, cross / denom, 0.0)


def kernel_autocorrelation(k, max_lag, step=1):
    """Normalised autocorrelation modulus of the filter, lags ``-max_lag..max_lag``.

    Lags are counted on a grid decimated by ``step`` (lag ``l`` means
    ``l * step`` raw samples). The output has ``2 * max_lag + 1`` entries
    with lag 0 in the middle and equal to 1. Filtered white noise has this
    autocorrelation modulus.
    """
    if max_lag * step >= len(k.taps):
        raise ParamError("max_lag reaches beyond the kernel support")
    full = np.correlate(k.taps, k.taps, mode="full")
    mid = len(k.taps) - 1
    lags = np.arange(-max_lag, max_lag + 1) * step
    vals = np.abs(full[mid + lags])
    return vals / vals[max_lag]


def preprocess(ds, f0_hz=18.0, bandwidth_ms=50.0, decimate_factor=10, trim=None):
    """Band-pass, take envelopes, trim and decimate both regions of ``ds``.

    Parameters
    ----------
    trim : int, optional
        Raw samples dropped at each end after filtering, to discard
        padding recorded around the interval of interest. Defaults to
        ``ds.meta["pad_samples"]`` (0 when absent).
    """
    if trim is None:
        trim = int(ds.meta.get("pad_samples", 0))
    if trim < 0 or 2 * trim >= ds.n_times:
        raise LengthError(f"cannot trim {trim} samples from each end of {ds.n_times}")
    k = morlet_kernel(f0_hz, bandwidth_ms, ds.sample_rate_hz)
    out = []
    for x in ds.regions():
        env = amplitude_envelope(filter_analytic(x, k, axis=1))
        env = env[:, trim:env.shape[1] - trim]
        out.append(np.ascontiguousarray(decimate(env, decimate_factor, axis=1)))
    meta = dict(ds.meta)
    meta.pop("pad_samples", None)
    meta["preprocess"] = {"f0_hz": f0_hz, "bandwidth_ms": bandwidth_ms,
                          "decimate_factor": decimate_factor, "trim": trim}
    return PairedDataset(out[0], out[1], ds.sample_rate_hz / decimate_factor, meta)
