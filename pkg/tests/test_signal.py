import numpy as np
import pytest

from lagcoupling.errors import LengthError, ParamError
from lagcoupling.signal import (amplitude_envelope, cross_coherence, decimate, filter_analytic,
                                kernel_autocorrelation, morlet_kernel, preprocess)
from lagcoupling.tensorio import PairedDataset

FS = 1000.0


@pytest.fixture(scope="module")
def k18():
    return morlet_kernel(18.0, 50.0, FS)


def test_support_length(k18):
    assert len(k18.taps) == 2 * int(np.ceil(4 * 0.05 * 1000)) + 1 == 401


def test_unit_gain(k18):
    assert abs(k18.gain(18.0) - 1.0) < 1e-6


def test_nyquist():
    with pytest.raises(ParamError):
        morlet_kernel(600.0, 50.0, FS)


def test_filtered_cosine_amplitude(k18):
    t = np.arange(4000) / FS
    A = 2.5
    env = amplitude_envelope(filter_analytic(A * np.cos(2 * np.pi * 18.0 * t), k18))
    interior = env[k18.half_width:-k18.half_width]
    assert np.max(np.abs(interior - A)) < 0.01 * A


def test_zero_input(k18):
    assert np.all(filter_analytic(np.zeros(500), k18) == 0)


def test_dc_input(k18):
    out = filter_analytic(np.ones(1000), k18)
    interior = np.abs(out[k18.half_width:-k18.half_width])
    assert np.allclose(interior, abs(k18.response(0.0)), rtol=1e-9)


def test_too_short(k18):
    with pytest.raises(LengthError):
        filter_analytic(np.zeros(100), k18)


def test_envelope():
    assert amplitude_envelope(np.array([3 + 4j]))[0] == 5.0
    assert np.all(amplitude_envelope(np.zeros(4, complex)) == 0)


def test_linearity(k18):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 900))
    a, b = 1.7, -0.3
    lhs = filter_analytic(a * x + b * y, k18)
    rhs = a * filter_analytic(x, k18) + b * filter_analytic(y, k18)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(rhs))


@pytest.mark.parametrize("phi", [0.3, 1.2, 2.9])
def test_phase_invariance(k18, phi):
    t = np.arange(3000) / FS
    e0 = amplitude_envelope(filter_analytic(np.cos(2 * np.pi * 18 * t), k18))
    e1 = amplitude_envelope(filter_analytic(np.cos(2 * np.pi * 18 * t + phi), k18))
    h = k18.half_width
    assert np.max(np.abs(e1[h:-h] - e0[h:-h])) < 0.01


def test_decimate_examples():
    assert decimate(np.arange(6), 2).tolist() == [0, 2, 4]
    x = np.arange(7.0)
    assert np.array_equal(decimate(x, 1), x)
    with pytest.raises(ParamError):
        decimate(x, 0)


def test_decimate_composes():
    x = np.arange(100)
    assert np.array_equal(decimate(decimate(x, 3), 4), decimate(x, 12))


def test_decimated_envelope_length():
    rng = np.random.default_rng(0)
    ds = PairedDataset(rng.standard_normal((2, 500, 1)), rng.standard_normal((2, 500, 1)), FS)
    assert preprocess(ds, decimate_factor=10).n_times == 50


def test_preprocess_trims_padding():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 900, 1))
    ds = PairedDataset(x, x, FS, {"pad_samples": 200})
    out = preprocess(ds, decimate_factor=10)
    assert out.n_times == 50 and out.sample_rate_hz == 100.0
    full = preprocess(PairedDataset(x, x, FS), decimate_factor=1)
    assert np.allclose(out.region1[:, :, 0], full.region1[:, 200:700:10, 0])


def test_autocorrelation(k18):
    ac = kernel_autocorrelation(k18, 20, 10)
    assert ac.size == 41
    assert ac[20] == 1.0
    assert np.allclose(ac, ac[::-1])
    assert np.all(np.diff(ac[20:]) < 0)


def test_autocorrelation_monotone_over_4sigma(k18):
    ac = kernel_autocorrelation(k18, 200, 1)
    assert np.all(np.diff(ac[200:]) < 0)


def test_cross_coherence_bounds_and_extremes():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((400, 3)) + 1j * rng.standard_normal((400, 3))
    coh = cross_coherence(a, a * np.exp(1j * 0.7))
    assert np.allclose(np.diag(coh), 1.0)
    assert np.all((coh >= 0) & (coh <= 1 + 1e-12))
    b = rng.standard_normal((400, 2)) + 1j * rng.standard_normal((400, 2))
    assert cross_coherence(a, b).max() < 0.2


def test_cross_coherence_random_phase_vanishes():
    rng = np.random.default_rng(12)
    amp = rng.random((2000, 1)) + 0.5
    phase = rng.uniform(0, 2 * np.pi, (2000, 2))
    z = amp * np.exp(1j * phase)
    assert cross_coherence(z[:, :1], z[:, 1:])[0, 0] < 0.06
    with pytest.raises(ParamError):
        cross_coherence(z[:10], z)
