import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cardiosym.signal_io import SynthSpec, synth_ecg
from cardiosym.wavelet import (
    DB4,
    Db4Filters,
    WaveletConfig,
    db4_analysis,
    db4_feature,
    db4_features,
    db4_synthesis,
    denoise,
    morlet,
    morlet_features,
    morlet_kernel,
)

# frozen from an independent evaluation of (1 +- sqrt 3, 3 +- sqrt 3) / (4 sqrt 2)
DB4_H = [0.48296291314453416, 0.8365163037378079, 0.2241438680420134, -0.12940952255126037]


def test_morlet_centre_and_symmetry():
    assert morlet(0.0) == 1.0
    t = np.linspace(-4, 4, 801)
    assert np.array_equal(morlet(t), morlet(-t))


def test_morlet_at_pi_over_5():
    t = math.pi / 5
    assert morlet(t) == pytest.approx(math.exp(-t * t / 2) * math.cos(math.pi), abs=1e-15)
    assert morlet(t) == pytest.approx(-0.82087, abs=1e-5)


def test_kernel_is_odd_and_centred():
    k = morlet_kernel(WaveletConfig(), 250.0)
    assert k.size % 2 == 1 and k[k.size // 2] == 1.0


def test_morlet_features_basic():
    x = np.zeros(300)
    assert np.all(morlet_features(x) == 0)
    k = morlet_kernel(WaveletConfig(), 250.0)
    x[150 - k.size // 2:150 + k.size // 2 + 1] = k
    assert int(np.argmax(morlet_features(x))) == 150


small = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 200, elements=small), arrays(np.float64, 200, elements=small), small)
def test_morlet_features_linear(x, y, c):
    fx, fy = morlet_features(x), morlet_features(y)
    gain = np.abs(morlet_kernel(WaveletConfig(), 250.0)).sum()
    scale = gain * max(1.0, abs(c) * np.abs(x).max() + np.abs(y).max())
    assert np.allclose(morlet_features(c * x + y), c * fx + fy, rtol=0, atol=1e-12 * scale)


def test_morlet_features_rejects_short_signal():
    with pytest.raises(ValueError):
        morlet_features(np.zeros(5))


def test_db4_coefficients_frozen():
    assert np.allclose(DB4.h, DB4_H, rtol=0, atol=1e-15)
    assert np.array_equal(DB4.g, [DB4.h[3], -DB4.h[2], DB4.h[1], -DB4.h[0]])


def test_db4_bad_filters_rejected():
    with pytest.raises(ValueError):
        Db4Filters(h=np.array([0.5, 0.5, 0.5, 0.5]))


def test_db4_constant_and_zero():
    a, d = db4_analysis(np.full(64, 2.5))
    assert np.max(np.abs(d)) < 1e-10
    assert np.allclose(a, 2.5 * math.sqrt(2), rtol=0, atol=1e-12)
    a, d = db4_analysis(np.zeros(16))
    assert not a.any() and not d.any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(4, 300).map(lambda n: 2 * (n // 2)), elements=small))
def test_db4_energy_and_reconstruction(x):
    a, d = db4_analysis(x)
    assert abs(a @ a + d @ d - x @ x) <= 1e-9 * max(1.0, x @ x)
    assert np.max(np.abs(db4_synthesis(a, d) - x)) <= 1e-9 * max(1.0, np.abs(x).max())


def test_db4_feature_product():
    out = db4_feature(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    assert out.tolist() == [3.0, 8.0]
    assert db4_feature(np.ones(750), np.ones(750), 1500).shape == (1500,)
    assert not db4_feature(np.zeros(4), np.ones(4)).any()


def test_db4_features_length():
    assert db4_features(np.random.default_rng(0).standard_normal(1500)).shape == (1500,)
    assert db4_features(np.zeros((2, 3, 1500))).shape == (2, 3, 1500)


def test_denoise_zero_and_length():
    assert not denoise(np.zeros(1500)).any()
    for n in (1500, 999, 3):
        assert denoise(np.random.default_rng(n).standard_normal(n)).shape == (n,)


def test_denoise_clean_distortion():
    for seed in range(5):
        _, truth = synth_ecg(SynthSpec(seed=seed))
        clean = truth.clean[0]
        err = np.sum((denoise(clean) - clean) ** 2) / np.sum(clean ** 2)
        assert err < 0.01


def test_denoise_deterministic():
    rec, _ = synth_ecg(SynthSpec(noise_snr_db=12, seed=2))
    a, b = denoise(rec.channels[0]), denoise(rec.channels[0])
    assert a.tobytes() == b.tobytes()


def test_denoise_rejects_2d():
    with pytest.raises(ValueError):
        denoise(np.zeros((2, 100)))


def test_config_validation():
    with pytest.raises(ValueError):
        WaveletConfig(sigma=0)
    with pytest.raises(ValueError):
        WaveletConfig(carrier=6.0)
    with pytest.raises(ValueError):
        WaveletConfig(levels=0)
