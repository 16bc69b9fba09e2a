import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soundboxes.audio import (AudioClip, Mask, StftConfig, apply_mask_reconstruct, binary_target_masks,
                              istft, load_spectrogram, mix, read_wav, save_spectrogram, stft, write_wav)
from soundboxes.errors import ConfigError, InvalidInputError

SR = 11025


def rel_rms(a, b):
    return np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2))


def sine(freq, n=SR, sr=SR, amp=1.0):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / sr), sr)


def test_mix_identities():
    r1 = AudioClip(np.random.randn(500), SR)
    assert np.array_equal(mix(r1, AudioClip(np.zeros(500), SR)).samples, r1.samples)
    assert np.array_equal(mix(r1, AudioClip(-r1.samples, SR)).samples, np.zeros(500))


def test_mix_does_not_normalise():
    a = AudioClip(np.full(100, 0.8), SR)
    assert np.allclose(mix(a, a).samples, 1.6)


@pytest.mark.parametrize("other", [AudioClip(np.zeros(400), SR), AudioClip(np.zeros(500), 8000)])
def test_mix_rejects_mismatch(other):
    with pytest.raises(InvalidInputError):
        mix(AudioClip(np.zeros(500), SR), other)


def test_mixed_sines_have_both_peaks():
    n = SR
    m = mix(sine(440, n), sine(660, n))
    spectrum = np.abs(np.fft.rfft(m.samples))
    # analytic bins for a 1 s signal: frequency in Hz == bin index
    top2 = set(np.argsort(spectrum)[-2:])
    assert top2 == {440, 660}


def test_stft_of_zeros_is_zero():
    s = stft(AudioClip(np.zeros(4096), SR))
    assert s.magnitude.shape == (512, 17)
    assert np.all(s.magnitude == 0)


@pytest.mark.parametrize("cfg", [StftConfig(), StftConfig(254, 128), StftConfig(512, 128)])
def test_round_trip(cfg):
    rng = np.random.default_rng(1)
    for length in (4000, 8064, 11025):
        x = AudioClip(rng.standard_normal(length), SR)
        y = istft(stft(x, cfg))
        assert len(y) == length
        assert rel_rms(y.samples, x.samples) < 1e-4


@pytest.mark.parametrize("cfg", [StftConfig(), StftConfig(254, 128)])
def test_sine_bin_location(cfg):
    spec = stft(sine(440, 4 * SR), cfg)
    peak = np.argmax(spec.magnitude.mean(axis=1))
    assert abs(peak - round(440 * cfg.n_fft / SR)) <= 1


def test_non_invertible_config_rejected():
    # periodic Hann is zero at its first sample, so hop == n_fft leaves unrecoverable samples
    with pytest.raises(ConfigError):
        StftConfig(n_fft=256, hop=256)
    with pytest.raises(ConfigError):
        StftConfig(n_fft=256, hop=300)


def test_binary_masks_examples():
    s2 = np.random.rand(6, 5) + 0.1
    m1, m2 = binary_target_masks(2 * s2, s2)
    assert np.all(m1.values == 1) and np.all(m2.values == 0)
    m1, m2 = binary_target_masks(s2, s2)
    assert np.all(m1.values == 0) and np.all(m2.values == 0)
    m1, m2 = binary_target_masks(s2, np.zeros_like(s2))
    assert np.all(m1.values == 1) and np.all(m2.values == 0)


def test_binary_masks_shape_mismatch():
    with pytest.raises(InvalidInputError):
        binary_target_masks(np.ones((3, 3)), np.ones((3, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5])),
       arrays(np.float64, (5, 7), elements=st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5])))
def test_binary_mask_algebra(a, b):
    m1, m2 = binary_target_masks(a, b)
    total = m1.values + m2.values
    assert set(np.unique(total)) <= {0.0, 1.0}
    decisive = (a + b > 0) & (a != b)
    assert np.all(total[decisive] == 1)
    assert np.all(total[~decisive] == 0)


def test_apply_mask_identity_and_silence():
    x = AudioClip(np.random.randn(8064), SR)
    spec = stft(x)
    ones = apply_mask_reconstruct(spec, Mask(np.ones(spec.shape)))
    assert rel_rms(ones.samples, x.samples) < 1e-6
    zeros = apply_mask_reconstruct(spec, Mask(np.zeros(spec.shape)))
    assert np.all(zeros.samples == 0)


def test_complementary_masks_sum_to_input():
    x = AudioClip(np.random.randn(8064), SR)
    spec = stft(x, StftConfig(254, 128))
    m = np.random.rand(*spec.shape)
    y1 = apply_mask_reconstruct(spec, m)
    y2 = apply_mask_reconstruct(spec, 1 - m)
    assert rel_rms(y1.samples + y2.samples, x.samples) < 1e-3


def test_mask_never_increases_magnitude():
    spec = stft(AudioClip(np.random.randn(3000), SR), StftConfig(254, 128))
    m = Mask(np.random.rand(*spec.shape))
    assert np.all(m.values * spec.magnitude <= spec.magnitude)


def test_mask_range_enforced():
    with pytest.raises(InvalidInputError):
        Mask(np.array([[1.2]]))


def test_apply_mask_shape_mismatch():
    spec = stft(AudioClip(np.random.randn(3000), SR))
    with pytest.raises(InvalidInputError):
        apply_mask_reconstruct(spec, np.ones((3, 3)))


@pytest.mark.parametrize("subtype,tol", [("float32", 1e-6), ("pcm16", 1e-4)])
def test_wav_round_trip(tmp_path, subtype, tol):
    x = AudioClip(0.5 * np.sin(np.arange(2000) / 7.0), SR)
    write_wav(tmp_path / "a.wav", x, subtype)
    y = read_wav(tmp_path / "a.wav")
    assert y.sample_rate == SR
    assert np.max(np.abs(y.samples - x.samples)) < tol


def test_wav_resampling(tmp_path):
    write_wav(tmp_path / "a.wav", sine(300, 22050, 22050, 0.5))
    y = read_wav(tmp_path / "a.wav", target_rate=SR)
    assert y.sample_rate == SR and len(y) == SR


def test_spectrogram_dump(tmp_path):
    x = AudioClip(np.random.randn(3000), SR)
    spec = stft(x)
    save_spectrogram(tmp_path / "spec.npz", spec)
    meta = json.loads((tmp_path / "spec.json").read_text())
    assert meta["sr"] == SR and meta["window"] == 1022 and meta["hop"] == 256
    back = load_spectrogram(tmp_path / "spec.npz")
    assert np.allclose(istft(back).samples, x.samples)


def test_audio_clip_validation():
    with pytest.raises(InvalidInputError):
        AudioClip(np.array([0.0, np.nan]), SR)
    with pytest.raises(InvalidInputError):
        AudioClip(np.zeros((2, 10)), SR)
