import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from septr import dsp
from septr.dsp import AugmentConfig, MelSpectrogram, SpectroConfig, Waveform
from septr.errors import ConfigError, InputLengthError

PAPER_CFG = SpectroConfig(fft_length=1024, hop=64, window_length=512, mel_bins=128, sample_rate=16000)


def naive_stft(x, cfg):
    """Direct windowed-DFT summation over each frame's support, absolute-time phase."""
    w = dsp.analysis_window(cfg)
    frames = (len(x) - cfg.window_length) // cfg.hop + 1
    n_bins = cfg.fft_length // 2 + 1
    out = np.zeros((n_bins, frames), dtype=complex)
    k = np.arange(n_bins)[:, None]
    for m in range(frames):
        n = m * cfg.hop + np.arange(cfg.window_length)
        basis = np.exp(-2j * np.pi * k * n[None, :] / cfg.fft_length)
        out[:, m] = basis @ (x[n] * w[n - m * cfg.hop])
    return out


def test_stft_zero_signal():
    assert not dsp.stft(np.zeros(2048), PAPER_CFG).any()


def test_stft_impulse_magnitude_equals_window_value():
    cfg = SpectroConfig(fft_length=64, hop=16, window_length=32, mel_bins=4, sample_rate=8000)
    x = np.zeros(128)
    n0 = 16 * 3 + 16  # centre of frame 3
    x[n0] = 1.0
    S = dsp.stft(x, cfg)
    w = dsp.analysis_window(cfg)
    assert np.abs(np.abs(S[:, 3]) - w[n0 - 3 * cfg.hop]).max() <= 1e-12
    assert np.abs(S - naive_stft(x, cfg)).max() <= 1e-12


def test_stft_bin_frequency_sinusoid_peaks_at_bin():
    cfg = PAPER_CFG
    k0 = 37
    n = np.arange(4096)
    x = np.sin(2 * np.pi * k0 * cfg.sample_rate / cfg.fft_length * n / cfg.sample_rate)
    S = dsp.stft(x, cfg)
    assert (np.abs(S).argmax(axis=0) == k0).all()
    assert np.abs(S - naive_stft(x, cfg)).max() <= 1e-9


def test_stft_frame_count_and_short_signal():
    assert dsp.stft(np.zeros(16000), PAPER_CFG).shape == (513, 243)
    with pytest.raises(InputLengthError):
        dsp.stft(np.zeros(511), PAPER_CFG)


@pytest.mark.parametrize("seed", range(5))
def test_stft_matches_naive_dft_random(seed):
    rng = np.random.default_rng(seed)
    cfg = SpectroConfig(fft_length=256, hop=int(rng.integers(8, 64)), window_length=int(rng.integers(64, 257)), mel_bins=8)
    x = rng.uniform(-1, 1, size=int(rng.integers(cfg.window_length, 1500)))
    assert np.abs(dsp.stft(x, cfg) - naive_stft(x, cfg)).max() <= 1e-9


# ---------------------------------------------------------------- mel


def test_mel_zero_in_zero_out():
    assert not dsp.mel_project(np.zeros((513, 5)), PAPER_CFG).any()


def test_filterbank_structure():
    bank = dsp.mel_filterbank(PAPER_CFG)
    assert bank.shape == (128, 513)
    assert (bank >= 0).all()
    assert np.abs(bank.sum(axis=1) - 1.0).max() <= 1e-12
    freqs = np.arange(513) * 16000 / 1024
    interior = (freqs > 0) & (freqs < 8000)
    assert (bank[:, interior].sum(axis=0) > 0).all()
    # each FFT bin sits inside at most two overlapping triangles
    assert (np.count_nonzero(bank, axis=0) <= 2).all()


def test_single_bin_hits_at_most_two_filters():
    cfg = PAPER_CFG
    edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000), cfg.mel_bins + 2))
    for b in (3, 40, 200, 511):
        S = np.zeros((513, 1))
        S[b] = 4.0
        out = dsp.mel_project(S, cfg)[:, 0]
        f = b * 16000 / 1024
        # filters i whose support (edges[i], edges[i+2]) contains f
        expected = {i for i in range(cfg.mel_bins) if edges[i] < f < edges[i + 2]}
        assert set(np.flatnonzero(out)) <= expected
        assert 1 <= len(np.flatnonzero(out)) <= 2


def test_empty_filters_warn_rather_than_fail():
    with pytest.warns(UserWarning, match="cover no FFT bin"):
        bank = dsp.mel_filterbank(SpectroConfig(sample_rate=44100, hop=128))
    assert bank.shape == (128, 513)


def test_power_variant():
    S = np.full((513, 2), 4.0)
    cfg = SpectroConfig(magnitude="power")
    assert np.allclose(dsp.mel_project(S, cfg), 16.0)
    assert np.allclose(dsp.mel_project(S, PAPER_CFG), 2.0)


# ---------------------------------------------------------------- log normalization


def test_log_normalize_constant_is_zero():
    assert not dsp.log_normalize(np.full((4, 6), 0.3)).values.any()


def test_log_normalize_range_and_scale_invariance():
    M = np.random.default_rng(0).uniform(0.01, 2.0, size=(16, 20))
    a = dsp.log_normalize(M).values
    assert a.min() == 0.0 and a.max() == 1.0
    b = dsp.log_normalize(M * 7.3).values
    assert np.abs(a - b).max() <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1e3))
def test_log_normalize_property(seed, k):
    M = np.random.default_rng(seed).exponential(size=(8, 9))
    a = dsp.log_normalize(M).values
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert np.abs(a - dsp.log_normalize(M * k).values).max() <= 1e-6


def test_db_floor_is_peak_relative():
    M = np.array([[1.0, 1e-6, 1e-12]])
    out = dsp.log_normalize(M, db_floor=-80.0).values
    # 1e-6 is -120 dB and 1e-12 is -240 dB: both clamp to the -80 dB floor
    assert np.array_equal(out, [[1.0, 0.0, 0.0]])


def test_mel_spectrogram_pipeline_shape_and_range():
    x = Waveform(np.random.default_rng(1).uniform(-0.5, 0.5, 16000), 16000)
    spec = dsp.mel_spectrogram(x, PAPER_CFG)
    assert spec.shape == (128, 243)
    assert spec.values.min() == 0.0 and spec.values.max() == 1.0
    with pytest.raises(ConfigError):
        dsp.mel_spectrogram(Waveform(x.samples, 8000), PAPER_CFG)


# ---------------------------------------------------------------- pad / clip


def test_pad_or_clip():
    x = Waveform(np.arange(1.0, 9.0), 2)
    assert dsp.pad_or_clip(x, 4.0) is x
    short = dsp.pad_or_clip(x, 6.0).samples
    assert np.array_equal(short, list(range(1, 9)) + [0, 0, 0, 0])
    assert np.array_equal(dsp.pad_or_clip(x, 2.0).samples, [1, 2, 3, 4])
    with pytest.raises(ConfigError):
        dsp.pad_or_clip(x, 0)


# ---------------------------------------------------------------- augmentation


def _wave(seed=0):
    return Waveform(np.random.default_rng(seed).uniform(-0.5, 0.5, 4000), 16000)


def test_zero_probabilities_are_identity():
    cfg = AugmentConfig.disabled()
    w = _wave()
    assert dsp.augment(w, cfg, np.random.default_rng(0)) is w
    spec = MelSpectrogram(np.random.default_rng(1).uniform(size=(16, 20)))
    assert dsp.augment(spec, cfg, np.random.default_rng(0)) is spec


def test_waveform_augment_deterministic_and_length_preserving():
    cfg = AugmentConfig(p_noise=1.0, p_shift=1.0, p_speed=1.0, speed_factors=(1.1,))
    a = dsp.augment(_wave(), cfg, dsp.sample_rng(7, 0, 3))
    b = dsp.augment(_wave(), cfg, dsp.sample_rng(7, 0, 3))
    c = dsp.augment(_wave(), cfg, dsp.sample_rng(7, 0, 4))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert len(a) == 4000


def test_noise_hits_requested_snr():
    x = np.sin(np.linspace(0, 200, 20000))
    noisy = dsp.add_noise(x, 20.0, np.random.default_rng(0))
    noise = noisy - x
    snr = 10 * np.log10(np.mean(x**2) / np.mean(noise**2))
    assert abs(snr - 20.0) < 1e-9


def test_speed_change_length():
    assert dsp.change_speed(np.ones(1000), 1.1).shape == (909,)
    assert dsp.change_speed(np.ones(1000), 0.9).shape == (1111,)


def test_mixup_endpoint():
    a, b = np.ones((2, 2)), np.zeros((2, 2))
    ya, yb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    x, y = dsp.mixup(a, ya, b, yb, 1.0)
    assert np.array_equal(x, a) and np.array_equal(y, ya)
    x, y = dsp.mixup(a, ya, b, yb, 0.25)
    assert np.allclose(x, 0.25) and np.allclose(y, [0.25, 0.75])


@pytest.mark.parametrize("w", [1, 3, 7])
def test_time_mask_zeroes_exactly_w_columns(w):
    values = np.random.default_rng(2).uniform(0.1, 1.0, size=(16, 40))
    out = dsp.time_mask(values, 5, w)
    zero_cols = int((out.sum(axis=0) == 0).sum())
    assert zero_cols == w
    assert int((dsp.freq_mask(values, 2, w).sum(axis=1) == 0).sum()) == w


def test_spec_augment_widths_bounded():
    cfg = AugmentConfig(p_specaugment=1.0, max_time_mask_fraction=0.2, max_freq_mask_fraction=0.25)
    values = np.random.default_rng(3).uniform(0.1, 1.0, size=(16, 40))
    for seed in range(20):
        out = dsp.spec_augment(values, cfg, np.random.default_rng(seed))
        assert (out.sum(axis=0) == 0).sum() <= 8
        assert (out.sum(axis=1) == 0).sum() <= 4


def test_mask_width_must_be_smaller_than_axis():
    spec = MelSpectrogram(np.random.default_rng(4).uniform(size=(8, 10)))
    with pytest.raises(ConfigError):
        dsp.augment(spec, AugmentConfig(max_time_mask_fraction=1.0), np.random.default_rng(0))


def test_invalid_probability_rejected():
    with pytest.raises(ConfigError):
        AugmentConfig(p_noise=1.5)
