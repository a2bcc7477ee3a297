"""Audio front end: STFT, mel projection, dB normalization and augmentation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError, InputLengthError


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(samples).all():
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class SpectroConfig:
    """STFT and mel settings.

    ``magnitude`` selects what feeds the mel filters: ``"sqrt"`` (square root of
    the STFT magnitude, the experimental recipe) or ``"power"`` (squared
    magnitude).  ``db_floor`` is relative to the per-spectrogram peak.
    """

    fft_length: int = 1024
    hop: int = 64
    window_length: int = 512
    window: str = "hamming"
    mel_bins: int = 128
    db_floor: float = -80.0
    sample_rate: int = 16000
    f_min: float = 0.0
    f_max: float | None = None
    magnitude: str = "sqrt"
    log_eps: float = 1e-10

    def __post_init__(self):
        if not 0 < self.window_length <= self.fft_length:
            raise ConfigError(f"need 0 < window_length <= fft_length, got {self.window_length}, {self.fft_length}")
        if not 0 < self.hop <= self.window_length:
            raise ConfigError(f"need 0 < hop <= window_length, got hop={self.hop}")
        if self.mel_bins <= 0:
            raise ConfigError("mel_bins must be positive")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.db_floor >= 0:
            raise ConfigError("db_floor must be negative (dB below the peak)")
        if self.magnitude not in ("sqrt", "power"):
            raise ConfigError(f"magnitude must be 'sqrt' or 'power', got {self.magnitude!r}")
        if not 0 <= self.f_min < self.upper_frequency <= self.sample_rate / 2:
            raise ConfigError("mel range must satisfy 0 <= f_min < f_max <= sample_rate / 2")

    @property
    def upper_frequency(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else float(self.f_max)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_length:
            raise InputLengthError(f"signal of {num_samples} samples is shorter than one window ({self.window_length})")
        return (num_samples - self.window_length) // self.hop + 1


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [mel_bins x frames], in [0, 1]
    config: SpectroConfig | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("spectrogram values must lie in [0, 1]")
        if self.config is not None and values.shape[0] != self.config.mel_bins:
            raise ValueError(f"{values.shape[0]} rows but config has {self.config.mel_bins} mel bins")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# STFT


def analysis_window(cfg: SpectroConfig) -> np.ndarray:
    return get_window(cfg.window, cfg.window_length, fftbins=True).astype(np.float64)


def stft(x: Waveform | np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """Windowed DFT with the phase referenced to absolute sample index.

    Returns a complex ``[fft_length // 2 + 1, frames]`` matrix where frame ``m``
    covers samples ``m * hop ... m * hop + window_length - 1``.
    """
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    frames = cfg.num_frames(samples.shape[0])
    w = analysis_window(cfg)
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop * np.arange(frames)[:, None]
    segments = samples[idx] * w
    local = np.fft.rfft(segments, n=cfg.fft_length, axis=1)
    # shift phase from frame-local to absolute time origin
    k = np.arange(cfg.fft_length // 2 + 1)
    offsets = cfg.hop * np.arange(frames)
    phase = np.exp(-2j * np.pi * np.outer(offsets, k) / cfg.fft_length)
    return (local * phase).T


# ---------------------------------------------------------------------------
# Mel projection


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectroConfig) -> np.ndarray:
    """HTK-scale triangular filters, each row normalized to unit sum.

    Filters narrower than the FFT bin spacing can miss every bin; those rows
    stay zero and a ``UserWarning`` names them.
    """
    n_bins = cfg.fft_length // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_length
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_frequency), cfg.mel_bins + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    sums = bank.sum(axis=1)
    empty = sums <= 0
    if empty.any():
        warnings.warn(
            f"mel filters {np.flatnonzero(empty).tolist()} cover no FFT bin; "
            "lower mel_bins or raise fft_length to resolve them",
            stacklevel=2,
        )
        sums = np.where(empty, 1.0, sums)
    return bank / sums[:, None]


def mel_project(S: np.ndarray, cfg: SpectroConfig, filterbank: np.ndarray | None = None) -> np.ndarray:
    mag = np.abs(S)
    feats = np.sqrt(mag) if cfg.magnitude == "sqrt" else mag * mag
    bank = mel_filterbank(cfg) if filterbank is None else filterbank
    return bank @ feats


def log_normalize(M: np.ndarray, db_floor: float = -80.0, eps: float = 1e-10, config: SpectroConfig | None = None) -> MelSpectrogram:
    """dB conversion, peak-relative floor, then min-max scaling to [0, 1].

    A constant input has no range and maps to all zeros.
    """
    M = np.asarray(M, dtype=np.float64)
    if (M < 0).any():
        raise ValueError("log_normalize expects a nonnegative matrix")
    db = 20.0 * np.log10(M + eps)
    db = np.maximum(db, db.max() + db_floor)
    lo, hi = db.min(), db.max()
    if hi - lo <= 0.0:
        return MelSpectrogram(np.zeros_like(db), config)
    return MelSpectrogram(np.clip((db - lo) / (hi - lo), 0.0, 1.0), config)


def mel_spectrogram(x: Waveform, cfg: SpectroConfig, filterbank: np.ndarray | None = None) -> MelSpectrogram:
    if x.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform is {x.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    M = mel_project(stft(x, cfg), cfg, filterbank)
    return log_normalize(M, cfg.db_floor, cfg.log_eps, cfg)


def pad_or_clip(x: Waveform, target_seconds: float) -> Waveform:
    if target_seconds <= 0:
        raise ConfigError(f"target length must be positive, got {target_seconds} s")
    n = int(round(target_seconds * x.sample_rate))
    if len(x) == n:
        return x
    if len(x) > n:
        return Waveform(x.samples[:n], x.sample_rate)
    return Waveform(np.concatenate([x.samples, np.zeros(n - len(x))]), x.sample_rate)


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentConfig:
    noise_snr_db: tuple[float, float] = (15.0, 30.0)
    max_shift_fraction: float = 0.1
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    mixup_alpha: float = 0.2
    time_masks: int = 1
    freq_masks: int = 1
    max_time_mask_fraction: float = 0.1
    max_freq_mask_fraction: float = 0.1
    p_noise: float = 0.5
    p_shift: float = 0.5
    p_speed: float = 0.5
    p_mixup: float = 0.5
    p_specaugment: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("p_noise", "p_shift", "p_speed", "p_mixup", "p_specaugment"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.noise_snr_db
        if lo > hi:
            raise ConfigError("noise_snr_db range is reversed")
        if not 0.0 <= self.max_shift_fraction <= 1.0:
            raise ConfigError("max_shift_fraction must lie in [0, 1]")
        if not self.speed_factors or min(self.speed_factors) <= 0:
            raise ConfigError("speed_factors must be a nonempty set of positive factors")
        if self.mixup_alpha <= 0:
            raise ConfigError("mixup_alpha must be positive")
        if self.time_masks < 0 or self.freq_masks < 0:
            raise ConfigError("mask counts must be nonnegative")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        zeros = dict(p_noise=0.0, p_shift=0.0, p_speed=0.0, p_mixup=0.0, p_specaugment=0.0)
        zeros.update(overrides)
        return cls(**zeros)

    def max_mask_widths(self, shape: tuple[int, int]) -> tuple[int, int]:
        """(frequency, time) maximum mask widths for a spectrogram of ``shape``."""
        freq_w = int(self.max_freq_mask_fraction * shape[0])
        time_w = int(self.max_time_mask_fraction * shape[1])
        if self.freq_masks and freq_w >= shape[0]:
            raise ConfigError(f"frequency mask width {freq_w} must be smaller than {shape[0]} bins")
        if self.time_masks and time_w >= shape[1]:
            raise ConfigError(f"time mask width {time_w} must be smaller than {shape[1]} frames")
        return freq_w, time_w


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = np.mean(samples * samples)
    if power == 0.0:
        return samples.copy()
    noise = rng.standard_normal(samples.shape[0])
    noise *= np.sqrt(power / 10.0 ** (snr_db / 10.0) / np.mean(noise * noise))
    return samples + noise


def time_shift(samples: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(samples, shift)


def change_speed(samples: np.ndarray, factor: float) -> np.ndarray:
    """Linear-interpolation resampling; output length ``len / factor``."""
    if factor == 1.0:
        return samples.copy()
    n_out = max(1, int(round(samples.shape[0] / factor)))
    pos = np.arange(n_out) * factor
    return np.interp(pos, np.arange(samples.shape[0]), samples, right=0.0)


def time_mask(values: np.ndarray, start: int, width: int) -> np.ndarray:
    out = values.copy()
    out[:, start : start + width] = 0.0
    return out


def freq_mask(values: np.ndarray, start: int, width: int) -> np.ndarray:
    out = values.copy()
    out[start : start + width, :] = 0.0
    return out


def spec_augment(values: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    freq_w, time_w = cfg.max_mask_widths(values.shape)
    out = values
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, freq_w + 1))
        out = freq_mask(out, int(rng.integers(0, values.shape[0] - w + 1)), w)
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, time_w + 1))
        out = time_mask(out, int(rng.integers(0, values.shape[1] - w + 1)), w)
    return out


def augment(x, cfg: AugmentConfig, rng: np.random.Generator):
    """Apply the per-sample augmentations that match the type of ``x``.

    Waveforms get noise, circular time shift and speed perturbation (length
    preserved); spectrograms get SpecAugment masking.  Mixup pairs samples and
    lives in :func:`mixup`.
    """
    if isinstance(x, Waveform):
        s = x.samples
        n = s.shape[0]
        if rng.random() < cfg.p_noise:
            s = add_noise(s, rng.uniform(*cfg.noise_snr_db), rng)
        if rng.random() < cfg.p_shift:
            max_shift = int(cfg.max_shift_fraction * n)
            s = time_shift(s, int(rng.integers(-max_shift, max_shift + 1)))
        if rng.random() < cfg.p_speed:
            factor = float(cfg.speed_factors[rng.integers(len(cfg.speed_factors))])
            s = change_speed(s, factor)
            s = pad_or_clip(Waveform(s, x.sample_rate), n / x.sample_rate).samples
        if s is x.samples:
            return x
        return Waveform(np.clip(s, -1.0, 1.0), x.sample_rate)
    if isinstance(x, MelSpectrogram):
        cfg.max_mask_widths(x.shape)
        if rng.random() < cfg.p_specaugment:
            return MelSpectrogram(spec_augment(x.values, cfg, rng), x.config)
        return x
    raise TypeError(f"cannot augment {type(x).__name__}")


def mixup(a: np.ndarray, target_a: np.ndarray, b: np.ndarray, target_b: np.ndarray, lam: float):
    """Convex combination of two inputs and their label distributions."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight must lie in [0, 1], got {lam}")
    return lam * a + (1.0 - lam) * b, lam * target_a + (1.0 - lam) * target_b


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys...), e.g. (seed, epoch, sample index)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])
