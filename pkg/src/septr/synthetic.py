"""Bundled 4-class synthetic audio task: steady tones, linear chirps, noise
bursts and amplitude-modulated tones."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import SpectroConfig
from .errors import DataError

CLASS_NAMES = ("tone", "chirp", "noise_burst", "am_tone")


@dataclass
class Dataset:
    waveforms: np.ndarray  # (N, samples)
    labels: np.ndarray  # (N,) int
    class_names: tuple[str, ...]
    sample_rate: int
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        self.waveforms = np.asarray(self.waveforms, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.waveforms.ndim != 2 or self.waveforms.shape[0] != self.labels.shape[0]:
            raise DataError("waveforms must be (N, samples) with one label per row")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def synthetic_spectro_config(mel_bins: int = 32, frames: int = 32, sample_rate: int = 16000, seconds: float = 1.0) -> SpectroConfig:
    """STFT settings yielding a ``mel_bins x frames`` grid for the synthetic clips."""
    n = int(round(sample_rate * seconds))
    window = 512
    hop = (n - window) // (frames - 1) if frames > 1 else window
    hop = min(hop, window)
    cfg = SpectroConfig(fft_length=1024, hop=hop, window_length=window, mel_bins=mel_bins, sample_rate=sample_rate)
    if cfg.num_frames(n) != frames:
        raise DataError(f"cannot reach {frames} frames from {n} samples with a {window}-sample window")
    return cfg


def _tone(t, rng):
    f = rng.uniform(300, 3500)
    return rng.uniform(0.3, 0.8) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def _chirp(t, rng):
    """Exponential sweeps over 1.6 to 2.3 octaves, repeated one to three times per clip."""
    lo = rng.uniform(250, 800)
    hi = lo * rng.uniform(3.0, 5.0)
    sweeps = int(rng.integers(1, 4))
    dur = t[-1] + t[1]
    u = (t * sweeps / dur + rng.uniform(0, 1)) % 1.0
    if rng.random() < 0.5:
        u = 1.0 - u  # falling
    f = lo * (hi / lo) ** u
    phase = 2 * np.pi * np.cumsum(f) * t[1]
    return rng.uniform(0.3, 0.8) * np.sin(phase)


def _noise_burst(t, rng):
    out = np.zeros_like(t)
    n = t.shape[0]
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.uniform(0.1, 0.3) * n)
        start = int(rng.integers(0, n - width))
        out[start : start + width] += rng.uniform(0.2, 0.5) * rng.standard_normal(width)
    return out


def _am_tone(t, rng):
    # squared raised-sine gate: the tone fades fully out 3 to 6 times per second
    f = rng.uniform(300, 3500)
    rate = rng.uniform(3, 6)
    gate = 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    return rng.uniform(0.3, 0.8) * gate**2 * np.sin(2 * np.pi * f * t)


_GENERATORS = (_tone, _chirp, _noise_burst, _am_tone)


def make_clip(label: int, rng: np.random.Generator, sample_rate: int = 16000, seconds: float = 1.0) -> np.ndarray:
    t = np.arange(int(round(sample_rate * seconds))) / sample_rate
    x = _GENERATORS[label](t, rng) + rng.uniform(0.001, 0.005) * rng.standard_normal(t.shape[0])
    return np.clip(x, -1.0, 1.0)


def make_split(n: int, seed: int, split_key: int, sample_rate: int = 16000, seconds: float = 1.0) -> Dataset:
    labels = np.arange(n) % len(CLASS_NAMES)
    order = np.random.default_rng([seed, split_key, 0]).permutation(n)
    labels = labels[order]
    waves = np.stack(
        [make_clip(int(y), np.random.default_rng([seed, split_key, 1, i]), sample_rate, seconds) for i, y in enumerate(labels)]
    )
    return Dataset(waves, labels, CLASS_NAMES, sample_rate)


def generate(n_train: int = 800, n_val: int = 200, seed: int = 0, sample_rate: int = 16000, seconds: float = 1.0) -> tuple[Dataset, Dataset]:
    """Balanced train/validation splits drawn from disjoint random streams."""
    desc = {"kind": "synthetic", "n_train": n_train, "n_val": n_val, "seed": seed, "sample_rate": sample_rate, "seconds": seconds}
    train = make_split(n_train, seed, 1, sample_rate, seconds)
    val = make_split(n_val, seed, 2, sample_rate, seconds)
    train.description = {**desc, "split": "train"}
    val.description = {**desc, "split": "val"}
    return train, val
