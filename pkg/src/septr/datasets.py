"""Directory-per-class WAV trees::

    root/train/<class>/*.wav
    root/val/<class>/*.wav

Class indices follow the sorted class directory names of the train split.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dsp import Waveform, pad_or_clip
from .errors import DataError
from .formats import read_wav, write_wav
from .synthetic import Dataset

SPLITS = ("train", "val")


def class_names(root: str | Path) -> tuple[str, ...]:
    train_dir = Path(root) / "train"
    if not train_dir.is_dir():
        raise DataError(f"{root}: expected a train/ directory with one subdirectory per class")
    names = tuple(sorted(p.name for p in train_dir.iterdir() if p.is_dir()))
    if not names:
        raise DataError(f"{train_dir}: no class directories")
    return names


def load_split(root: str | Path, split: str, clip_seconds: float, names: tuple[str, ...] | None = None) -> Dataset:
    """Read one split, padding or clipping every clip to ``clip_seconds``."""
    root = Path(root)
    names = names or class_names(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"{split_dir} does not exist")
    waves, labels, rate = [], [], None
    for label, name in enumerate(names):
        for path in sorted((split_dir / name).glob("*.wav")) if (split_dir / name).is_dir() else []:
            w = read_wav(path)
            if rate is None:
                rate = w.sample_rate
            elif w.sample_rate != rate:
                raise DataError(f"{path}: sample rate {w.sample_rate} differs from {rate}; resample the tree first")
            waves.append(pad_or_clip(w, clip_seconds).samples)
            labels.append(label)
    unknown = sorted(p.name for p in split_dir.iterdir() if p.is_dir() and p.name not in names)
    if unknown:
        raise DataError(f"{split_dir}: class directories {unknown} are not present in train/")
    if not waves:
        raise DataError(f"{split_dir}: no .wav files found")
    desc = {"kind": "directory", "root": str(root), "split": split, "clip_seconds": clip_seconds}
    return Dataset(np.stack(waves), np.array(labels), names, int(rate), desc)


def write_tree(root: str | Path, splits: dict[str, Dataset]) -> None:
    """Write datasets as 16-bit PCM files in the class-directory layout."""
    root = Path(root)
    for split, data in splits.items():
        for i, (x, y) in enumerate(zip(data.waveforms, data.labels)):
            d = root / split / data.class_names[y]
            d.mkdir(parents=True, exist_ok=True)
            write_wav(d / f"{i:05d}.wav", Waveform(x, data.sample_rate))
