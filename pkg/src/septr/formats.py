"""On-disk formats: WAV ingestion, SPTR spectrogram files and SPCK checkpoints.

SPTR layout (little endian)::

    b"SPTR" | u32 version | u32 rows | u32 cols | rows*cols float64

SPCK layout (little endian)::

    b"SPCK" | u32 version | 32-byte config digest | u32 record count
    per record: u32 name length | name (utf-8) | u32 ndim | ndim * u32 dims | float64 data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import MelSpectrogram, Waveform
from .errors import AudioFormatError, CheckpointError

SPTR_MAGIC = b"SPTR"
SPTR_VERSION = 1
SPCK_MAGIC = b"SPCK"
SPCK_VERSION = 1


# ---------------------------------------------------------------------------
# WAV


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV; multichannel audio is averaged to mono."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
    except OSError as exc:
        raise AudioFormatError(f"cannot open {path}: {exc}") from exc
    if head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise AudioFormatError(f"{path} is not a RIFF/WAVE file; convert it to 16-bit PCM or float32 WAV first")
    try:
        with np.errstate(all="ignore"):
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(
            f"{path}: unsupported WAV encoding ({exc}); only 16-bit PCM and 32-bit float are accepted"
        ) from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: sample type {data.dtype} not supported; use 16-bit PCM or 32-bit float")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, wave: Waveform, float32: bool = False) -> None:
    if float32:
        wavfile.write(path, wave.sample_rate, wave.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, wave.sample_rate, pcm)


# ---------------------------------------------------------------------------
# Spectrograms


def save_spectrogram(path: str | Path, spec: MelSpectrogram | np.ndarray) -> None:
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", SPTR_MAGIC, SPTR_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_spectrogram(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated SPTR header")
    magic, version, rows, cols = struct.unpack("<4sIII", raw[:16])
    if magic != SPTR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SPTR_VERSION:
        raise ValueError(f"{path}: unsupported SPTR version {version}")
    if len(raw) != 16 + 8 * rows * cols:
        raise ValueError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(rows, cols).astype(np.float64)


def spectrogram_text(values: np.ndarray, precision: int = 4) -> str:
    """Plain-text grid, one row per line, for debugging."""
    fmt = f"{{:.{precision}f}}"
    return "\n".join(" ".join(fmt.format(v) for v in row) for row in np.asarray(values)) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], digest: bytes) -> None:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    chunks = [struct.pack("<4sI", SPCK_MAGIC, SPCK_VERSION), digest, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    try:
        magic, version = struct.unpack_from("<4sI", raw, 0)
        if magic != SPCK_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != SPCK_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        digest = raw[8:40]
        if expected_digest is not None and digest != expected_digest:
            raise CheckpointError(f"{path}: checkpoint was written for a different model configuration")
        (count,) = struct.unpack_from("<I", raw, 40)
        pos = 44
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return digest, params
