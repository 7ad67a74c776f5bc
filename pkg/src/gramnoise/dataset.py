"""Corpus ingestion: WAV I/O, revolution-length chunks, median-RMS normalisation."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

DEFAULT_RPM = 78.0
B_CHI = 1.4826


class DataError(Exception):
    """Bad input data (files, corpora, degenerate frames)."""


class MalformedWavError(DataError):
    pass


class UnsupportedWavError(DataError):
    pass


class DegenerateFrameError(DataError):
    pass


@dataclass
class AudioAsset:
    samples: np.ndarray
    fs: int
    source: str = "<memory>"

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"{self.source}: audio asset must be mono")
        if self.fs <= 0:
            raise DataError(f"{self.source}: sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"{self.source}: non-finite samples")

    def __len__(self):
        return len(self.samples)


_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


def read_wav(path) -> AudioAsset:
    """Read 16-bit PCM or 32-bit float WAV; multichannel input is averaged.

    16-bit samples are scaled by 1/32768.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _FORMAT_EXTENSIBLE and size >= 26:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    code, channels, fs, _, block_align, bits = fmt
    if channels < 1 or fs < 1:
        raise MalformedWavError(f"{path}: invalid channel count or sample rate")
    if code == _FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float32) / 32768.0
    elif code == _FORMAT_FLOAT and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedWavError(f"{path}: unsupported codec (format {code}, {bits} bits)")
    if len(x) % channels:
        raise MalformedWavError(f"{path}: data size is not a whole number of frames")
    x = x.reshape(-1, channels)
    x = x[:, 0].copy() if channels == 1 else x.mean(axis=1, dtype=np.float64).astype(np.float32)
    return AudioAsset(x, int(fs), str(path))


def write_wav(path, asset: AudioAsset, pcm16: bool = False):
    """Write a mono WAV; float32 by default, which round-trips bit-exactly."""
    x = np.asarray(asset.samples)
    if pcm16:
        x = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        x = x.astype("<f4")
    wavfile.write(str(path), int(asset.fs), x)


def frame_length(fs: float, rpm: float = DEFAULT_RPM) -> int:
    """Samples in one disk revolution."""
    if fs <= 0 or rpm <= 0:
        raise ValueError("fs and rpm must be positive")
    return int(round(fs * 60.0 / rpm))


@dataclass
class NormalizationSettings:
    gain_db: float = -10.0
    b_chi: float = B_CHI
    mode: str = "consistent"

    def __post_init__(self):
        if self.b_chi <= 0:
            raise ValueError("b_chi must be positive")
        if self.mode not in ("consistent", "literal"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")

    @property
    def gain(self) -> float:
        return 10.0 ** (self.gain_db / 20.0)


def median_rms(x, b_chi: float = B_CHI) -> float:
    """Outlier-robust RMS estimate b_chi * sqrt(median(x^2))."""
    x = np.asarray(x, dtype=np.float64)
    return b_chi * math.sqrt(float(np.median(x * x)))


def normalization_scale(x, settings: NormalizationSettings) -> float:
    x = np.asarray(x, dtype=np.float64)
    med = float(np.median(x * x))
    if settings.mode == "literal":
        return settings.gain / math.sqrt(settings.b_chi ** 2 + med)
    if med <= 0.0:
        raise DegenerateFrameError("cannot normalise a frame whose median square is zero")
    return settings.gain / (settings.b_chi * math.sqrt(med))


def normalize_median_rms(x, settings: NormalizationSettings | None = None) -> np.ndarray:
    """Scale ``x`` so its median-based RMS estimate equals the target gain.

    In ``literal`` mode the denominator is sqrt(b_chi^2 + median(x^2)).
    """
    settings = settings or NormalizationSettings()
    x = np.asarray(x)
    return (normalization_scale(x, settings) * x.astype(np.float64)).astype(x.dtype)


def random_chunk(asset: AudioAsset, length: int, rng: np.random.Generator) -> np.ndarray:
    n = len(asset)
    if n < length:
        raise DataError(f"{asset.source}: {n} samples is shorter than the chunk length {length}")
    start = int(rng.integers(0, n - length + 1))
    return asset.samples[start:start + length]


def batch_iterator(
    corpus: Sequence[AudioAsset],
    length: int,
    batch_size: int,
    settings: NormalizationSettings,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """Endless stream of (batch_size, length) float64 normalised chunks."""
    if not corpus:
        raise DataError("empty corpus")
    for asset in corpus:
        if len(asset) < length:
            raise DataError(f"{asset.source}: shorter than the frame length {length}")
    while True:
        batch = []
        while len(batch) < batch_size:
            asset = corpus[int(rng.integers(len(corpus)))]
            chunk = random_chunk(asset, length, rng)
            try:
                batch.append(normalize_median_rms(chunk.astype(np.float64), settings))
            except DegenerateFrameError:
                log.warning("skipping silent chunk from %s", asset.source)
        yield np.stack(batch)


def read_manifest(path, fs: int | None = None) -> list[AudioAsset]:
    """Load every WAV listed (one path per line, '#' comments) in a corpus manifest.

    Relative paths resolve against the manifest's directory. Assets whose rate
    differs from ``fs`` are rejected; there is no resampling.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus manifest {path} not found")
    assets = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        wav = Path(line)
        if not wav.is_absolute():
            wav = path.parent / wav
        if not wav.is_file():
            raise DataError(f"{path}:{lineno}: listed file {wav} does not exist")
        asset = read_wav(wav)
        if fs is not None and asset.fs != fs:
            raise DataError(f"{wav}: sample rate {asset.fs} Hz differs from the model rate {fs} Hz")
        assets.append(asset)
    if not assets:
        raise DataError(f"{path}: manifest lists no files")
    return assets


def write_manifest(path, wav_paths):
    path = Path(path)
    lines = []
    for p in wav_paths:
        p = Path(p)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(str(p))
    path.write_text("\n".join(lines) + "\n")
