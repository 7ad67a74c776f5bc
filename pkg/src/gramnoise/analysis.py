"""Envelope and spectrogram analyses of generated noise.

Deviation profiles are taken about zero: the reference-mode profile is the
root mean square over items of (item - reference), and the all-pairs profile
is the root mean square over unordered pairs of (item_i - item_j). Pair
differences have no natural sign, so centring them on their sample mean would
make the result depend on pair ordering.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

# Zwicker critical-band edges in Hz
BARK_EDGES = np.array([
    0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720, 2000,
    2320, 2700, 3150, 3700, 4400, 5300, 6400, 7700, 9500, 12000, 15500,
], dtype=np.float64)


@dataclass
class EnvelopeSeries:
    values: np.ndarray
    hop: float
    window: float


@dataclass
class BarkEnvelope:
    band_magnitudes: np.ndarray
    band_edges: np.ndarray


def temporal_envelope(x, fs, window: float = 0.025, hop: float | None = None) -> EnvelopeSeries:
    """Sliding-window RMS; the last window is truncated at the frame end."""
    x = np.asarray(x, dtype=np.float64)
    w = int(round(window * fs))
    hop = window / 2 if hop is None else hop
    h = max(1, int(round(hop * fs)))
    if w < 1:
        raise ValueError("window shorter than one sample")
    if w > len(x):
        raise ValueError(f"window of {w} samples exceeds the frame length {len(x)}")
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    starts = np.arange(0, len(x), h)
    ends = np.minimum(starts + w, len(x))
    values = np.sqrt(np.maximum((csum[ends] - csum[starts]) / (ends - starts), 0.0))
    return EnvelopeSeries(values, h / fs, w / fs)


def bark_envelope(x, fs, fft_size: int = 512, floor_db: float = -120.0) -> BarkEnvelope:
    """Mean power per bin within each Zwicker band, in dB.

    The spectrum is the Hann-windowed periodogram averaged over half-overlapping
    sub-frames. Averaging per bin (rather than summing) compensates for band width.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < fft_size:
        raise ValueError("frame shorter than the FFT size")
    edges = BARK_EDGES[BARK_EDGES <= fs / 2]
    if edges[-1] < fs / 2 and len(edges) < len(BARK_EDGES):
        edges = np.append(edges, fs / 2)
    if len(edges) < 3:
        raise ValueError(f"fs={fs} Hz yields fewer than two Bark bands")
    power = _stft_power(x, fft_size, fft_size // 2).mean(axis=0)
    freqs = np.fft.rfftfreq(fft_size, 1.0 / fs)
    mags = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (freqs >= lo) & (freqs < hi) if hi < fs / 2 else (freqs >= lo) & (freqs <= hi)
        p = power[sel].mean() if np.any(sel) else 0.0
        mags.append(10 * np.log10(p) if p > 0 else floor_db)
    return BarkEnvelope(np.maximum(np.array(mags), floor_db), edges)


def _values(item):
    return np.asarray(getattr(item, "values", getattr(item, "band_magnitudes", item)), dtype=np.float64)


def pairwise_deviation_std(items, reference=None) -> np.ndarray:
    """Per-position deviation profile of a set of envelopes.

    With ``reference`` given: sqrt(mean_i (item_i - reference)^2).
    Otherwise all unordered pairs: sqrt(mean_{i<j} (item_i - item_j)^2).
    For i.i.d. items of variance v the all-pairs profile tends to sqrt(2 v).
    """
    arrs = [_values(it) for it in items]
    if reference is None and len(arrs) < 2:
        raise ValueError("all-pairs mode needs at least two items")
    if reference is not None and len(arrs) < 1:
        raise ValueError("reference mode needs at least one item")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("items have different shapes")
    stack = np.stack(arrs)
    if reference is not None:
        ref = _values(reference)
        if ref.shape != shape:
            raise ValueError("reference shape differs from the items")
        return np.sqrt(np.mean((stack - ref) ** 2, axis=0))
    n = len(arrs)
    # sum over i<j of (a_i - a_j)^2 = n * sum a^2 - (sum a)^2
    total = n * np.sum(stack**2, axis=0) - np.sum(stack, axis=0) ** 2
    pairs = n * (n - 1) / 2
    return np.sqrt(np.maximum(total, 0.0) / pairs)


def pairwise_deviation_bruteforce(items, reference=None) -> np.ndarray:
    arrs = [_values(it) for it in items]
    if reference is not None:
        diffs = [a - _values(reference) for a in arrs]
    else:
        diffs = [a - b for a, b in itertools.combinations(arrs, 2)]
    return np.sqrt(np.mean(np.square(diffs), axis=0))


def _stft_power(x, fft_size, hop):
    win = np.hanning(fft_size + 1)[:-1]
    starts = range(0, len(x) - fft_size + 1, hop)
    frames = np.stack([x[s:s + fft_size] * win for s in starts])
    return np.abs(np.fft.rfft(frames, axis=1)) ** 2


def stft_power(x, fft_size: int = 512, hop: int = 128) -> np.ndarray:
    """|STFT|^2, shape (frames, fft_size // 2 + 1), periodic Hann window."""
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    if not 1 <= hop <= fft_size:
        raise ValueError("hop must lie in [1, fft_size]")
    x = np.asarray(x, dtype=np.float64)
    if len(x) < fft_size:
        raise ValueError("signal shorter than the FFT size")
    return _stft_power(x, fft_size, hop)


def log_spectrogram(x, fs, fft_size: int = 512, hop: int = 128, floor_db: float = -120.0) -> np.ndarray:
    """STFT power in dB, shape (frequency bins, frames), floored at ``floor_db``."""
    p = stft_power(x, fft_size, hop)
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(p)
    return np.maximum(db, floor_db).T


def save_grid(path, grid):
    np.savetxt(path, np.atleast_2d(grid), delimiter=",", fmt="%.6g")


def save_image(path, db, dynamic_range: float = 80.0):
    """Grayscale PNG, low frequencies at the bottom."""
    from PIL import Image

    top = float(np.max(db))
    norm = np.clip((db - (top - dynamic_range)) / dynamic_range, 0.0, 1.0)
    Image.fromarray(np.flipud((norm * 255).astype(np.uint8)), mode="L").save(path)


def envelope_db(env: EnvelopeSeries, floor_db: float = -120.0) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(20 * np.log10(env.values), floor_db)


def mean_deviation(profile) -> float:
    return float(np.mean(profile))


def sine_rms(amplitude: float) -> float:
    return amplitude / math.sqrt(2)
