"""Time-domain preprocessing: zero-frequency filtering and framing.

All math is 64-bit: the zero-frequency resonator is marginally unstable
and 32-bit arithmetic accumulates visible drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME_MS = 250.0
DEFAULT_HOP_MS = 100.0
DEFAULT_TREND_WINDOW_MS = 10.0


@dataclass(frozen=True)
class Waveform:
    """A single-channel signal with its sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if not np.isfinite(samples).all():
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FrameSet:
    """Fixed-length analysis windows cut from one utterance."""

    frames: np.ndarray
    frame_len_samples: int
    hop_samples: int
    source_id: str = ""

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.frame_len_samples:
            raise ValueError("frames must be n_frames x frame_len_samples")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _rect_sum(csum: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Truncated-window sums and tap counts from a prefix-sum array."""
    n = csum.shape[0] - 1
    lo_c = np.maximum(lo, 0)
    hi_c = np.minimum(hi, n - 1)
    return csum[hi_c + 1] - csum[lo_c], hi_c + 1 - lo_c


def _sliding_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over a window centered at each sample, truncated at the edges.

    An even window has no center sample, so it is realized as the standard
    centered moving average: window + 1 taps with half-weight endpoints,
    equivalently the average of the two offset rectangular windows.  This
    keeps the window symmetric, which is what lets double trend removal
    annihilate the resonator's polynomial trend exactly.
    """
    n = x.shape[0]
    idx = np.arange(n)
    csum = np.concatenate(([0.0], np.cumsum(x)))
    if window % 2 == 1:
        half = (window - 1) // 2
        s, c = _rect_sum(csum, idx - half, idx + half)
        return s / c
    half = window // 2
    s_lo, c_lo = _rect_sum(csum, idx - half, idx + half - 1)
    s_hi, c_hi = _rect_sum(csum, idx - half + 1, idx + half)
    return (s_lo + s_hi) / (c_lo + c_hi)


def zff_filter(
    w: Waveform, trend_window_ms: float = DEFAULT_TREND_WINDOW_MS
) -> Waveform:
    """Zero-frequency filtering with double trend removal.

    First difference, then two cascaded ideal zero-frequency resonators
    y[n] = 2 y[n-1] - y[n-2] + x[n] with zero initial conditions, then the
    local mean over the trend window is subtracted twice.  Output length
    equals input length.
    """
    s = w.samples
    if s.shape[0] == 0:
        raise ValueError("cannot filter an empty waveform")
    window = int(round(trend_window_ms * w.sample_rate_hz / 1000.0))
    if window < 3:
        raise ValueError("trend window must span at least 3 samples")
    if window > s.shape[0]:
        raise ValueError("trend window longer than the signal")

    # The first sample has no predecessor; its difference is defined as 0.
    x = np.zeros_like(s)
    x[1:] = s[1:] - s[:-1]
    # Each resonator y[n] = 2 y[n-1] - y[n-2] + x[n] is a double pole at
    # z = 1, identical to two cumulative sums.
    for _ in range(2):
        x = np.cumsum(np.cumsum(x))
    for _ in range(2):
        x = x - _sliding_mean(x, window)
    return Waveform(x, w.sample_rate_hz)


def frame(
    w: Waveform,
    frame_ms: float = DEFAULT_FRAME_MS,
    hop_ms: float = DEFAULT_HOP_MS,
    source_id: str = "",
) -> FrameSet:
    """Cut contiguous fixed-length windows at a fixed hop, no normalization.

    Signals shorter than one frame are zero-padded at the tail to exactly
    one frame.
    """
    if frame_ms <= 0 or hop_ms <= 0:
        raise ValueError("frame and hop must be positive")
    flen = int(round(frame_ms * w.sample_rate_hz / 1000.0))
    hop = int(round(hop_ms * w.sample_rate_hz / 1000.0))
    if flen <= 0 or hop <= 0:
        raise ValueError("frame and hop must span at least one sample")
    s = w.samples
    if s.shape[0] < flen:
        padded = np.zeros(flen, dtype=np.float64)
        padded[: s.shape[0]] = s
        frames = padded[None, :]
    else:
        n = (s.shape[0] - flen) // hop + 1
        frames = np.stack([s[i * hop : i * hop + flen] for i in range(n)])
    return FrameSet(frames, flen, hop, source_id)


def load_wav(path: str | Path) -> Waveform:
    """Read a PCM WAV file: 16-bit integer or 32-bit float, channel 0."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format: {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write a single-channel 32-bit float WAV file."""
    wavfile.write(str(path), w.sample_rate_hz, w.samples.astype(np.float32))
