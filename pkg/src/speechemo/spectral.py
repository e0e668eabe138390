"""Radix-2 FFT, framing and periodograms shared by the cleaning and feature code."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class FrameConfigError(ValueError):
    pass


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


@dataclass(frozen=True)
class FrameConfig:
    """Short-time analysis framing.

    ``fft_size`` of ``None`` means the next power of two at or above the
    window length once the sample rate is known.
    """

    window_s: float
    hop_s: float
    window_fn: str = "hann"
    fft_size: int | None = None

    def __post_init__(self):
        if not (self.window_s > 0 and 0 < self.hop_s <= self.window_s):
            raise FrameConfigError(f"need 0 < hop_s <= window_s, got {self.hop_s}, {self.window_s}")
        if self.window_fn not in ("hann", "rectangular"):
            raise FrameConfigError(f"unknown window {self.window_fn!r}")
        if self.fft_size is not None and not is_power_of_two(self.fft_size):
            raise FrameConfigError(f"fft_size {self.fft_size} is not a power of two")

    def win_length(self, sample_rate: int) -> int:
        return int(round(self.window_s * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return max(1, int(round(self.hop_s * sample_rate)))

    def n_fft(self, sample_rate: int) -> int:
        win = self.win_length(sample_rate)
        if self.fft_size is None:
            return next_power_of_two(win)
        if self.fft_size < win:
            raise FrameConfigError(f"fft_size {self.fft_size} < window length {win}")
        return self.fft_size

    def window(self, sample_rate: int) -> np.ndarray:
        return make_window(self.window_fn, self.win_length(sample_rate))

    def to_dict(self) -> dict:
        return {
            "window_s": self.window_s,
            "hop_s": self.hop_s,
            "window_fn": self.window_fn,
            "fft_size": self.fft_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameConfig":
        return cls(float(d["window_s"]), float(d["hop_s"]), d.get("window_fn", "hann"), d.get("fft_size"))


MFCC_FRAMES = FrameConfig(0.010, 0.005)
LOGMEL_FRAMES = FrameConfig(0.014, 0.0035)
CLEANING_FRAMES = FrameConfig(0.032, 0.016)


def make_window(kind: str, length: int) -> np.ndarray:
    if kind == "rectangular":
        return np.ones(length)
    if kind == "hann":
        # periodic Hann: sums to a constant under 50% overlap
        n = np.arange(length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    raise FrameConfigError(f"unknown window {kind!r}")


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def frames_view(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Read-only ``(n_frames, win)`` view; frame t covers ``[t*hop, t*hop+win)``."""
    if len(x) < win:
        raise FrameConfigError(f"signal of {len(x)} samples is shorter than one window ({win})")
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop]


# ---------------------------------------------------------------------------
# FFT


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    half = size // 2
    return np.exp(-2j * np.pi * np.arange(half) / size)


def fft(x: np.ndarray, n: int | None = None) -> np.ndarray:
    """Unnormalized forward DFT along the last axis (iterative radix-2, decimation in time).

    ``x`` is zero-padded (or must already fit) to length ``n``; ``n`` must be a
    power of two.
    """
    x = np.asarray(x)
    if n is None:
        n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"FFT size {n} is not a power of two")
    if x.shape[-1] > n:
        raise ValueError(f"input length {x.shape[-1]} exceeds FFT size {n}")
    lead = x.shape[:-1]
    buf = np.zeros(lead + (n,), dtype=np.complex128)
    buf[..., : x.shape[-1]] = x
    buf = buf[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = buf.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        buf = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return buf


def fft_real(x: np.ndarray, n: int) -> np.ndarray:
    """Full length-``n`` complex spectrum of a real vector (or batch of rows)."""
    return fft(np.asarray(x, dtype=np.float64), n)


def ifft(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    n = X.shape[-1]
    return np.conj(fft(np.conj(X), n)) / n


def rfft_half(x: np.ndarray, n: int) -> np.ndarray:
    """Non-negative frequency bins ``0..n/2`` of :func:`fft_real`."""
    return fft_real(x, n)[..., : n // 2 + 1]


def irfft_half(X_half: np.ndarray, n: int) -> np.ndarray:
    """Real inverse of a Hermitian spectrum given by its bins ``0..n/2``."""
    X_half = np.asarray(X_half, dtype=np.complex128)
    full = np.empty(X_half.shape[:-1] + (n,), dtype=np.complex128)
    full[..., : n // 2 + 1] = X_half
    full[..., n // 2 + 1 :] = np.conj(X_half[..., 1 : n // 2][..., ::-1])
    return ifft(full).real


def periodogram(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """``|X[k]|^2 / N`` for bins ``0..fft_size/2``; ``N`` is the unpadded frame length.

    Accepts a single frame or a ``(n_frames, N)`` batch.
    """
    frame = np.asarray(frame, dtype=np.float64)
    N = frame.shape[-1]
    X = rfft_half(frame, fft_size)
    return (X.real**2 + X.imag**2) / N


def power_spectrogram(x: np.ndarray, sample_rate: int, cfg: FrameConfig) -> np.ndarray:
    """Windowed periodograms of every frame, ``(n_frames, n_fft/2+1)``."""
    win = cfg.win_length(sample_rate)
    frames = frames_view(np.asarray(x, dtype=np.float64), win, cfg.hop_length(sample_rate))
    return periodogram(frames * cfg.window(sample_rate), cfg.n_fft(sample_rate))


def bin_frequencies(fft_size: int, sample_rate: int) -> np.ndarray:
    return np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)

