"""Frame-level feature extractors: log-mel, MFCC (+deltas), pitch, energy, magnitude, ZCR, chroma."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio import Waveform
from .spectral import (
    LOGMEL_FRAMES,
    MFCC_FRAMES,
    FrameConfig,
    bin_frequencies,
    fft_real,
    frames_view,
    ifft,
    periodogram,
)

LOG_EPS = 1e-10
FEATURE_KINDS = ("logmel", "mfcc", "pitch", "energy", "magnitude", "zcr", "chroma", "stacked")


class FeatureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """A ``(frames, dims)`` feature track with the config that produced it."""

    data: np.ndarray
    kind: str
    config: FrameConfig | None = None
    dim_labels: list[str] | None = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 1:
            d = d[:, None]
        if d.ndim != 2:
            raise FeatureError(f"feature data must be 2-D, got shape {d.shape}")
        if self.kind not in FEATURE_KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        if d.shape[0] < 1:
            raise FeatureError("feature matrix has no frames")
        if not np.all(np.isfinite(d)):
            raise FeatureError(f"{self.kind}: non-finite feature values")
        if self.dim_labels is not None and len(self.dim_labels) != d.shape[1]:
            raise FeatureError(f"{len(self.dim_labels)} labels for {d.shape[1]} dims")
        object.__setattr__(self, "data", d)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# framing


def frame_signal(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Windowed ``(n_frames, win)`` frames; frame t starts at sample ``t*hop``."""
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    if len(w) < win:
        raise FeatureError(f"signal of {len(w)} samples is shorter than one {win}-sample window")
    return frames_view(w.samples, win, hop) * cfg.window(w.sample_rate)


def _raw_frames(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    win = cfg.win_length(w.sample_rate)
    if len(w) < win:
        raise FeatureError(f"signal of {len(w)} samples is shorter than one {win}-sample window")
    return frames_view(w.samples, win, cfg.hop_length(w.sample_rate))


def _power_frames(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    return periodogram(frame_signal(w, cfg), cfg.n_fft(w.sample_rate))


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray
    fmin: float
    fmax: float
    center_bins: np.ndarray

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    def apply(self, power: np.ndarray) -> np.ndarray:
        return power @ self.weights.T


def make_mel_filterbank(
    n_mels: int, fft_size: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None
) -> MelFilterbank:
    """Triangular filters on bins snapped from mel-spaced edges; each apex weighs 1.0.

    Edges are ``n_mels + 2`` points equally spaced in mel between ``fmin`` and
    ``fmax``. Low filters narrower than one bin collapse onto a single bin
    rather than vanishing, so no row is ever empty.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise FeatureError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}")
    if n_mels < 2:
        raise FeatureError("n_mels must be at least 2")
    return _filterbank_cached(int(n_mels), int(fft_size), int(sample_rate), float(fmin), float(fmax))


@lru_cache(maxsize=16)
def _filterbank_cached(n_mels, fft_size, sample_rate, fmin, fmax) -> MelFilterbank:
    n_bins = fft_size // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.floor((fft_size + 1) * edges_hz / sample_rate).astype(int)
    bins = np.clip(bins, 0, n_bins - 1)
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, c, hi = bins[m], bins[m + 1], bins[m + 2]
        if c > lo:
            k = np.arange(lo, c)
            weights[m, lo:c] = (k - lo) / (c - lo)
        if hi > c:
            k = np.arange(c + 1, hi + 1)
            weights[m, c + 1 : hi + 1] = (hi - k) / (hi - c)
        weights[m, c] = 1.0
    weights.setflags(write=False)
    return MelFilterbank(weights, fmin, fmax, bins[1:-1].copy())


# ---------------------------------------------------------------------------
# spectral features


def log_mel_spectrogram(
    w: Waveform, cfg: FrameConfig = LOGMEL_FRAMES, n_mels: int = 128, fmin: float = 0.0, fmax: float | None = None
) -> FeatureMatrix:
    """``log(filterbank @ periodogram + 1e-10)`` per frame (natural log)."""
    fb = make_mel_filterbank(n_mels, cfg.n_fft(w.sample_rate), w.sample_rate, fmin, fmax)
    energies = fb.apply(_power_frames(w, cfg))
    return FeatureMatrix(
        np.log(energies + LOG_EPS), "logmel", cfg, [f"mel{i}" for i in range(n_mels)]
    )


@lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an ``(n, n)`` matrix; its transpose is the inverse (DCT-III)."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * t + 1) / (2 * n))
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ dct_matrix(x.shape[-1]).T


def idct2(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return c @ dct_matrix(c.shape[-1])


def mfcc(
    w: Waveform, cfg: FrameConfig = MFCC_FRAMES, n_mfcc: int = 25, n_mels: int = 40
) -> FeatureMatrix:
    if n_mfcc > n_mels:
        raise FeatureError(f"n_mfcc={n_mfcc} exceeds n_mels={n_mels}")
    logmel = log_mel_spectrogram(w, cfg, n_mels).data
    return FeatureMatrix(dct2(logmel)[:, :n_mfcc], "mfcc", cfg, [f"c{i}" for i in range(n_mfcc)])


def deltas(f: FeatureMatrix, N: int = 2) -> FeatureMatrix:
    """Regression deltas over ``±N`` frames, replicating edge frames.

    ``d_t = sum_n n (c_{t+n} - c_{t-n}) / (2 sum_n n^2)``.
    """
    if N < 1:
        raise FeatureError("delta window N must be >= 1")
    if f.n_frames < 2 * N + 1:
        raise FeatureError(f"deltas need at least {2 * N + 1} frames, got {f.n_frames}")
    c = np.pad(f.data, ((N, N), (0, 0)), mode="edge")
    T = f.n_frames
    num = np.zeros_like(f.data)
    for n in range(1, N + 1):
        num += n * (c[N + n : N + n + T] - c[N - n : N - n + T])
    denom = 2.0 * sum(n * n for n in range(1, N + 1))
    labels = [f"d_{lab}" for lab in f.dim_labels] if f.dim_labels else None
    return FeatureMatrix(num / denom, f.kind, f.config, labels)


# ---------------------------------------------------------------------------
# prosodic / time-domain features

VOICING_THRESHOLD = 0.3


def _pitch_of_frame(x: np.ndarray, lag_lo: int, lag_hi: int, sample_rate: int) -> float:
    L = len(x)
    if L <= lag_hi or not np.any(x):
        return 0.0
    x = x - x.mean()
    n_fft = 1 << (2 * L - 1).bit_length()
    spec = fft_real(x, n_fft)
    acf = ifft(spec.real**2 + spec.imag**2).real[:L]
    # energies of x[0:L-tau] and x[tau:L]
    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    lags = np.arange(lag_lo, lag_hi + 1)
    e_head = sq[L - lags]
    e_tail = sq[L] - sq[lags]
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 0, acf[lags] / denom, 0.0)
    best = int(np.argmax(r))
    peak = r[best]
    if peak < VOICING_THRESHOLD:
        return 0.0
    # prefer the shortest lag that is almost as strong: avoids picking a multiple of the period
    for i in range(1, len(r) - 1):
        if r[i] >= r[i - 1] and r[i] >= r[i + 1] and r[i] >= peak - 0.05:
            best = i
            break
    offset = 0.0
    if 0 < best < len(r) - 1:
        a, b, c = r[best - 1], r[best], r[best + 1]
        curv = a - 2 * b + c
        if curv < 0:
            offset = 0.5 * (a - c) / curv
    return sample_rate / (lags[best] + offset)


def pitch_track(
    w: Waveform, cfg: FrameConfig = MFCC_FRAMES, fmin: float = 50.0, fmax: float = 400.0
) -> FeatureMatrix:
    """Per-frame F0 from the normalized autocorrelation peak; 0 marks unvoiced frames.

    Frames shorter than one ``fmin`` period are always unvoiced.
    """
    if not 0 < fmin < fmax:
        raise FeatureError("need 0 < fmin < fmax")
    frames = _raw_frames(w, cfg)
    sr = w.sample_rate
    lag_lo = max(1, int(np.floor(sr / fmax)))
    lag_hi = int(np.ceil(sr / fmin))
    f0 = np.array([_pitch_of_frame(fr, lag_lo, lag_hi, sr) for fr in frames])
    return FeatureMatrix(f0, "pitch", cfg, ["pitch"])


def rms_energy(w: Waveform, cfg: FrameConfig = MFCC_FRAMES) -> FeatureMatrix:
    frames = _raw_frames(w, cfg)
    return FeatureMatrix(np.sqrt(np.mean(frames * frames, axis=1)), "energy", cfg, ["rms"])


def frame_magnitude(w: Waveform, cfg: FrameConfig = MFCC_FRAMES) -> FeatureMatrix:
    """Mean absolute amplitude per (un-windowed) frame."""
    frames = _raw_frames(w, cfg)
    return FeatureMatrix(np.mean(np.abs(frames), axis=1), "magnitude", cfg, ["magnitude"])


def zcr(w: Waveform, cfg: FrameConfig = MFCC_FRAMES) -> FeatureMatrix:
    """Fraction of adjacent sample pairs with a strict sign change."""
    frames = _raw_frames(w, cfg)
    s = np.sign(frames)
    crossings = np.sum(s[:, 1:] * s[:, :-1] < 0, axis=1)
    return FeatureMatrix(crossings / (frames.shape[1] - 1), "zcr", cfg, ["zcr"])


PITCH_CLASSES = ("A", "A#", "B", "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#")


def chroma_mass(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Un-normalized ``(frames, 12)`` pitch-class power; class 0 is A."""
    power = _power_frames(w, cfg)
    freqs = bin_frequencies(cfg.n_fft(w.sample_rate), w.sample_rate)
    valid = freqs >= 27.5
    pc = np.mod(np.round(12.0 * np.log2(freqs[valid] / 440.0)).astype(int), 12)
    proj = np.zeros((len(freqs), 12))
    proj[np.flatnonzero(valid), pc] = 1.0
    return power @ proj


def chroma(w: Waveform, cfg: FrameConfig = LOGMEL_FRAMES) -> FeatureMatrix:
    mass = chroma_mass(w, cfg)
    peak = mass.max(axis=1, keepdims=True)
    out = np.divide(mass, peak, out=np.zeros_like(mass), where=peak > 0)
    return FeatureMatrix(out, "chroma", cfg, list(PITCH_CLASSES))


def stack_features(parts: list[FeatureMatrix]) -> FeatureMatrix:
    """Concatenate along the feature axis; all parts must share frame count and config."""
    if not parts:
        raise FeatureError("nothing to stack")
    n = parts[0].n_frames
    cfg = parts[0].config
    for p in parts[1:]:
        if p.n_frames != n:
            raise FeatureError(f"frame count mismatch: {p.kind} has {p.n_frames}, expected {n}")
        if p.config != cfg:
            raise FeatureError(f"frame config mismatch for {p.kind}")
    labels = []
    for p in parts:
        labels.extend(p.dim_labels or [f"{p.kind}{i}" for i in range(p.n_dims)])
    return FeatureMatrix(np.hstack([p.data for p in parts]), "stacked", cfg, labels)


# ---------------------------------------------------------------------------
# named recipes used by the experiment harness


@dataclass(frozen=True)
class FeatureSpec:
    """Recipe for one feature representation.

    ``kind`` is one of ``logmel``, ``mfcc``, ``prosody`` (pitch, magnitude,
    RMS energy), ``chroma`` or ``raw`` (the fixed-length waveform, handled by
    the harness). ``delta_order`` stacks deltas (1) or deltas and
    delta-deltas (2). ``n_mels`` defaults to 128 for log-mel and 40 for MFCC.
    """

    kind: str = "logmel"
    window_s: float | None = None
    hop_s: float | None = None
    n_mels: int | None = None
    n_mfcc: int = 25
    delta_order: int = 0
    fmax: float | None = None

    def frame_config(self) -> FrameConfig:
        base = MFCC_FRAMES if self.kind in ("mfcc", "prosody") else LOGMEL_FRAMES
        return FrameConfig(self.window_s or base.window_s, self.hop_s or base.hop_s)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "window_s": self.window_s,
            "hop_s": self.hop_s,
            "n_mels": self.n_mels,
            "n_mfcc": self.n_mfcc,
            "delta_order": self.delta_order,
            "fmax": self.fmax,
        }


def extract(w: Waveform, spec: FeatureSpec) -> FeatureMatrix:
    """Apply a :class:`FeatureSpec` to a waveform."""
    cfg = spec.frame_config()
    if spec.kind == "logmel":
        base = log_mel_spectrogram(w, cfg, spec.n_mels or 128, fmax=spec.fmax)
    elif spec.kind == "mfcc":
        base = mfcc(w, cfg, spec.n_mfcc, spec.n_mels or max(40, spec.n_mfcc))
    elif spec.kind == "prosody":
        base = stack_features([pitch_track(w, cfg), frame_magnitude(w, cfg), rms_energy(w, cfg)])
    elif spec.kind == "chroma":
        base = chroma(w, cfg)
    else:
        raise FeatureError(f"unknown feature recipe {spec.kind!r}")
    parts = [base]
    if spec.delta_order >= 1:
        parts.append(deltas(base))
    if spec.delta_order >= 2:
        parts.append(deltas(parts[1]))
    return stack_features(parts) if len(parts) > 1 else base
