"""Waveform I/O and the cleaning chain (trim, noise estimate, subtraction/Wiener, fix length)."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .spectral import (
    CLEANING_FRAMES,
    FrameConfig,
    frame_count,
    frames_view,
    irfft_half,
    periodogram,
    rfft_half,
)


class AudioError(ValueError):
    """Decode and cleaning failures."""


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioError(f"waveform must be mono, got shape {s.shape}")
        if not int(self.sample_rate) > 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def replace(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def read_wav(path: str | os.PathLike) -> Waveform:
    """Decode RIFF/WAVE (PCM16, PCM24, float32; mono or stereo) to a mono waveform."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_wav(data, name=str(path))


def decode_wav(data: bytes, name: str = "<bytes>") -> Waveform:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioError(f"{name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body_start = pos + 8
        if body_start + size > len(data):
            raise AudioError(f"{name}: truncated {cid!r} chunk")
        body = data[body_start : body_start + size]
        if cid == b"fmt ":
            if size < 16:
                raise AudioError(f"{name}: fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _EXTENSIBLE and size >= 40:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            payload = body
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise AudioError(f"{name}: missing fmt chunk")
    if payload is None:
        raise AudioError(f"{name}: missing data chunk")
    tag, channels, rate, block_align, bits = fmt
    if channels not in (1, 2):
        raise AudioError(f"{name}: unsupported channel count {channels}")
    if (tag, bits) == (_PCM, 16):
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif (tag, bits) == (_PCM, 24):
        raw = np.frombuffer(payload[: len(payload) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif (tag, bits) == (_IEEE_FLOAT, 32):
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise AudioError(f"{name}: unsupported codec (format tag {tag}, {bits} bits)")
    n_frames = len(x) // channels
    if n_frames == 0:
        raise AudioError(f"{name}: zero-length data")
    x = x[: n_frames * channels].reshape(n_frames, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise AudioError(f"{name}: non-finite samples")
    return Waveform(np.clip(x, -1.0, 1.0), rate)


def encode_wav_pcm16(w: Waveform) -> bytes:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, _PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    """Write a mono little-endian PCM16 file."""
    with open(path, "wb") as fh:
        fh.write(encode_wav_pcm16(w))


# ---------------------------------------------------------------------------
# resampling / length


def resample_linear(w: Waveform, target_sr: int) -> Waveform:
    """Linear-interpolation resampling.

    Output sample ``k`` reads source position ``k * source_sr / target_sr``,
    clamped to the last sample.
    """
    if target_sr <= 0:
        raise AudioError(f"target_sr must be positive, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) * target_sr / w.sample_rate))
    if len(w) == 0 or n_out == 0:
        return Waveform(np.zeros(0), target_sr)
    pos = np.arange(n_out) * (w.sample_rate / target_sr)
    pos = np.minimum(pos, len(w) - 1)
    return Waveform(np.interp(pos, np.arange(len(w)), w.samples), target_sr)


def fix_length(w: Waveform, seconds: float = 3.0) -> Waveform:
    """Truncate or zero-pad at the end to exactly ``round(seconds * sample_rate)`` samples."""
    if seconds <= 0:
        raise AudioError(f"seconds must be positive, got {seconds}")
    n = int(round(seconds * w.sample_rate))
    out = np.zeros(n)
    m = min(n, len(w))
    out[:m] = w.samples[:m]
    return w.replace(out)


# ---------------------------------------------------------------------------
# silence trimming

TRIM_WINDOW_S = 0.025
TRIM_HOP_S = 0.010


def frame_rms_db(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    frames = frames_view(x, win, hop)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(rms)


def trim_silence(w: Waveform, threshold_db: float = 40.0) -> Waveform:
    """Drop leading/trailing 25 ms frames more than ``threshold_db`` below the loudest frame.

    Only the edges are cut; quiet stretches inside the utterance stay. An
    all-silent input yields an empty waveform.
    """
    if threshold_db <= 0:
        raise AudioError(f"threshold_db must be positive, got {threshold_db}")
    x = w.samples
    if len(x) == 0 or not np.any(x):
        return w.replace(np.zeros(0))
    win = max(1, int(round(TRIM_WINDOW_S * w.sample_rate)))
    hop = max(1, int(round(TRIM_HOP_S * w.sample_rate)))
    if len(x) < win:
        return w.replace(x.copy())
    level = frame_rms_db(x, win, hop)
    loud = np.flatnonzero(level >= level.max() - threshold_db)
    start = loud[0] * hop
    stop = loud[-1] * hop + win
    if loud[-1] == frame_count(len(x), win, hop) - 1:
        # keep the partial tail that never starts a frame of its own
        stop = len(x)
    return w.replace(x[start:stop].copy())


# ---------------------------------------------------------------------------
# STFT analysis / synthesis for cleaning


@dataclass(frozen=True, eq=False)
class NoiseProfile:
    power: np.ndarray
    frame_config: FrameConfig

    def __post_init__(self):
        p = np.asarray(self.power, dtype=np.float64)
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise AudioError("noise power must be finite and non-negative")
        object.__setattr__(self, "power", p)


def _stft(x: np.ndarray, sample_rate: int, cfg: FrameConfig):
    win = cfg.win_length(sample_rate)
    hop = cfg.hop_length(sample_rate)
    n_fft = cfg.n_fft(sample_rate)
    window = cfg.window(sample_rate)
    # pad so every real sample is covered by full frames on both sides
    n_frames = int(np.ceil((len(x) + win) / hop)) + 1
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[win : win + len(x)] = x
    frames = frames_view(padded, win, hop)
    spec = rfft_half(frames * window, n_fft)
    return spec, window, win, hop, n_fft, len(padded)


def _istft(spec, window, win, hop, n_fft, padded_len, n_out) -> np.ndarray:
    frames = irfft_half(spec, n_fft)[:, :win] * window
    out = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    w2 = window * window
    for t in range(frames.shape[0]):
        out[t * hop : t * hop + win] += frames[t]
        norm[t * hop : t * hop + win] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return out[win : win + n_out]


def stft_identity(w: Waveform, cfg: FrameConfig = CLEANING_FRAMES) -> Waveform:
    """Analysis + synthesis with no modification; reproduces the input to float error."""
    return _apply_gain(w, lambda p: np.ones_like(p), cfg)


def _apply_gain(w: Waveform, gain_fn, cfg: FrameConfig) -> Waveform:
    if len(w) == 0:
        return w.replace(np.zeros(0))
    spec, window, win, hop, n_fft, plen = _stft(w.samples, w.sample_rate, cfg)
    observed = (spec.real**2 + spec.imag**2) / win
    gain = gain_fn(observed)
    out = _istft(spec * gain, window, win, hop, n_fft, plen, len(w))
    return w.replace(out)


def estimate_noise(w: Waveform, cfg: FrameConfig = CLEANING_FRAMES, fraction: float = 0.10) -> NoiseProfile:
    """Mean periodogram of the quietest 10% of frames (at least 5 frames).

    The quietest frames are used instead of the leading ones because a
    trimmed utterance may start straight into speech.
    """
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    n = frame_count(len(w), win, hop)
    if n < 10:
        raise AudioError(f"noise estimation needs at least 10 frames, got {n}")
    frames = frames_view(w.samples, win, hop) * cfg.window(w.sample_rate)
    power = periodogram(frames, cfg.n_fft(w.sample_rate))
    energy = power.sum(axis=1)
    k = max(5, int(np.ceil(fraction * n)))
    quiet = np.argsort(energy, kind="stable")[:k]
    return NoiseProfile(power[quiet].mean(axis=0), cfg)


def _check_profile(noise: NoiseProfile, w: Waveform, cfg: FrameConfig) -> np.ndarray:
    n_bins = cfg.n_fft(w.sample_rate) // 2 + 1
    if noise.power.shape != (n_bins,):
        raise AudioError(f"noise profile has {noise.power.shape[0]} bins, config needs {n_bins}")
    return noise.power


SPECTRAL_FLOOR = 0.02
OVER_SUBTRACTION = 5.0


def spectral_subtract(
    w: Waveform,
    noise: NoiseProfile,
    cfg: FrameConfig = CLEANING_FRAMES,
    floor: float = SPECTRAL_FLOOR,
    over_subtraction: float = OVER_SUBTRACTION,
) -> Waveform:
    """Power spectral subtraction with a noise floor; phase is kept.

    Per bin the cleaned power is ``max(P - a*N, floor*N)`` (``a`` the
    over-subtraction factor), never more than the observed power.
    """
    pn = _check_profile(noise, w, cfg)

    def gain(po):
        cleaned = np.maximum(po - over_subtraction * pn, floor * pn)
        cleaned = np.minimum(cleaned, po)
        g = np.ones_like(po)
        nz = po > 0
        g[nz] = np.sqrt(cleaned[nz] / po[nz])
        return g

    return _apply_gain(w, gain, cfg)


def wiener_gain(observed: np.ndarray, noise_power: np.ndarray) -> np.ndarray:
    """``max(Po - Pn, 0) / Po``: the Wiener gain with the signal power estimated by subtraction."""
    signal = np.maximum(observed - noise_power, 0.0)
    # signal + noise == observed whenever signal > 0; elsewhere the gain is 0
    denom = np.where(signal > 0, observed, 1.0)
    g = np.where(noise_power > 0, signal / denom, 1.0)
    return np.clip(g, 0.0, 1.0)


def wiener_filter(w: Waveform, noise: NoiseProfile, cfg: FrameConfig = CLEANING_FRAMES) -> Waveform:
    pn = _check_profile(noise, w, cfg)
    return _apply_gain(w, lambda po: wiener_gain(po, pn), cfg)


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class CleaningOptions:
    trim: bool = True
    trim_db: float = 40.0
    denoise: str = "wiener"  # wiener | subtract | none
    fix_seconds: float | None = 3.0
    sample_rate: int | None = None

    def to_dict(self) -> dict:
        return {
            "trim": self.trim,
            "trim_db": self.trim_db,
            "denoise": self.denoise,
            "fix_seconds": self.fix_seconds,
            "sample_rate": self.sample_rate,
        }


def clean(w: Waveform, opts: CleaningOptions = CleaningOptions()) -> Waveform:
    """resample → trim → noise estimate → denoise → fix length."""
    if opts.sample_rate and opts.sample_rate != w.sample_rate:
        w = resample_linear(w, opts.sample_rate)
    if opts.trim:
        trimmed = trim_silence(w, opts.trim_db)
        if len(trimmed):
            w = trimmed
    if opts.denoise != "none":
        try:
            noise = estimate_noise(w)
        except AudioError:
            noise = None
        if noise is not None:
            if opts.denoise == "wiener":
                w = wiener_filter(w, noise)
            elif opts.denoise == "subtract":
                w = spectral_subtract(w, noise)
            else:
                raise AudioError(f"unknown denoise method {opts.denoise!r}")
    if opts.fix_seconds:
        w = fix_length(w, opts.fix_seconds)
    return w
