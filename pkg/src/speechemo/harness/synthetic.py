"""Synthetic three-class "emotion" corpus for dataset-free end-to-end checks.

Each class is a harmonic carrier with its own pitch, amplitude-modulation
rate and noise floor. Every "speaker" (actor id) jitters pitch, AM rate,
gain and onset with its own seed, and speakers never cross splits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..audio import Waveform, write_wav
from ..corpus import EMOTION_TO_CODE, SplitSpec, Utterance, parse_ravdess_filename


@dataclass(frozen=True)
class SyntheticClass:
    emotion: str
    f0: float
    am_rate: float
    noise_db: float


CLASSES = (
    SyntheticClass("neutral", 130.0, 2.5, -42.0),
    SyntheticClass("happy", 240.0, 6.0, -36.0),
    SyntheticClass("angry", 380.0, 11.0, -30.0),
)

SAMPLE_RATE = 16000
DURATION_S = 1.2
N_ACTORS = 20
PER_ACTOR = 5
SPLIT = SplitSpec(frozenset(range(1, 13)), frozenset(range(13, 17)), frozenset(range(17, 21)))


def synth_utterance(cls: SyntheticClass, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(DURATION_S * sample_rate))
    onset = int(rng.uniform(0.05, 0.15) * sample_rate)
    length = int(rng.uniform(0.85, 0.95) * sample_rate)
    t = np.arange(length) / sample_rate
    f0 = cls.f0 * rng.uniform(0.9, 1.1)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    voice = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 7))
    am_rate = cls.am_rate * rng.uniform(0.85, 1.15)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    envelope *= np.hanning(length) ** 0.25
    x = np.zeros(n)
    x[onset : onset + length] = voice * envelope
    x *= rng.uniform(0.25, 0.5) / max(np.abs(x).max(), 1e-9)
    noise_amp = 10 ** ((cls.noise_db + rng.uniform(-2, 2)) / 20)
    x += noise_amp * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def generate(out_dir: str | os.PathLike, seed: int = 0) -> list[Utterance]:
    """Write ``N_ACTORS * PER_ACTOR`` RAVDESS-named WAV files into ``out_dir``.

    Actor ``a`` cycles through the classes starting at ``a mod 3``; with the
    default :data:`SPLIT` this gives 60 train, 20 validation and 20 test files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    utts = []
    for actor in range(1, N_ACTORS + 1):
        rng = np.random.default_rng([seed, actor])
        seen: dict[str, int] = {}
        for i in range(PER_ACTOR):
            cls = CLASSES[(actor + i) % len(CLASSES)]
            # the k-th take of a class by this actor -> statement/repetition codes
            k = seen.get(cls.emotion, 0)
            seen[cls.emotion] = k + 1
            statement, repetition = 1 + (k // 2) % 2, 1 + k % 2
            name = f"03-01-{EMOTION_TO_CODE[cls.emotion]:02d}-01-{statement:02d}-{repetition:02d}-{actor:02d}.wav"
            path = out / name
            write_wav(path, Waveform(synth_utterance(cls, rng), SAMPLE_RATE))
            utts.append(parse_ravdess_filename(name, path=str(path)))
    return sorted(utts, key=lambda u: u.path)
