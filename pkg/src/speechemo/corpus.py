"""Corpus metadata: RAVDESS filename parsing, label schemes and speaker splits."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

EMOTION_CODES = {
    1: "neutral",
    2: "calm",
    3: "happy",
    4: "sad",
    5: "angry",
    6: "fearful",
    7: "disgust",
    8: "surprised",
}
EMOTION_TO_CODE = {name: code for code, name in EMOTION_CODES.items()}
INTENSITY_CODES = {1: "normal", 2: "strong"}

# field name -> (min code, max code)
_FIELD_RANGES = [
    ("modality", 1, 3),
    ("vocal_channel", 1, 2),
    ("emotion", 1, 8),
    ("intensity", 1, 2),
    ("statement", 1, 2),
    ("repetition", 1, 2),
    ("actor", 1, 24),
]

EMOTION_ALIASES = {
    "neutral": "neutral",
    "neu": "neutral",
    "calm": "calm",
    "happy": "happy",
    "happiness": "happy",
    "hap": "happy",
    "joy": "happy",
    "sad": "sad",
    "sadness": "sad",
    "angry": "angry",
    "anger": "angry",
    "ang": "angry",
    "fearful": "fearful",
    "fear": "fearful",
    "fea": "fearful",
    "disgust": "disgust",
    "disgusted": "disgust",
    "dis": "disgust",
    "surprised": "surprised",
    "surprise": "surprised",
    "sur": "surprised",
    "pleasant_surprise": "surprised",
    "pleasant_surprised": "surprised",
    "ps": "surprised",
}

GENDER_ALIASES = {"male": "male", "m": "male", "female": "female", "f": "female"}

EXTERNAL_ACTOR = 0


class CorpusError(ValueError):
    """Raised for malformed filenames, manifests, schemes or split specs."""


@dataclass(frozen=True)
class Utterance:
    id: str
    path: str
    modality: int
    vocal_channel: int
    emotion: str
    intensity: str
    statement: int
    repetition: int
    actor: int
    gender: str

    def codes(self) -> tuple[int, ...]:
        """The seven numeric identifier fields, in filename order."""
        return (
            self.modality,
            self.vocal_channel,
            EMOTION_TO_CODE[self.emotion],
            1 if self.intensity == "normal" else 2,
            self.statement,
            self.repetition,
            self.actor,
        )

    def filename_stem(self) -> str:
        return "-".join(f"{c:02d}" for c in self.codes())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Utterance":
        return cls(**d)


def gender_of_actor(actor: int) -> str:
    return "male" if actor % 2 == 1 else "female"


def parse_ravdess_filename(name: str, path: str | None = None) -> Utterance:
    """Decode a ``MM-VV-EE-II-SS-RR-AA.wav`` RAVDESS name into an :class:`Utterance`.

    The extension and any leading directories are ignored. Raises
    :class:`CorpusError` naming the offending field.
    """
    base = os.path.basename(name)
    stem = base.split(".", 1)[0]
    parts = stem.split("-")
    if len(parts) != 7:
        raise CorpusError(f"{base!r}: expected 7 dash-separated fields, got {len(parts)}")
    values = {}
    for raw, (fname, lo, hi) in zip(parts, _FIELD_RANGES):
        if not raw.isdigit():
            raise CorpusError(f"{base!r}: field {fname} is not numeric ({raw!r})")
        v = int(raw)
        if not lo <= v <= hi:
            raise CorpusError(f"{base!r}: field {fname} code {v} out of range {lo}..{hi}")
        values[fname] = v
    emotion = EMOTION_CODES[values["emotion"]]
    intensity = INTENSITY_CODES[values["intensity"]]
    if emotion == "neutral" and intensity != "normal":
        raise CorpusError(f"{base!r}: field intensity must be normal for neutral")
    return Utterance(
        id=stem,
        path=path if path is not None else name,
        modality=values["modality"],
        vocal_channel=values["vocal_channel"],
        emotion=emotion,
        intensity=intensity,
        statement=values["statement"],
        repetition=values["repetition"],
        actor=values["actor"],
        gender=gender_of_actor(values["actor"]),
    )


# ---------------------------------------------------------------------------
# label schemes

_EMOTION7 = ["neutral", "happy", "sad", "angry", "fearful", "disgust", "surprised"]
_EMOTION6 = [e for e in _EMOTION7 if e != "surprised"]
_POSITIVE = {"neutral", "happy", "surprised"}
_NEGATIVE = {"angry", "sad", "fearful", "disgust"}

SCHEME_KINDS = ("Emotion6", "Emotion7", "GenderEmotion12", "GenderEmotion14", "Valence2")


def merge_emotion(emotion: str) -> str:
    """Calm and neutral are one class everywhere."""
    return "neutral" if emotion == "calm" else emotion


@dataclass(frozen=True)
class LabelScheme:
    kind: str
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise CorpusError(f"unknown label scheme {self.kind!r}")
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(_canonical_names(self.kind)))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def is_subset(self) -> bool:
        return tuple(self.class_names) != tuple(_canonical_names(self.kind))

    def restrict(self, names: Iterable[str]) -> "LabelScheme":
        """A scheme with only ``names`` (kept in canonical order)."""
        wanted = set(names)
        unknown = wanted - set(self.class_names)
        if unknown:
            raise CorpusError(f"classes {sorted(unknown)} not in scheme {self.kind}")
        kept = tuple(c for c in _canonical_names(self.kind) if c in wanted)
        if len(kept) < 2:
            raise CorpusError("a restricted scheme needs at least two classes")
        return LabelScheme(self.kind, kept)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "class_names": list(self.class_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScheme":
        return cls(d["kind"], tuple(d["class_names"]))


def _canonical_names(kind: str) -> list[str]:
    if kind == "Emotion6":
        return list(_EMOTION6)
    if kind == "Emotion7":
        return list(_EMOTION7)
    if kind == "GenderEmotion12":
        return [f"{g}_{e}" for g in ("male", "female") for e in _EMOTION6]
    if kind == "GenderEmotion14":
        return [f"{g}_{e}" for g in ("male", "female") for e in _EMOTION7]
    if kind == "Valence2":
        return ["positive", "negative"]
    raise CorpusError(f"unknown label scheme {kind!r}")


def scheme(kind: str) -> LabelScheme:
    return LabelScheme(kind)


def class_name_of(u: Utterance, sch: LabelScheme) -> str:
    emo = merge_emotion(u.emotion)
    kind = sch.kind
    if kind in ("Emotion6", "GenderEmotion12") and emo == "surprised":
        raise CorpusError(f"{u.id}: surprised is not representable in {kind}")
    if kind in ("Emotion6", "Emotion7"):
        return emo
    if kind in ("GenderEmotion12", "GenderEmotion14"):
        return f"{u.gender}_{emo}"
    if emo in _POSITIVE:
        return "positive"
    if emo in _NEGATIVE:
        return "negative"
    raise CorpusError(f"{u.id}: emotion {u.emotion!r} has no valence")


def label_of(u: Utterance, sch: LabelScheme) -> int:
    """Index of ``u`` in ``sch.class_names``.

    Gendered schemes lay out male classes first, then female, so the index is
    ``gender_offset * per_gender + emotion_index``.
    """
    name = class_name_of(u, sch)
    try:
        return sch.class_names.index(name)
    except ValueError:
        raise CorpusError(f"{u.id}: class {name!r} not in scheme {list(sch.class_names)}") from None


def representable(u: Utterance, sch: LabelScheme) -> bool:
    try:
        label_of(u, sch)
    except CorpusError:
        return False
    return True


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    train_actors: frozenset = frozenset(range(1, 21))
    val_actors: frozenset = frozenset({21, 22})
    test_actors: frozenset = frozenset({23, 24})

    def __post_init__(self):
        for name in ("train_actors", "val_actors", "test_actors"):
            object.__setattr__(self, name, frozenset(int(a) for a in getattr(self, name)))
        pairs = [
            ("train", "val", self.train_actors & self.val_actors),
            ("train", "test", self.train_actors & self.test_actors),
            ("val", "test", self.val_actors & self.test_actors),
        ]
        for a, b, common in pairs:
            if common:
                raise CorpusError(f"split actor sets {a}/{b} overlap: {sorted(common)}")

    def to_dict(self) -> dict:
        return {
            "train_actors": sorted(self.train_actors),
            "val_actors": sorted(self.val_actors),
            "test_actors": sorted(self.test_actors),
        }


def split(corpus: Sequence[Utterance], spec: SplitSpec | None = None):
    """Partition by actor id into ``(train, val, test)``.

    Utterances of actors in none of the sets are dropped; the dropped count
    is logged. Each output list is sorted by path.
    """
    spec = spec or SplitSpec()
    train, val, test = [], [], []
    dropped = 0
    for u in sorted(corpus, key=lambda u: u.path):
        if u.actor in spec.train_actors:
            train.append(u)
        elif u.actor in spec.val_actors:
            val.append(u)
        elif u.actor in spec.test_actors:
            test.append(u)
        else:
            dropped += 1
    if dropped:
        logger.info("split: dropped %d utterances from unassigned actors", dropped)
    return train, val, test


# ---------------------------------------------------------------------------
# corpus discovery


def scan_ravdess(root: str | os.PathLike, speech_only: bool = True) -> list[Utterance]:
    """Walk ``root`` for RAVDESS wav files; unparseable names are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    out = []
    for p in sorted(root.rglob("*.wav")):
        try:
            u = parse_ravdess_filename(p.name, path=str(p))
        except CorpusError as e:
            logger.warning("skipping %s: %s", p, e)
            continue
        if speech_only and u.vocal_channel != 1:
            continue
        out.append(u)
    return sorted(out, key=lambda u: u.path)


def ingest_manifest(path: str | os.PathLike) -> list[Utterance]:
    """Read a CSV manifest ``path,emotion,gender[,intensity]`` for external corpora.

    Every row becomes an utterance of the synthetic external actor
    (:data:`EXTERNAL_ACTOR`); paths resolve against the manifest directory.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest {path} not found")
    base = path.parent
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        missing = [c for c in ("path", "emotion", "gender") if c not in cols]
        if missing:
            raise CorpusError(f"manifest {path}: missing column(s) {missing}")
        for rowno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            emo_raw = row["emotion"].lower()
            emotion = EMOTION_ALIASES.get(emo_raw)
            if emotion is None:
                raise CorpusError(f"manifest {path} row {rowno}: unknown emotion {row['emotion']!r}")
            gender = GENDER_ALIASES.get(row["gender"].lower())
            if gender is None:
                raise CorpusError(f"manifest {path} row {rowno}: unknown gender {row['gender']!r}")
            intensity = (row.get("intensity") or "normal").lower()
            if intensity not in ("normal", "strong"):
                raise CorpusError(f"manifest {path} row {rowno}: unknown intensity {intensity!r}")
            rel = row["path"]
            full = rel if os.path.isabs(rel) else str(base / rel)
            out.append(
                Utterance(
                    id=f"ext-{Path(rel).with_suffix('').as_posix().replace('/', '_')}",
                    path=full,
                    modality=3,
                    vocal_channel=1,
                    emotion=emotion,
                    intensity=intensity,
                    statement=0,
                    repetition=0,
                    actor=EXTERNAL_ACTOR,
                    gender=gender,
                )
            )
    return sorted(out, key=lambda u: u.path)


def write_listing(utts: Iterable[Utterance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([u.to_dict() for u in utts], fh, indent=1)


def read_listing(path: str | os.PathLike) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_dict(d) for d in json.load(fh)]
