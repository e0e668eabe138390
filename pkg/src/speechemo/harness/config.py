"""Typed, sectioned experiment configuration.

The file format is INI: one section per stage, ``key = value`` pairs.
Every key has a default, so an empty file is a valid config. Example::

    [experiment]
    seed = 0
    output_dir = runs/champion

    [corpus]
    source = ravdess
    root = /data/ravdess
    scheme = GenderEmotion14

    [features]
    kind = logmel

    [model]
    family = champion

    [train]
    epochs = 40
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import numpy as np

from ..audio import CleaningOptions
from ..corpus import SplitSpec
from ..features import FeatureSpec
from ..nn.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    cache_dir: str = ""  # empty: <output_dir>/cache
    workers: int = 1


@dataclass(frozen=True)
class CorpusSection:
    source: str = "ravdess"  # ravdess | manifest | synthetic
    root: str = ""
    manifest: str = ""
    speech_only: bool = True
    scheme: str = "GenderEmotion14"
    classes: tuple[str, ...] = ()  # optional subset of the scheme's classes
    train_actors: tuple[int, ...] = ()  # empty: source default
    val_actors: tuple[int, ...] = ()
    test_actors: tuple[int, ...] = ()


@dataclass(frozen=True)
class ModelSection:
    family: str = "champion"  # champion | cnn2d | dnn | cnn1d | hmm
    widths: tuple[int, ...] = (16, 32, 64, 64)
    n_layers: int = 4  # cnn2d only
    head: str = "gap"  # cnn2d only: gap | flatten
    hidden: tuple[int, ...] = (256, 128, 64)  # dnn only
    hmm_states: tuple[int, ...] = (3, 5, 8)
    hmm_components: tuple[int, ...] = (1, 2, 4)
    hmm_max_iter: int = 50
    hmm_topology: str = "ergodic"


FAMILIES = ("champion", "cnn2d", "dnn", "cnn1d", "hmm")
SOURCES = ("ravdess", "manifest", "synthetic")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    cleaning: CleaningOptions = field(default_factory=CleaningOptions)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.corpus.source not in SOURCES:
            raise ConfigError(f"[corpus] source must be one of {SOURCES}")
        if self.corpus.source == "ravdess" and not self.corpus.root:
            raise ConfigError("[corpus] root is required for source = ravdess")
        if self.corpus.source == "manifest" and not self.corpus.manifest:
            raise ConfigError("[corpus] manifest is required for source = manifest")
        if self.model.family not in FAMILIES:
            raise ConfigError(f"[model] family must be one of {FAMILIES}")
        if (self.model.family == "cnn1d") != (self.features.kind == "raw"):
            raise ConfigError("[model] family = cnn1d goes with [features] kind = raw, and only with it")
        if self.cleaning.denoise not in ("wiener", "subtract", "none"):
            raise ConfigError("[cleaning] denoise must be wiener, subtract or none")

    @property
    def cache_dir(self) -> str:
        return self.experiment.cache_dir or os.path.join(self.experiment.output_dir, "cache")

    def split_spec(self, source_default: SplitSpec) -> SplitSpec:
        c = self.corpus
        return SplitSpec(
            frozenset(c.train_actors) or source_default.train_actors,
            frozenset(c.val_actors) or source_default.val_actors,
            frozenset(c.test_actors) or source_default.test_actors,
        )

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides: dict[str, dict[str, str]]) -> "ExperimentConfig":
        """Apply string values as if they had appeared in a config file."""
        parts = {}
        for sec, values in overrides.items():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            parts[sec] = _build_section(SECTIONS[sec], values, base=getattr(self, sec), section=sec)
        return _derive_seeds(self.replace(**parts))


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "corpus": CorpusSection,
    "cleaning": CleaningOptions,
    "features": FeatureSpec,
    "model": ModelSection,
    "train": TrainConfig,
}

# keys whose values come from the master seed rather than the file
_DERIVED_KEYS = {("train", "seed")}


def _section_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, (tuple, frozenset)) else v
    return out


def _parse_value(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _parse_value(raw, inner[0], where)
    if origin is tuple:
        if not raw:
            return ()
        items = []
        for tok in raw.split(","):
            tok = tok.strip()
            if args[0] is int and "-" in tok.lstrip("-"):
                lo, hi = tok.split("-", 1)
                items.extend(range(int(lo), int(hi) + 1))
            else:
                items.append(_parse_value(tok, args[0], where))
        return tuple(items)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def _build_section(cls, values: dict[str, str], base=None, section: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        if (section, key) in _DERIVED_KEYS:
            raise ConfigError(f"[{section}] {key} is derived from [experiment] seed")
        kwargs[key] = _parse_value(raw, hints[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def parse_config(text: str, source: str = "<string>", overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    """Parse the file format; ``overrides`` (section -> key -> raw value) win over the text."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    overrides = overrides or {}
    unknown = [s for s in [*cp.sections(), *overrides] if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    parts = {}
    for name, cls in SECTIONS.items():
        values = dict(cp[name]) if cp.has_section(name) else {}
        values.update(overrides.get(name, {}))
        parts[name] = _build_section(cls, values, section=name)
    return _derive_seeds(ExperimentConfig(**parts))


def _derive_seeds(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.replace(train=dataclasses.replace(cfg.train, seed=stage_seed(cfg.experiment.seed, "train")))


def load_config(path: str | os.PathLike, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, str(path), overrides)


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def format_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the file format (derived keys shown as comments)."""
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            prefix = "# derived: " if (sec, k) in _DERIVED_KEYS else ""
            lines.append(f"{prefix}{k} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# seeds and hashes

STAGES = ("corpus", "train", "model_init", "hmm")


def stage_seed(master: int, stage: str) -> int:
    """Seed for ``stage``: the master seed's SeedSequence child at the stage's fixed index."""
    if stage not in STAGES:
        raise ConfigError(f"unknown seed stage {stage!r}")
    ss = np.random.SeedSequence([int(master), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def cleaning_hash(cfg: ExperimentConfig) -> str:
    return stable_hash(cfg.cleaning.to_dict())


def feature_hash(cfg: ExperimentConfig) -> str:
    return stable_hash(cfg.features.to_dict())
