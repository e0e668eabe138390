"""End-to-end experiment: corpus → cleaning → features → model → report."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import serf
from ..audio import CleaningOptions, clean, read_wav
from ..corpus import (
    EXTERNAL_ACTOR,
    CorpusError,
    LabelScheme,
    SplitSpec,
    Utterance,
    ingest_manifest,
    label_of,
    representable,
    scan_ravdess,
    split,
)
from ..features import FeatureSpec, extract
from ..hmm import HmmClassifier, train_classifier
from ..nn import layers as L
from ..nn.model import MODEL_MAGIC, Network, build_champion_cnn, build_cnn1d, build_cnn2d, build_dnn, load_network, save_network
from ..nn.train import train as train_network
from . import synthetic
from .config import ExperimentConfig, cleaning_hash, feature_hash, format_config, stage_seed
from .metrics import EvalReport

logger = logging.getLogger(__name__)

HMM_MODEL_FORMAT = "speechemo-hmm"
AUDIO_ONLY = 3


class StageError(RuntimeError):
    """A failure inside one pipeline stage; ``str()`` starts with ``[stage]``."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e


# ---------------------------------------------------------------------------
# corpus


def resolve_scheme(cfg: ExperimentConfig) -> LabelScheme:
    sch = LabelScheme(cfg.corpus.scheme)
    classes = cfg.corpus.classes
    if not classes and cfg.corpus.source == "synthetic":
        # only the classes the synthetic emotions can reach; valence keeps both
        emotions = {c.emotion for c in synthetic.CLASSES}
        classes = tuple(n for n in sch.class_names if sch.kind == "Valence2" or n.split("_")[-1] in emotions)
    return sch.restrict(classes) if classes else sch


def load_corpus(cfg: ExperimentConfig) -> tuple[list[Utterance], SplitSpec]:
    c = cfg.corpus
    if c.source == "synthetic":
        root = Path(c.root or os.path.join(cfg.experiment.output_dir, "synthetic"))
        utts = synthetic.generate(root, seed=stage_seed(cfg.experiment.seed, "corpus"))
        return utts, cfg.split_spec(synthetic.SPLIT)
    if c.source == "manifest":
        # external corpora are evaluation-only by default
        external = SplitSpec(frozenset(), frozenset(), frozenset({EXTERNAL_ACTOR}))
        return ingest_manifest(c.manifest), cfg.split_spec(external)
    return scan_ravdess(c.root, speech_only=c.speech_only), cfg.split_spec(SplitSpec())


@dataclass
class Partition:
    utts: list[Utterance]
    labels: np.ndarray


def partition(cfg: ExperimentConfig, utts: list[Utterance], spec: SplitSpec, sch: LabelScheme, need_train: bool = True):
    audio = [u for u in utts if u.modality == AUDIO_ONLY]
    if len(audio) < len(utts):
        logger.info("ingest: %d non-audio-only utterances dropped", len(utts) - len(audio))
    kept = [u for u in audio if representable(u, sch)]
    if len(kept) < len(audio):
        logger.info("ingest: %d utterances not representable in %s dropped", len(audio) - len(kept), sch.kind)
    parts = []
    for name, us in zip(("train", "val", "test"), split(kept, spec)):
        parts.append(Partition(us, np.array([label_of(u, sch) for u in us], dtype=np.int64)))
    if need_train and not parts[0].utts:
        raise CorpusError("training split is empty")
    if not parts[2].utts:
        raise CorpusError("test split is empty")
    return parts


# ---------------------------------------------------------------------------
# features with a per-utterance cache


def cache_path(cfg: ExperimentConfig, utt_id: str) -> Path:
    return Path(cfg.cache_dir) / cleaning_hash(cfg) / feature_hash(cfg) / f"{utt_id}.serf"


def compute_features(cleaning: CleaningOptions, features: FeatureSpec, path: str) -> np.ndarray:
    """Cleaned waveform → feature array ``(frames, dims)``, or the samples for ``raw``."""
    with stage("clean"):
        w = clean(read_wav(path), cleaning)
    with stage("featurize"):
        if features.kind == "raw":
            return w.samples.astype(np.float32)
        return extract(w, features).data.astype(np.float32)


def _feature_job(args) -> np.ndarray:
    cfg, u = args
    return cached_features(cfg, u)


def cached_features(cfg: ExperimentConfig, u: Utterance) -> np.ndarray:
    p = cache_path(cfg, u.id)
    if p.is_file():
        try:
            return serf.load(p)
        except (serf.SerfError, OSError) as e:
            logger.warning("featurize: unreadable cache entry %s (%s); recomputing", p, e)
    x = compute_features(cfg.cleaning, cfg.features, u.path)
    p.parent.mkdir(parents=True, exist_ok=True)
    serf.save(p, x, {"utterance": u.id, "path": u.path, "cleaning": cfg.cleaning.to_dict(), "features": cfg.features.to_dict()})
    return x


def featurize_all(cfg: ExperimentConfig, utts: list[Utterance]) -> list[np.ndarray]:
    jobs = [(cfg, u) for u in utts]
    if cfg.experiment.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.experiment.workers) as ex:
            return list(ex.map(_feature_job, jobs, chunksize=8))
    return [_feature_job(j) for j in jobs]


# ---------------------------------------------------------------------------
# model inputs


def _fit_frames(x: np.ndarray, n: int) -> np.ndarray:
    """Crop or zero-pad a ``(frames, dims)`` array to ``n`` frames."""
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros((n - len(x),) + x.shape[1:], dtype=x.dtype)])


class InputBuilder:
    """Turns per-utterance feature arrays into model inputs for one family.

    ``champion``/``cnn2d`` see ``(1, dims, frames)`` images, ``dnn`` sees the
    per-utterance mean and standard deviation of each dimension, ``cnn1d``
    sees ``(1, samples)`` and ``hmm`` sees ``(frames, dims)`` sequences.
    Normalization statistics come from the training inputs only.
    """

    def __init__(self, family: str, n_frames: int | None = None):
        self.family = family
        self.n_frames = n_frames

    @classmethod
    def fit(cls, family: str, train_feats: list[np.ndarray]) -> "InputBuilder":
        n = max(len(x) for x in train_feats) if family in ("champion", "cnn2d", "cnn1d") else None
        return cls(family, n)

    def shape_one(self, x: np.ndarray) -> np.ndarray:
        f = self.family
        if f in ("champion", "cnn2d"):
            return _fit_frames(x, self.n_frames).T[None]
        if f == "cnn1d":
            return _fit_frames(x, self.n_frames)[None]
        if f == "dnn":
            return np.concatenate([x.mean(axis=0), x.std(axis=0)])
        return x

    def stats(self, shaped: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean/std shaped to broadcast against one input."""
        f = self.family
        if f in ("champion", "cnn2d"):
            frames = np.concatenate([s[0].T for s in shaped]).astype(np.float64)
            m, s = frames.mean(axis=0)[None, :, None], frames.std(axis=0)[None, :, None]
        elif f == "cnn1d":
            allx = np.concatenate([s.ravel() for s in shaped]).astype(np.float64)
            m, s = np.array([[allx.mean()]]), np.array([[allx.std()]])
        elif f == "dnn":
            X = np.stack(shaped).astype(np.float64)
            m, s = X.mean(axis=0), X.std(axis=0)
        else:
            frames = np.concatenate(shaped).astype(np.float64)
            m, s = frames.mean(axis=0), frames.std(axis=0)
        s = np.where(s > 1e-8, s, 1.0)
        return m.astype(np.float32), s.astype(np.float32)

    def to_dict(self) -> dict:
        return {"family": self.family, "n_frames": self.n_frames}

    @classmethod
    def from_dict(cls, d: dict) -> "InputBuilder":
        return cls(d["family"], d.get("n_frames"))


def build_spec(cfg: ExperimentConfig, n_classes: int):
    m = cfg.model
    seed = stage_seed(cfg.experiment.seed, "model_init")
    if m.family == "champion":
        return build_champion_cnn(n_classes, seed, tuple(m.widths))
    if m.family == "cnn2d":
        widths = tuple(m.widths) + (m.widths[-1],) * max(0, m.n_layers - len(m.widths))
        return build_cnn2d(n_classes, m.n_layers, widths, ((3, 3),) * len(widths), m.head, seed)
    if m.family == "dnn":
        return build_dnn(n_classes, tuple(m.hidden), seed)
    return build_cnn1d(n_classes, seed)


# ---------------------------------------------------------------------------
# fitted model wrapper (network or HMM classifier)


@dataclass
class FittedModel:
    cfg_dict: dict
    scheme: LabelScheme
    builder: InputBuilder
    net: Network | None = None
    hmm: HmmClassifier | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def probabilities(self, shaped: list[np.ndarray]) -> np.ndarray:
        if self.net is not None:
            x = np.stack(shaped)
            return self.net.predict_proba(self.net.normalize(x).astype(self.net.dtype))
        ll = np.stack([self.hmm.logliks((s - self.norm_mean) / self.norm_std) for s in shaped])
        # posterior under a uniform class prior
        return L.softmax(ll)

    def save(self, path: str | os.PathLike) -> None:
        meta = {"config": self.cfg_dict, "scheme": self.scheme.to_dict(), "inputs": self.builder.to_dict()}
        if self.net is not None:
            save_network(path, self.net, meta)
            return
        doc = {
            "format": HMM_MODEL_FORMAT,
            "version": 1,
            **meta,
            "classifier": self.hmm.to_dict(),
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
        }
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FittedModel":
        with open(path, "rb") as fh:
            head = fh.read(4)
        if head == MODEL_MAGIC:
            net, meta = load_network(path)
            return cls(meta["config"], LabelScheme.from_dict(meta["scheme"]), InputBuilder.from_dict(meta["inputs"]), net=net)
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != HMM_MODEL_FORMAT or doc.get("version") != 1:
            raise ValueError(f"{path}: not a model file")
        return cls(
            doc["config"],
            LabelScheme.from_dict(doc["scheme"]),
            InputBuilder.from_dict(doc["inputs"]),
            hmm=HmmClassifier.from_dict(doc["classifier"]),
            norm_mean=np.asarray(doc["norm_mean"], dtype=np.float32),
            norm_std=np.asarray(doc["norm_std"], dtype=np.float32),
        )


def model_filename(cfg: ExperimentConfig) -> str:
    return "model.hmm.json" if cfg.model.family == "hmm" else "model.serm"


# ---------------------------------------------------------------------------
# training


def _train_nn(cfg, builder, sch, shaped, labels):
    (tr, ytr), (va, yva) = (shaped[0], labels[0]), (shaped[1], labels[1])
    mean, std = builder.stats(tr)
    norm = lambda xs: ((np.stack(xs) - mean) / std).astype(np.float32) if xs else None  # noqa: E731
    spec = build_spec(cfg, sch.n_classes)
    net = Network(spec, tr[0].shape)
    net.norm_mean, net.norm_std = mean, std
    best, hist = train_network(net, norm(tr), ytr, norm(va), yva, cfg.train)
    rows = [("epoch", "train_loss", "train_acc", "val_acc"), *hist.rows()]
    extra = {"best_epoch": hist.best_epoch, "epochs": cfg.train.epochs, "architecture": spec.name}
    return FittedModel(cfg.to_dict(), sch, builder, net=best), rows, extra


def _train_hmm(cfg, builder, sch, shaped, labels):
    tr, va = shaped[0], shaped[1]
    mean, std = builder.stats(tr)
    ntr = [(x - mean) / std for x in tr]
    nva = [(x - mean) / std for x in va]
    m = cfg.model
    seed = stage_seed(cfg.experiment.seed, "hmm")
    rows = [("n_states", "n_components", "class", "iteration", "loglik", "val_acc")]
    best = None
    grid = []
    for s in m.hmm_states:
        for c in m.hmm_components:
            clf = train_classifier(ntr, labels[0], sch.class_names, s, c, seed=seed,
                                   max_iter=m.hmm_max_iter, topology=m.hmm_topology)
            fm = FittedModel(cfg.to_dict(), sch, builder, hmm=clf, norm_mean=mean, norm_std=std)
            if nva:
                preds = np.argmax(np.stack([clf.logliks(x) for x in nva]), axis=1)
                vacc = float(np.mean(preds == labels[1]))
            else:
                vacc = float("nan")
            grid.append({"n_states": s, "n_components": c, "val_acc": vacc})
            for k in range(sch.n_classes):
                for it, ll in enumerate(clf.models[k].history):
                    rows.append((s, c, sch.class_names[k], it, ll, vacc))
            # strictly better only, so the first grid point wins ties
            if best is None or (nva and vacc > best[0]):
                best = (vacc, fm, s, c)
    _, fm, s, c = best
    extra = {
        "hmm_grid": grid,
        "hmm_selected": {"n_states": s, "n_components": c},
        "models_per_class": {name: 1 for name in sch.class_names},
        "final_loglik": {sch.class_names[k]: fm.hmm.models[k].history[-1] for k in range(sch.n_classes)},
    }
    return fm, rows, extra


# ---------------------------------------------------------------------------
# the experiment


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    """Run the full pipeline and write artifacts into ``cfg.experiment.output_dir``.

    Outputs: ``report.json``, ``confusion.csv``, ``history.csv``,
    ``predictions.csv``, the model file and the resolved ``config.ini``.
    """
    out = Path(cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with stage("ingest"):
        sch = resolve_scheme(cfg)
        utts, spec = load_corpus(cfg)
        parts = partition(cfg, utts, spec, sch)
    logger.info("ingest: %s", ", ".join(f"{n}={len(p.utts)}" for n, p in zip(("train", "val", "test"), parts)))

    feats = [featurize_all(cfg, p.utts) for p in parts]
    with stage("train"):
        builder = InputBuilder.fit(cfg.model.family, feats[0])
        shaped = [[builder.shape_one(x) for x in fs] for fs in feats]
        labels = [p.labels for p in parts]
        trainer = _train_hmm if cfg.model.family == "hmm" else _train_nn
        fitted, hist_rows, extra = trainer(cfg, builder, sch, shaped, labels)
        fitted.save(out / model_filename(cfg))

    with stage("eval"):
        probs = [fitted.probabilities(s) if s else np.zeros((0, sch.n_classes)) for s in shaped]
        extra["split_sizes"] = {n: len(p.utts) for n, p in zip(("train", "val", "test"), parts)}
        extra["model_family"] = cfg.model.family
        extra["feature_kind"] = cfg.features.kind
        if parts[1].utts:
            extra["val_accuracy"] = float(np.mean(np.argmax(probs[1], axis=1) == labels[1]))
        report = EvalReport.from_predictions(probs[2], labels[2], sch.class_names, sch.kind, extra=extra)
        report.save_json(out / "report.json")
        report.save_confusion_csv(out / "confusion.csv")
        _write_csv(out / "history.csv", hist_rows)
        pred_rows = [("split", "id", "true", "pred", "prob")]
        for name, p, pr in zip(("train", "val", "test"), parts, probs):
            for u, y, row in zip(p.utts, p.labels, pr):
                k = int(np.argmax(row))
                pred_rows.append((name, u.id, sch.class_names[y], sch.class_names[k], f"{row[k]:.6f}"))
        _write_csv(out / "predictions.csv", pred_rows)
        (out / "config.ini").write_text(format_config(cfg), encoding="utf-8")
    logger.info("eval: %s", report.summary())
    return report


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


def featurize_corpus(cfg: ExperimentConfig) -> int:
    """Fill the feature cache for every representable utterance; returns the count."""
    with stage("ingest"):
        sch = resolve_scheme(cfg)
        utts, _ = load_corpus(cfg)
        utts = [u for u in utts if representable(u, sch)]
    featurize_all(cfg, utts)
    return len(utts)


def evaluate_model(model_path: str | os.PathLike, cfg: ExperimentConfig) -> EvalReport:
    """Score a saved model on the test split described by ``cfg``."""
    with stage("eval"):
        fitted = FittedModel.load(model_path)
    with stage("ingest"):
        utts, spec = load_corpus(cfg)
        test = partition(cfg, utts, spec, fitted.scheme, need_train=False)[2]
    feats = featurize_all(cfg, test.utts)
    with stage("eval"):
        probs = fitted.probabilities([fitted.builder.shape_one(x) for x in feats])
        return EvalReport.from_predictions(probs, test.labels, fitted.scheme.class_names, fitted.scheme.kind)


def predict_file(model_path: str | os.PathLike, wav_path: str | os.PathLike) -> list[tuple[str, float]]:
    """Ranked ``(label, probability)`` pairs for one WAV file, most likely first."""
    with stage("predict"):
        fitted = FittedModel.load(model_path)
        cleaning = CleaningOptions(**fitted.cfg_dict["cleaning"])
        features = FeatureSpec(**fitted.cfg_dict["features"])
    x = compute_features(cleaning, features, str(wav_path))
    with stage("predict"):
        p = fitted.probabilities([fitted.builder.shape_one(x)])[0]
        order = np.argsort(-p, kind="stable")
        return [(fitted.scheme.class_names[k], float(p[k])) for k in order]
