import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from speechemo import serf
from speechemo.harness import synthetic
from speechemo.harness.cli import main
from speechemo.harness.config import format_config, parse_config
from speechemo.harness.experiment import (
    FittedModel,
    InputBuilder,
    StageError,
    cache_path,
    evaluate_model,
    featurize_all,
    featurize_corpus,
    load_corpus,
    predict_file,
    run_experiment,
    stage,
)


def _config(root, out, cache, family="dnn", extra=""):
    text = f"""
[experiment]
output_dir = {out}
cache_dir = {cache}
[corpus]
source = synthetic
root = {root}
scheme = Emotion7
[cleaning]
fix_seconds = 1.0
[features]
kind = logmel
window_s = 0.025
hop_s = 0.010
n_mels = 40
[model]
family = {family}
hidden = 32, 16
hmm_states = 2
hmm_components = 1
hmm_max_iter = 8
[train]
epochs = 8
lr = 0.003
{extra}
"""
    return parse_config(text)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("exp")


@pytest.fixture(scope="module")
def dnn_run(work):
    cfg = _config(work / "syn", work / "dnn", work / "cache")
    return cfg, run_experiment(cfg)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synthetic_corpus_layout(work):
    utts = synthetic.generate(work / "layout", seed=3)
    assert len(utts) == 100
    sizes = [sum(u.actor in s for u in utts) for s in (synthetic.SPLIT.train_actors, synthetic.SPLIT.val_actors,
                                                     synthetic.SPLIT.test_actors)]
    assert sizes == [60, 20, 20]
    assert {u.emotion for u in utts} == {"neutral", "happy", "angry"}
    again = synthetic.generate(work / "layout2", seed=3)
    assert all((work / "layout" / a.id).with_suffix(".wav").read_bytes() == (work / "layout2" / b.id).with_suffix(".wav").read_bytes()
               for a, b in zip(utts, again))


def test_run_writes_every_artifact(dnn_run):
    cfg, rep = dnn_run
    out = Path(cfg.experiment.output_dir)
    for name in ("report.json", "confusion.csv", "history.csv", "predictions.csv", "config.ini", "model.serm"):
        assert (out / name).is_file(), name
    assert rep.class_names == ["neutral", "happy", "angry"]
    assert rep.n_examples == 20
    assert rep.extra["split_sizes"] == {"train": 60, "val": 20, "test": 20}
    assert len(_read_csv(out / "history.csv")) == 1 + cfg.train.epochs
    preds = _read_csv(out / "predictions.csv")
    assert preds[0] == ["split", "id", "true", "pred", "prob"] and len(preds) == 101
    assert parse_config((out / "config.ini").read_text()) == cfg
    assert json.loads((out / "report.json").read_text())["accuracy"] == rep.accuracy


def test_rerun_with_cache_and_without_is_identical(dnn_run, work):
    cfg, _ = dnn_run
    report = Path(cfg.experiment.output_dir) / "report.json"
    first = report.read_bytes()
    entries = sorted(Path(cfg.cache_dir).rglob("*.serf"))
    assert len(entries) == 100
    run_experiment(cfg)
    assert report.read_bytes() == first
    shutil.rmtree(cfg.cache_dir)
    run_experiment(cfg)
    assert report.read_bytes() == first


def test_cache_key_follows_the_feature_recipe(dnn_run):
    cfg, _ = dnn_run
    utts, _ = load_corpus(cfg)
    other = cfg.with_overrides({"features": {"n_mels": "32"}})
    assert cache_path(cfg, utts[0].id) != cache_path(other, utts[0].id)
    assert cache_path(cfg, utts[0].id).parent.parent == cache_path(other, utts[0].id).parent.parent


def test_corrupt_cache_entry_is_recomputed(dnn_run, caplog):
    cfg, _ = dnn_run
    utts, _ = load_corpus(cfg)
    u = utts[0]
    good = featurize_all(cfg, [u])[0]
    cache_path(cfg, u.id).write_bytes(b"garbage")
    again = featurize_all(cfg, [u])[0]
    np.testing.assert_array_equal(again, good)
    assert "recomputing" in caplog.text
    assert serf.load_meta(cache_path(cfg, u.id))["utterance"] == u.id


def test_parallel_featurization_matches_serial(dnn_run, work):
    cfg, _ = dnn_run
    utts, _ = load_corpus(cfg)
    serial = featurize_all(cfg.with_overrides({"experiment": {"cache_dir": str(work / "c1")}}), utts[:6])
    par = featurize_all(cfg.with_overrides({"experiment": {"cache_dir": str(work / "c2"), "workers": "2"}}), utts[:6])
    for a, b in zip(serial, par):
        np.testing.assert_array_equal(a, b)


def test_predict_file_on_a_training_utterance(dnn_run):
    cfg, _ = dnn_run
    out = Path(cfg.experiment.output_dir)
    row = next(r for r in _read_csv(out / "predictions.csv")[1:] if r[0] == "train")
    ranked = predict_file(out / "model.serm", Path(cfg.corpus.root) / f"{row[1]}.wav")
    probs = [p for _, p in ranked]
    assert probs == sorted(probs, reverse=True)
    assert abs(sum(probs) - 1) <= 1e-6
    assert ranked[0][0] == row[3]
    assert ranked[0][1] == pytest.approx(float(row[4]), abs=1e-6)


def test_evaluate_model_matches_the_run(dnn_run):
    cfg, rep = dnn_run
    again = evaluate_model(Path(cfg.experiment.output_dir) / "model.serm", cfg)
    assert again.accuracy == rep.accuracy
    np.testing.assert_array_equal(again.confusion, rep.confusion)


def test_external_manifest_is_scored_as_test(dnn_run, work):
    cfg, _ = dnn_run
    utts, _ = load_corpus(cfg)
    m = work / "external.csv"
    with open(m, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "emotion", "gender"])
        for u in utts[:9]:
            w.writerow([u.path, u.emotion, u.gender])
    ext = cfg.with_overrides({"corpus": {"source": "manifest", "manifest": str(m)}})
    rep = evaluate_model(Path(cfg.experiment.output_dir) / "model.serm", ext)
    assert rep.n_examples == 9


def test_hmm_experiment_has_one_model_per_class(work):
    cfg = _config(work / "syn", work / "hmm", work / "cache", family="hmm")
    rep = run_experiment(cfg)
    assert rep.extra["models_per_class"] == {"neutral": 1, "happy": 1, "angry": 1}
    assert rep.extra["hmm_selected"] == {"n_states": 2, "n_components": 1}
    fitted = FittedModel.load(Path(cfg.experiment.output_dir) / "model.hmm.json")
    assert sorted(fitted.hmm.models) == [0, 1, 2]
    hist = _read_csv(Path(cfg.experiment.output_dir) / "history.csv")
    assert hist[0] == ["n_states", "n_components", "class", "iteration", "loglik", "val_acc"]
    utts, _ = load_corpus(cfg)
    ranked = predict_file(Path(cfg.experiment.output_dir) / "model.hmm.json", utts[0].path)
    assert abs(sum(p for _, p in ranked) - 1) <= 1e-6


def test_input_builder_shapes_and_training_stats(rng):
    feats = [rng.normal(size=(n, 4)).astype(np.float32) for n in (10, 12, 7)]
    b = InputBuilder.fit("champion", feats)
    assert b.n_frames == 12
    shaped = [b.shape_one(x) for x in feats]
    assert all(s.shape == (1, 4, 12) for s in shaped)
    assert np.all(shaped[2][0, :, 7:] == 0)
    m, s = b.stats(shaped)
    assert m.shape == (1, 4, 1)
    assert InputBuilder.fit("dnn", feats).shape_one(feats[0]).shape == (8,)
    assert InputBuilder.fit("hmm", feats).shape_one(feats[0]).shape == (10, 4)
    const = [np.ones((5, 2), np.float32)] * 2
    _, s = InputBuilder.fit("hmm", const).stats(const)
    np.testing.assert_array_equal(s, 1.0)
    assert InputBuilder.from_dict(b.to_dict()).n_frames == 12


def test_stage_wrapping():
    with pytest.raises(StageError, match=r"^\[clean\] ValueError: boom$"):
        with stage("clean"):
            raise ValueError("boom")
    with pytest.raises(StageError, match=r"^\[train\] inner$"):
        with stage("eval"):
            raise StageError("train", "inner")


def test_broken_audio_is_tagged_with_the_clean_stage(dnn_run, work):
    cfg, _ = dnn_run
    bad = work / "bad.wav"
    bad.write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(StageError, match=r"^\[clean\]"):
        predict_file(Path(cfg.experiment.output_dir) / "model.serm", bad)


def test_featurize_corpus_counts(dnn_run):
    cfg, _ = dnn_run
    assert featurize_corpus(cfg) == 100


# -- CLI -------------------------------------------------------------------


def test_cli_print_config(capsys):
    assert main(["train", "--config", "/nonexistent.ini", "--print-config"]) == 2
    assert "[config]" in capsys.readouterr().err
    assert main(["featurize", "-c", "/dev/null", "--set", "corpus.source=synthetic", "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "[corpus]" in out and "source = synthetic" in out


def test_cli_config_and_stage_errors(capsys, work):
    assert main(["train", "-c", "/dev/null", "--set", "train.epochs=zero", "--print-config"]) == 2
    assert "speechemo: [config]" in capsys.readouterr().err
    assert main(["train", "-c", "/dev/null", "--set", "nodot=1"]) == 2
    capsys.readouterr()
    cfg = work / "missing_root.ini"
    cfg.write_text(f"[experiment]\noutput_dir = {work / 'mr'}\n[corpus]\nroot = {work / 'nowhere'}\n")
    assert main(["train", "-c", str(cfg)]) == 1
    assert "speechemo: [ingest]" in capsys.readouterr().err
    assert main(["predict", "--model", str(work / "nomodel"), str(work / "x.wav")]) == 1
    assert "[predict]" in capsys.readouterr().err


def test_cli_synth_ingest_and_manifest(capsys, work):
    assert main(["synth", str(work / "cli_syn"), "--seed", "1"]) == 0
    assert "wrote 100 files" in capsys.readouterr().out
    assert main(["ingest", "--root", str(work / "cli_syn"), "-o", str(work / "listing.json")]) == 0
    m = work / "m.csv"
    m.write_text("path,emotion,gender\nsome.wav,Angry,f\n")
    assert main(["ingest", "--manifest", str(m)]) == 0
    listing = json.loads(capsys.readouterr().out)
    assert listing[0]["emotion"] == "angry"
    m.write_text("path,emotion,gender\nsome.wav,bored,f\n")
    assert main(["ingest", "--manifest", str(m)]) == 1
    assert "speechemo: [ingest]" in capsys.readouterr().err


def test_cli_train_eval_predict_grid(capsys, work, dnn_run):
    cfg, rep = dnn_run
    ini = work / "dnn.ini"
    ini.write_text(format_config(cfg.with_overrides({"experiment": {"output_dir": str(work / "cli_dnn")}})))
    assert main(["train", "-c", str(ini)]) == 0
    assert f"acc={rep.accuracy:.4f}" in capsys.readouterr().out
    model = work / "cli_dnn" / "model.serm"
    assert main(["eval", "-c", str(ini), "-m", str(model), "-o", str(work / "eval.json")]) == 0
    capsys.readouterr()
    assert json.loads((work / "eval.json").read_text())["accuracy"] == rep.accuracy
    utts, _ = load_corpus(cfg)
    assert main(["predict", "-m", str(model), utts[0].path, "--top", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].split("\t")[0] in rep.class_names
    assert main(["clean", str(utts[0].path), str(work / "cleaned.wav"), "-c", str(ini)]) == 0
    assert (work / "cleaned.wav").stat().st_size > 44
    assert main(["grid", str(ini), "--summary", str(work / "grid.csv")]) == 0
    rows = _read_csv(work / "grid.csv")
    assert rows[0][:3] == ["config", "name", "accuracy"] and float(rows[1][2]) == rep.accuracy
