"""Command line entry point: ``speechemo <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

from ..audio import clean, read_wav, write_wav
from ..corpus import ingest_manifest, scan_ravdess, write_listing
from . import synthetic
from .config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from .experiment import StageError, evaluate_model, featurize_corpus, predict_file, run_experiment


def _parse_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {p!r}")
        out.setdefault(sec.strip(), {})[name.strip()] = value
    return out


def _config(args) -> ExperimentConfig:
    overrides = _parse_overrides(args.set)
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("[corpus]\nsource = synthetic\n", "<defaults>", overrides)


def _add_config_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", "-c", required=required, help="experiment config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def cmd_synth(args) -> int:
    utts = synthetic.generate(args.out_dir, seed=args.seed)
    print(f"wrote {len(utts)} files to {args.out_dir}")
    return 0


def cmd_ingest(args) -> int:
    try:
        utts = ingest_manifest(args.manifest) if args.manifest else scan_ravdess(args.root, not args.include_song)
    except Exception as e:
        raise StageError("ingest", str(e)) from e
    if args.output:
        write_listing(utts, args.output)
    else:
        json.dump([u.to_dict() for u in utts], sys.stdout, indent=1)
        print()
    print(f"{len(utts)} utterances", file=sys.stderr)
    return 0


def cmd_clean(args) -> int:
    cfg = _config(args)
    try:
        write_wav(args.output, clean(read_wav(args.input), cfg.cleaning))
    except Exception as e:
        raise StageError("clean", str(e)) from e
    return 0


def cmd_featurize(args) -> int:
    n = featurize_corpus(_config(args))
    print(f"features ready for {n} utterances")
    return 0


def cmd_train(args) -> int:
    report = run_experiment(_config(args))
    print(report.summary())
    return 0


def cmd_eval(args) -> int:
    report = evaluate_model(args.model, _config(args))
    if args.output:
        report.save_json(args.output)
    print(report.summary())
    return 0


def cmd_predict(args) -> int:
    for label, p in predict_file(args.model, args.wav)[: args.top]:
        print(f"{label}\t{p:.6f}")
    return 0


def cmd_grid(args) -> int:
    rows = [("config", "name", "accuracy", "macro_f1", "top2", "top3")]
    for path in args.configs:
        cfg = load_config(path)
        r = run_experiment(cfg)
        rows.append((path, cfg.experiment.name, r.accuracy, r.macro_f1, r.top_k_accuracy.get(2, ""), r.top_k_accuracy.get(3, "")))
        print(f"{path}: {r.summary()}")
    if args.summary:
        with open(args.summary, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speechemo", description="Speech emotion recognition experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic three-class corpus")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="scan a corpus and emit a JSON listing")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--root", help="RAVDESS root directory")
    src.add_argument("--manifest", help="CSV manifest path,emotion,gender[,intensity]")
    p.add_argument("--include-song", action="store_true", help="keep song (vocal channel 02) files")
    p.add_argument("--output", "-o", help="listing file (default: stdout)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("clean", help="clean one WAV file with the config's [cleaning] options")
    p.add_argument("input")
    p.add_argument("output")
    _add_config_args(p, required=False)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("featurize", help="fill the feature cache for a config")
    _add_config_args(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="run a full experiment (train and evaluate)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on the config's test split")
    _add_config_args(p)
    p.add_argument("--model", "-m", required=True)
    p.add_argument("--output", "-o", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="rank labels for one WAV file")
    p.add_argument("--model", "-m", required=True)
    p.add_argument("wav")
    p.add_argument("--top", type=int, default=1000)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grid", help="run several experiment configs in turn")
    p.add_argument("configs", nargs="+")
    p.add_argument("--summary", help="CSV summary path")
    p.set_defaults(func=cmd_grid)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(args, "print_config", False):
            print(format_config(_config(args)))
            return 0
        return args.func(args)
    except StageError as e:
        print(f"speechemo: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"speechemo: [config] {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"speechemo: [io] {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
