"""Command-line interface: ``attriclean <verb> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attribution, clsbaseline, fadfilter, pipeline, sepmodel, storage
from .synthdata import TARGETS, CorpusSpec, build_corpus

EXIT_CONFIG = 2
EXIT_STAGE = 3

log = logging.getLogger("attriclean")


class StageFailure(RuntimeError):
    pass


def _write_retained(path, kept, ratio, mode, method):
    storage.atomic_write(path, storage.dump_json(
        {"method": method, "mode": mode, "ratio": ratio, "retained": kept}))


def _train_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=64)


def _train_config(args) -> sepmodel.TrainConfig:
    return sepmodel.TrainConfig(args.epochs, args.lr, args.batch, args.seed)


def cmd_synth(args):
    try:
        spec = CorpusSpec(**json.loads(Path(args.spec).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise pipeline.ConfigError(f"bad corpus spec: {exc}") from exc
    songs = build_corpus(spec)
    ledger = storage.write_corpus(songs, args.out, Path(args.ledger) if args.ledger else None)
    print(f"wrote {len(songs)} songs to {args.out}; ledger {ledger}")


def _train_and_save(corpus_by_target, refs, args, out):
    cfg = _train_config(args)
    try:
        results = sepmodel.train(corpus_by_target, cfg, val=refs)
    except sepmodel.TrainingDiverged as exc:
        raise StageFailure(str(exc)) from exc
    storage.write_checkpoint(out, {t: r.params for t, r in results.items()},
                             {t: r.log for t, r in results.items()})
    for t, r in results.items():
        print(f"{t}: best epoch {r.best_epoch}, val loss {r.log[r.best_epoch].val_loss:.6g}")


def cmd_train(args):
    _train_and_save(storage.read_corpus(args.corpus), storage.read_corpus(args.refs), args, args.out)


def cmd_retrain(args):
    corpus = {s.id: s for s in storage.read_corpus(args.corpus)}
    kept = json.loads(Path(args.retained).read_text())["retained"]
    if isinstance(kept, dict):
        by_target = {t: [corpus[i] for i in sorted(kept[t])] for t in TARGETS}
    else:
        by_target = {t: [corpus[i] for i in sorted(kept)] for t in TARGETS}
    _train_and_save(by_target, storage.read_corpus(args.refs), args, args.out)


def cmd_attribute(args):
    params = storage.read_checkpoint(args.ckpt)
    feats = sepmodel.corpus_features(storage.read_corpus(args.corpus))
    refs = sepmodel.corpus_features(storage.read_corpus(args.refs))
    cfg = attribution.UnlearnConfig(alpha=args.alpha, steps=args.steps)
    fishers = {t: attribution.fisher_diagonal(params[t], feats, t) for t in TARGETS}
    try:
        a = attribution.attribution_matrix(params, fishers, feats, refs, cfg)
    except attribution.UnlearningDiverged as exc:
        raise StageFailure(str(exc)) from exc
    storage.atomic_write(args.out, storage.matrix_bytes(a, storage.checksum(params)))
    table = storage.score_table(a.song_ids, attribution.aggregate_unified(a), "unlearn", True,
                                {t: attribution.aggregate_per_target(a, t) for t in TARGETS})
    storage.atomic_write(f"{args.out}.scores.tsv", table)
    print(f"attribution matrix {a.delta.shape} -> {args.out} (+ .scores.tsv)")


def cmd_fad(args):
    corpus = storage.read_corpus(args.corpus)
    kept, scores = fadfilter.fad_filter(corpus, storage.read_corpus(args.refs), args.ratio)
    storage.atomic_write(args.out, storage.score_table(
        [s.song_id for s in scores], [s.score for s in scores], "fad", False))
    _write_retained(f"{args.out}.retained.json", kept, args.ratio, "unified", "fad")
    print(f"retained {len(kept)}/{len(corpus)} -> {args.out}")


def cmd_clsfilter(args):
    corpus = storage.read_corpus(args.corpus)
    c = clsbaseline.train_classifier(storage.read_corpus(args.refs), args.seed)
    kept, scores = clsbaseline.cls_filter(corpus, c, args.ratio)
    storage.atomic_write(args.out, storage.score_table([s.id for s in corpus], scores, "cls", True))
    _write_retained(f"{args.out}.retained.json", kept, args.ratio, "unified", "cls")
    print(f"retained {len(kept)}/{len(corpus)} -> {args.out}")


def cmd_filter(args):
    if storage.is_matrix_file(args.scores):
        a, _ = storage.matrix_from_bytes(Path(args.scores).read_bytes())
        ids, method, higher = a.song_ids, "unlearn", True
        unified = attribution.aggregate_unified(a)
        per_target = {t: attribution.aggregate_per_target(a, t) for t in a.targets}
    else:
        table = storage.read_score_table(args.scores)
        ids, method, higher = table["ids"], table["method"], table["higher_is_better"]
        unified, per_target = table["score"], table["per_target"]
    if args.mode == "per-target":
        if not per_target:
            raise pipeline.ConfigError(f"{args.scores} has no per-target scores")
        kept = {t: attribution.filter_ranked(per_target[t], ids, args.ratio, higher) for t in per_target}
        sizes = {t: len(v) for t, v in kept.items()}
    else:
        kept = attribution.filter_ranked(unified, ids, args.ratio, higher)
        sizes = len(kept)
    out = args.out or f"{args.scores}.retained.json"
    _write_retained(out, kept, args.ratio, args.mode, method)
    print(f"retained {sizes} of {len(ids)} -> {out}")


def cmd_eval(args):
    params = storage.read_checkpoint(args.ckpt)
    summary = sepmodel.sdr_summary(sepmodel.evaluate_sdr(params, storage.read_corpus(args.eval)))
    text = storage.dump_json(summary)
    if args.out:
        storage.atomic_write(args.out, text)
    print(text, end="")


def cmd_run(args):
    cfg = pipeline.load_config(args.config)
    if args.out:
        cfg = pipeline.PipelineConfig.from_dict({**cfg.to_dict(), "out_dir": args.out})
    report = pipeline.run_pipeline(cfg)
    print(report.to_text(), end="")
    if any(r["status"] != "ok" for r in report.rows):
        raise StageFailure("one or more pipeline cells failed")


def cmd_report(args):
    if args.run:
        report = pipeline.read_report(args.run)
        print(report.to_text(), end="")
        ratios = {r["ratio"] for r in report.ok_rows() if r["method"] != "none" and r.get("sdr")}
        if len(ratios) >= 2:
            print(f"best ratio: {pipeline.best_ratio(report)}")
        return
    if not (args.retained and args.ledger):
        raise pipeline.ConfigError("report needs --run, or --retained with --ledger")
    kept = json.loads(Path(args.retained).read_text())["retained"]
    ledger = storage.read_ledger(args.ledger)
    sets = kept if isinstance(kept, dict) else {"all": kept}
    for name, ids in sets.items():
        removed, retained = pipeline.corruption_split(ids, list(ledger), ledger)
        print(f"{name}: retained {len(ids)}, clean {100 * pipeline.clean_fraction(ids, ledger):.1f}%, "
              f"corrupted removed/retained {removed:.3f}/{retained:.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attriclean", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON corpus spec")
    p.add_argument("--out", required=True)
    p.add_argument("--ledger", help="ground-truth ledger path (default <out>.ledger.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the per-target baseline models")
    p.add_argument("--corpus", required=True)
    p.add_argument("--refs", required=True, help="clean reference set (validation)")
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="unlearning attribution matrix and score table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=1)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("fad", help="per-song Fréchet distance scores and filtering")
    p.add_argument("--corpus", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fad)

    p = sub.add_parser("clsfilter", help="instrument-classifier baseline filtering")
    p.add_argument("--refs", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_clsfilter)

    p = sub.add_parser("filter", help="rank a score table / matrix and keep the top ratio")
    p.add_argument("--scores", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--mode", choices=("unified", "per-target"), default="unified")
    p.add_argument("--out")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("retrain", help="train on a retained subset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--retained", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="median SDR per target on an evaluation corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render a run report or score a retained set")
    p.add_argument("--run")
    p.add_argument("--retained")
    p.add_argument("--ledger")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "ratio", None) is not None and not 0.0 < args.ratio <= 1.0:
            raise pipeline.ConfigError("--ratio must be in (0, 1]")
        args.func(args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageFailure, FileNotFoundError, storage.FormatError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
