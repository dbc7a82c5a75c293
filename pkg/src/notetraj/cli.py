"""Command-line entry point: one subcommand per pipeline stage plus ``run`` for the whole thing."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODEL_NAMES, ExperimentConfig, load_config, preset_config, validate_config
from .errors import StageError

log = logging.getLogger("notetraj")


def _resolve_config(args, work_dir: str | None = None) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    if work_dir is not None:
        overrides["paths"] = {"work_dir": work_dir}
    if args.config:
        return load_config(args.config, overrides)
    return preset_config(
        args.preset or "desk", work_dir or "notetraj-run", seed=args.seed if args.seed is not None else 0
    )


def cmd_generate(args) -> None:
    from .synth import CohortGenerator, GeneratorConfig, write_cohort, write_mapping_tables

    cfg = _resolve_config(args)
    generator = CohortGenerator(GeneratorConfig(seed=cfg.seed, **cfg.synth.model_dump()))
    records = generator.generate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(records, out, args.debug_sidecar)
    mapping_dir = Path(args.mapping_dir) if args.mapping_dir else out.parent / "mappings"
    write_mapping_tables(generator, mapping_dir)
    print(f"wrote {len(records)} patients to {out}; mapping tables in {mapping_dir}")


def cmd_preprocess(args) -> None:
    from .preprocess import format_stats_table, load_mapping_dir, run_pipeline, visit_notes
    from .records import read_records, write_jsonl

    result = run_pipeline(
        read_records(args.inp), load_mapping_dir(args.mapping_dir), args.threshold,
        args.max_source_visits, args.pair_mode,
    )
    write_jsonl(args.out, result.pairs)
    if args.stats:
        Path(args.stats).write_text(json.dumps(result.stats, indent=1, sort_keys=True), encoding="utf-8")
    if args.corpus_out:
        Path(args.corpus_out).write_text("\n".join(visit_notes(result.cohort)) + "\n", encoding="utf-8")
    print(format_stats_table(result.stats))
    print(f"{len(result.pairs)} pairs written to {args.out}")


def cmd_pretrain_notes(args) -> None:
    from .experiment import pretrain_notes
    from .note_encoder import save_encoder

    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg.encoder.steps = args.steps
    texts = [line for line in Path(args.corpus).read_text(encoding="utf-8").splitlines() if line.strip()]
    result = pretrain_notes(cfg, texts, cfg.seed)
    final = result.losses[-1] if result.losses else None
    save_encoder(args.out, result.model, result.tokenizer, steps=len(result.losses), final_loss=final)
    print(f"pretrained {len(result.losses)} steps, final MLM loss {final}; saved {args.out}")


def _read_nli(path) -> list[tuple[str, str, str]]:
    from .records import iter_jsonl

    return [(r["premise"], r["hypothesis"], r["label"]) for r in iter_jsonl(path)]


def cmd_nli_finetune(args) -> None:
    from .note_encoder import NLIConfig, finetune_nli, load_encoder, save_encoder, synthetic_nli_pairs

    model, tokenizer, header = load_encoder(args.ckpt)
    pairs = _read_nli(args.pairs) if args.pairs else synthetic_nli_pairs(args.synthetic, seed=args.seed or 0)
    history = finetune_nli(model, tokenizer, pairs, NLIConfig(epochs=args.epochs, seed=args.seed or 0))
    out = args.out or args.ckpt
    extra = {k: v for k, v in header.items() if k not in ("kind", "config", "tokenizer", "has_nli_head")}
    save_encoder(out, model, tokenizer, **extra, nli=history)
    print(f"fine-tuned NLI head; saved {out}")


def _note_bank(note_ckpt, pairs, layers):
    from .note_encoder import load_encoder
    from .seq2seq import NoteBank

    model, tokenizer, _ = load_encoder(note_ckpt)
    return NoteBank.from_encoder(model, tokenizer, pairs, k=layers), model.config.hidden_dim


def cmd_train(args) -> None:
    from .experiment import seq2seq_config
    from .records import read_pairs
    from .seq2seq import CodeVocab, Seq2SeqTrainer, TrainConfig, TrajectoryModel, encode_pairs, save_trajectory_model

    cfg = _resolve_config(args)
    pairs = read_pairs(args.pairs)
    bank = None
    if args.fusion != "none":
        if not args.note_ckpt:
            raise StageError("train", f"--note-ckpt is required with --fusion {args.fusion}")
        bank, dim = _note_bank(args.note_ckpt, pairs, cfg.encoder.extract_layers)
        cfg.encoder.hidden_dim = dim
    vocab = CodeVocab.from_pairs(pairs)
    s2s = seq2seq_config(cfg, args.fusion, cfg.seed)
    model = TrajectoryModel(s2s, vocab)
    t = cfg.train
    trainer = Seq2SeqTrainer(model, TrainConfig(args.steps or t.steps, t.batch_size, t.peak_lr, t.warmup_steps, seed=cfg.seed))
    encoded = encode_pairs(pairs, vocab, s2s, bank)
    model.fit_note_scaler(encoded)
    losses = trainer.fit(encoded, log_every=50)
    save_trajectory_model(
        args.out, model, vocab, steps=len(losses), final_loss=losses[-1],
        note_ckpt=str(args.note_ckpt) if args.note_ckpt else None,
    )
    print(f"trained {len(losses)} steps, final loss {losses[-1]:.4f}; saved {args.out}")


def cmd_train_baseline(args) -> None:
    from .baselines import BaselineTrainConfig, BaselineTrainer, build_baseline, encode_sequences, save_baseline
    from .experiment import recurrent_config
    from .records import read_pairs
    from .seq2seq import CodeVocab

    cfg = _resolve_config(args)
    pairs = read_pairs(args.pairs)
    vocab = CodeVocab.from_pairs(pairs)
    rcfg = recurrent_config(cfg, args.model, vocab, cfg.seed)
    model = build_baseline(args.model, rcfg, vocab)
    b = cfg.baseline
    trainer = BaselineTrainer(model, BaselineTrainConfig(args.steps or b.steps, b.batch_size, b.lr, seed=cfg.seed))
    losses = trainer.fit(encode_sequences(pairs, vocab, rcfg), log_every=50)
    save_baseline(args.out, model, vocab, steps=len(losses), final_loss=losses[-1])
    print(f"trained {args.model} for {len(losses)} steps, final loss {losses[-1]:.4f}; saved {args.out}")


def cmd_predict(args) -> None:
    from .baselines import load_baseline
    from .checkpoint import read_header
    from .experiment import predict
    from .records import read_pairs, write_jsonl
    from .seq2seq import load_trajectory_model

    pairs = read_pairs(args.pairs)
    header = read_header(args.ckpt)
    bank = None
    if header.get("kind") == "baseline":
        model, vocab, _ = load_baseline(args.ckpt)
    else:
        model, vocab, header = load_trajectory_model(args.ckpt)
        if model.fusion is not None:
            note_ckpt = args.note_ckpt or header.get("note_ckpt")
            if not note_ckpt:
                raise StageError("predict", "this model injects notes; pass --note-ckpt")
            bank, _ = _note_bank(note_ckpt, pairs, model.config.note_layers)
    preds = predict(model, pairs, vocab, args.k, bank)
    write_jsonl(args.out, preds)
    print(f"wrote {len(preds)} ranked predictions to {args.out}")


def cmd_evaluate(args) -> None:
    from .experiment import score_predictions
    from .records import read_pairs, read_predictions
    from .report import MetricReport, emit_report, render_table

    ks = sorted({int(k) for k in args.k.split(",")})
    report = MetricReport()
    for path in args.pred:
        name = Path(path).name.split(".")[0]
        for k, (map_v, mar_v) in score_predictions(read_predictions(path), read_pairs(args.pairs), ks).items():
            report.add(name, 0, k, map_v, mar_v)
    emit_report(report, args.out)
    print(render_table(report), end="")


def cmd_run(args) -> None:
    from .experiment import run_experiment

    cfg = _resolve_config(args, work_dir=args.work_dir)
    if args.models:
        cfg.models = args.models.split(",")
    manifest = run_experiment(cfg)
    print((Path(cfg.paths.work_dir) / "report" / "table5.txt").read_text(encoding="utf-8"), end="")
    print(f"report digest {manifest.report_digest}")


def cmd_validate_config(args) -> int:
    result = validate_config(args.path)
    if isinstance(result, list):
        for err in result:
            print(err, file=sys.stderr)
        return 1
    print(f"{args.path}: valid ({result.preset} preset, models: {', '.join(result.models)})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--preset", choices=["tiny", "desk", "paper"], default=None)
    common.add_argument("--config", default=None, help="YAML experiment config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="notetraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthesize a patient cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-sidecar", default=None, help="also write latent states here")
    p.add_argument("--mapping-dir", default=None, help="where to write the code mapping tables")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", parents=[common], help="map, prune and pair a cohort")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--mapping-dir", required=True)
    p.add_argument("--threshold", type=int, default=5)
    p.add_argument("--max-source-visits", type=int, default=16)
    p.add_argument("--pair-mode", choices=["prefix", "single"], default="prefix")
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None)
    p.add_argument("--corpus-out", default=None, help="write normalized notes, one per line")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain-notes", parents=[common], help="MLM-pretrain the note encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_notes)

    p = sub.add_parser("nli-finetune", parents=[common], help="fine-tune an NLI head on the encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", default=None, help="JSONL with premise, hypothesis, label")
    p.add_argument("--synthetic", type=int, default=600, help="synthetic pair count when --pairs is absent")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out", default=None, help="defaults to overwriting --ckpt")
    p.set_defaults(func=cmd_nli_finetune)

    p = sub.add_parser("train", parents=[common], help="train the trajectory model")
    p.add_argument("--pairs", required=True)
    p.add_argument("--fusion", choices=["none", "mean", "concat", "projection"], default="concat")
    p.add_argument("--note-ckpt", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", parents=[common], help="train a recurrent baseline")
    p.add_argument("--model", choices=["doctorai", "ligdoctor"], required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("predict", parents=[common], help="rank next-visit diagnoses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--k", type=int, default=60)
    p.add_argument("--note-ckpt", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="MAP@K / MAR@K report for prediction files")
    p.add_argument("--pred", required=True, nargs="+")
    p.add_argument("--pairs", required=True)
    p.add_argument("--k", default="20,40,60")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", parents=[common], help="full cross-validated pipeline")
    p.add_argument("--work-dir", default=None)
    p.add_argument("--models", default=None, help=f"comma list from {', '.join(MODEL_NAMES)}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-config", parents=[common], help="report every config problem")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    stage_name = args.command
    try:
        code = args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: [{stage_name}] {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
