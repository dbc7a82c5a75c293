"""End-to-end runs: generate, preprocess, k-fold train/predict/evaluate, report and manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import tempfile
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .baselines import (
    BaselineTrainConfig,
    BaselineTrainer,
    build_baseline,
    doctor_ai_config,
    encode_sequences,
    lig_doctor_config,
    predict_baseline,
)
from .config import FUSION_OF, ExperimentConfig, dump_config
from .errors import StageError
from .metrics import EvalQuery, kfold_split, map_at_k, mar_at_k
from .note_encoder import (
    EncoderConfig,
    NLIConfig,
    OptimizerSchedule,
    attach_nli_head,
    finetune_nli,
    pretrain_from_texts,
    save_encoder,
    synthetic_nli_pairs,
)
from .preprocess import load_mapping_dir, normalize_note_text, run_pipeline
from .records import RankedPrediction, TrajectoryPair, dumps, write_jsonl
from .report import MetricReport, emit_report
from .seq2seq import (
    CodeVocab,
    NoteBank,
    Seq2SeqConfig,
    Seq2SeqTrainer,
    TrainConfig,
    TrajectoryModel,
    decode_ranked,
    encode_pairs,
)
from .synth import CohortGenerator, GeneratorConfig, write_cohort, write_mapping_tables

logger = logging.getLogger(__name__)


def derive_seed(master: int, stage: str, *index: int) -> int:
    """Independent 31-bit seed for ``stage`` (and optional fold/model indices) from the master seed."""
    ss = np.random.SeedSequence([master, zlib.crc32(stage.encode()), *index])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


@contextmanager
def stage(name: str, timings: dict[str, float]):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


# model construction from config sections


def encoder_config(cfg: ExperimentConfig, seed: int) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(
        n_layers=e.n_layers, n_heads=e.n_heads, hidden_dim=e.hidden_dim, ff_dim=e.ff_dim,
        max_pretrain_len=e.max_pretrain_len, pooling=e.pooling, seed=seed,
    )


def seq2seq_config(cfg: ExperimentConfig, fusion: str, seed: int) -> Seq2SeqConfig:
    m = cfg.model
    return Seq2SeqConfig(
        enc_layers=m.enc_layers, dec_layers=m.dec_layers, n_heads=m.n_heads, hidden_dim=m.hidden_dim,
        ff_dim=m.ff_dim, dropout=m.dropout, max_decode_len=m.max_decode_len,
        max_source_tokens=m.max_source_tokens, code_types=tuple(m.code_types), fusion=fusion,
        proj_dim=m.proj_dim, note_layers=cfg.encoder.extract_layers,
        note_dim=cfg.encoder.hidden_dim if fusion != "none" else 0,
        note_positional=m.note_positional, label_smoothing=m.label_smoothing,
        beam_width=m.beam_width, seed=seed,
    )


def pretrain_notes(cfg: ExperimentConfig, texts: list[str], seed: int):
    e = cfg.encoder
    warm = max(1, e.steps // 10)
    schedule = OptimizerSchedule(warmup_steps=warm, decay_steps=max(1, e.steps - warm), peak_lr=e.peak_lr)
    result = pretrain_from_texts(texts, encoder_config(cfg, seed), e.steps, e.batch_size, schedule, e.max_vocab)
    if cfg.nli.enabled:
        attach_nli_head(result.model, seed=seed)
        pairs = synthetic_nli_pairs(cfg.nli.n_pairs, seed=seed)
        finetune_nli(result.model, result.tokenizer, pairs, NLIConfig(epochs=cfg.nli.epochs, seed=seed))
    return result


def train_trajectory(
    cfg: ExperimentConfig, model_name: str, pairs: list[TrajectoryPair], vocab: CodeVocab,
    bank: NoteBank | None, seed: int,
) -> TrajectoryModel:
    s2s = seq2seq_config(cfg, FUSION_OF[model_name], seed)
    model = TrajectoryModel(s2s, vocab)
    t = cfg.train
    trainer = Seq2SeqTrainer(model, TrainConfig(t.steps, t.batch_size, t.peak_lr, t.warmup_steps, seed=seed))
    data = encode_pairs(pairs, vocab, s2s, bank)
    model.fit_note_scaler(data)
    trainer.fit(data, log_every=100)
    return model


def recurrent_config(cfg: ExperimentConfig, name: str, vocab: CodeVocab, seed: int):
    types = tuple(cfg.model.code_types)
    if name == "doctorai":
        return doctor_ai_config(cfg.baseline.scale, code_types=types, seed=seed)
    return lig_doctor_config(cfg.baseline.scale, label_count=vocab.label_count, code_types=types, seed=seed)


def train_recurrent(cfg: ExperimentConfig, name: str, pairs: list[TrajectoryPair], vocab: CodeVocab, seed: int):
    rcfg = recurrent_config(cfg, name, vocab, seed)
    model = build_baseline(name, rcfg, vocab)
    b = cfg.baseline
    trainer = BaselineTrainer(model, BaselineTrainConfig(b.steps, b.batch_size, b.lr, seed=seed))
    trainer.fit(encode_sequences(pairs, vocab, rcfg), log_every=100)
    return model


def predict(model, pairs, vocab, k: int, bank: NoteBank | None = None) -> list[RankedPrediction]:
    if isinstance(model, TrajectoryModel):
        return decode_ranked(model, encode_pairs(pairs, vocab, model.config, bank), vocab, k)
    return predict_baseline(model, encode_sequences(pairs, vocab, model.config), vocab, k)


def score_predictions(preds: list[RankedPrediction], pairs: list[TrajectoryPair], ks: list[int]) -> dict[int, tuple[float, float]]:
    """{K: (MAP@K, MAR@K)} joining predictions to pairs by pair id."""
    by_id = {p.pair_id: p for p in preds}
    queries = [EvalQuery(by_id[p.pair_id].codes, frozenset(p.target_codes)) for p in pairs]
    return {k: (map_at_k(queries, k), mar_at_k(queries, k)) for k in ks}


@dataclass
class RunManifest:
    config: dict
    digests: dict[str, str]
    timings: dict[str, float]
    versions: dict[str, str]
    report_digest: str
    fold_sizes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _versions() -> dict[str, str]:
    return {
        "notetraj": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Run every stage for every fold and write the report plus ``manifest.json`` under work_dir."""
    work = Path(cfg.paths.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    outputs: list[Path] = []

    with stage("generate", timings):
        gcfg = GeneratorConfig(seed=derive_seed(cfg.seed, "generate"), **cfg.synth.model_dump())
        generator = CohortGenerator(gcfg)
        records = generator.generate()
        cohort_path = work / "data" / "cohort.jsonl"
        cohort_path.parent.mkdir(parents=True, exist_ok=True)
        write_cohort(records, cohort_path, work / "data" / "cohort.latent.jsonl")
        outputs += [cohort_path, work / "data" / "cohort.latent.jsonl"]
        mapping_dir = Path(cfg.paths.mapping_dir) if cfg.paths.mapping_dir else work / "mappings"
        if not cfg.paths.mapping_dir:
            write_mapping_tables(generator, mapping_dir)

    with stage("preprocess", timings):
        tables = load_mapping_dir(mapping_dir)
        result = run_pipeline(
            records, tables, cfg.preprocess.threshold, cfg.preprocess.max_source_visits, cfg.preprocess.pair_mode
        )
        pairs_path = work / "data" / "pairs.jsonl"
        write_jsonl(pairs_path, result.pairs)
        stats_path = work / "data" / "stats.json"
        stats_path.write_text(json.dumps(result.stats, indent=1, sort_keys=True), encoding="utf-8")
        outputs += [pairs_path, stats_path]

    with stage("split", timings):
        folds = kfold_split(
            [p.patient_id for p in result.cohort.patients], cfg.eval.folds, derive_seed(cfg.seed, "split")
        )
        folds_path = work / "data" / "folds.json"
        folds_path.write_text(dumps(folds), encoding="utf-8")
        outputs.append(folds_path)

    report = MetricReport(level=cfg.eval.level)
    k_max = max(cfg.eval.ks)
    fold_sizes = {}
    for fold in range(cfg.eval.folds):
        fold_dir = work / f"fold{fold}"
        fold_dir.mkdir(exist_ok=True)
        train = [p for p in result.pairs if folds[p.patient_id] != fold]
        test = [p for p in result.pairs if folds[p.patient_id] == fold]
        fold_sizes[f"fold{fold}"] = len(test)
        if not train or not test:
            raise StageError("split", f"fold {fold} has {len(train)} train and {len(test)} test pairs")
        vocab = CodeVocab.from_pairs(train)
        bank = None
        if cfg.uses_notes():
            with stage("pretrain-notes", timings):
                # the encoder sees notes of training-fold patients only
                texts = [
                    v.note for p in result.cohort.patients if folds[p.patient_id] != fold for v in p.visits
                ]
                texts = [normalize_note_text(t) for t in texts]
                enc = pretrain_notes(cfg, texts, derive_seed(cfg.seed, "pretrain-notes", fold))
                enc_path = fold_dir / "note_encoder.safetensors"
                save_encoder(enc_path, enc.model, enc.tokenizer, final_loss=enc.losses[-1] if enc.losses else None)
                bank = NoteBank.from_encoder(enc.model, enc.tokenizer, result.pairs, k=cfg.encoder.extract_layers)
                outputs.append(enc_path)
        for mi, name in enumerate(cfg.models):
            seed = derive_seed(cfg.seed, "train", fold, mi)
            with stage("train", timings):
                if name in FUSION_OF:
                    model = train_trajectory(cfg, name, train, vocab, bank, seed)
                else:
                    model = train_recurrent(cfg, name, train, vocab, seed)
            with stage("predict", timings):
                preds = predict(model, test, vocab, k_max, bank)
                pred_path = fold_dir / f"{name}.pred.jsonl"
                write_jsonl(pred_path, preds)
                outputs.append(pred_path)
            with stage("evaluate", timings):
                for k, (map_v, mar_v) in score_predictions(preds, test, cfg.eval.ks).items():
                    report.add(name, fold, k, map_v, mar_v)
            logger.info("fold %d %s done", fold, name)

    with stage("report", timings):
        paths = emit_report(report, work / "report")
        outputs += [paths["csv"], paths["txt"], paths["json"]]

    manifest = RunManifest(
        config=json.loads(json.dumps(cfg.model_dump(mode="json"))),
        digests={str(p.relative_to(work)): file_digest(p) for p in outputs},
        timings={k: round(v, 3) for k, v in timings.items()},
        versions=_versions(),
        report_digest=file_digest(paths["json"]),
        fold_sizes=fold_sizes,
    )
    atomic_write_text(work / "config.echo.yaml", dump_config(cfg))
    atomic_write_text(work / "manifest.json", manifest.to_json())
    return manifest
