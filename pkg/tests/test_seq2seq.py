import math

import numpy as np
import pytest
import torch

from notetraj.errors import ConfigError, InputError
from notetraj.metrics import EvalQuery, map_at_k
from notetraj.records import TrajectoryPair, Visit
from notetraj.seq2seq import (
    BOS,
    EOS,
    PAD,
    SEP,
    TGT_SPECIALS,
    CodeVocab,
    NoteBank,
    Seq2SeqConfig,
    Seq2SeqTrainer,
    TrainConfig,
    TrajectoryModel,
    _rank_from_tokens,
    collate,
    decode_ranked,
    encode_pairs,
    encode_source,
    load_trajectory_model,
    save_trajectory_model,
    sequence_loss,
)

SMALL = dict(enc_layers=1, dec_layers=2, n_heads=2, hidden_dim=16, ff_dim=32, dropout=0.0, max_decode_len=24, seed=0)


def build(pairs, fusion="none", **kw):
    vocab = CodeVocab.from_pairs(pairs)
    cfg = Seq2SeqConfig(fusion=fusion, note_dim=8 if fusion != "none" else 0, **{**SMALL, **kw})
    return TrajectoryModel(cfg, vocab), vocab, cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        Seq2SeqConfig(hidden_dim=10, n_heads=4)
    with pytest.raises(ConfigError):
        Seq2SeqConfig(fusion="concat")
    with pytest.raises(ConfigError):
        Seq2SeqConfig(note_positional="rotary")
    with pytest.raises(ValueError):
        Seq2SeqConfig(fusion="sum", note_dim=4)


def test_vocab_order_and_targets(small_pairs):
    vocab = CodeVocab.from_pairs(small_pairs)
    assert vocab.target[: len(TGT_SPECIALS)] == list(TGT_SPECIALS)
    assert all(c.startswith("D") for c in vocab.labels)
    back = CodeVocab.from_dict(vocab.to_dict())
    assert back.source == vocab.source and back.target == vocab.target


def test_source_encoding_separates_visits(small_pairs):
    model, vocab, cfg = build(small_pairs)
    pair = max(small_pairs, key=lambda p: len(p.source_visits))
    ids = encode_source(pair, vocab, Seq2SeqConfig(**{**SMALL, "max_source_tokens": 10_000}))
    assert ids.count(SEP) == len(pair.source_visits) and ids[-1] == SEP
    assert len(encode_source(pair, vocab, Seq2SeqConfig(**{**SMALL, "max_source_tokens": 7}))) == 7


@pytest.mark.parametrize("fusion", ["none", "mean", "concat", "projection"])
def test_injection_lengths(small_pairs, random_bank, fusion):
    model, vocab, cfg = build(small_pairs, fusion)
    pair = next(p for p in small_pairs if len(p.source_visits) == 4)
    enc = encode_pairs([pair], vocab, cfg, random_bank)
    t = collate(enc, (6, 8) if fusion != "none" else None)
    x, pad = model.embed_and_inject(t["src"], t.get("notes"), t.get("visit_mask"))
    extra = {"none": 0, "mean": 1, "concat": 4, "projection": 4}[fusion]
    assert x.shape == (1, extra + t["src"].shape[1], cfg.hidden_dim)
    assert pad.shape == x.shape[:2] and not bool(pad.any())


def test_zero_width_fusion_matches_code_only(small_pairs):
    model, vocab, cfg = build(small_pairs)
    enc = encode_pairs(small_pairs[:8], vocab, cfg)
    logits = model(collate(enc))
    assert logits.shape[-1] == len(vocab.target) and bool(torch.isfinite(logits).all())
    with pytest.raises(ConfigError):
        build(small_pairs, "concat")[0].embed_and_inject(collate(enc)["src"])


def test_untrained_loss_near_log_label_count(small_pairs):
    model, vocab, cfg = build(small_pairs)
    model.eval()
    t = collate(encode_pairs(small_pairs[:64], vocab, cfg))
    with torch.no_grad():
        loss = float(sequence_loss(model(t), t["tgt_out"], 0.0))
    ref = math.log(len(vocab.target))
    assert abs(loss - ref) / ref < 0.15


def test_decoder_causality_exact(small_pairs):
    model, vocab, cfg = build(small_pairs)
    model.eval()
    gen = torch.Generator().manual_seed(0)
    enc = encode_pairs(small_pairs[:50], vocab, cfg)
    for e in enc:
        t = collate([e])
        memory, pad = model.encode(t["src"])
        tgt = t["tgt_in"]
        base = model.decode(memory, pad, tgt)
        for pos in range(1, tgt.shape[1]):
            changed = tgt.clone()
            changed[0, pos:] = torch.randint(len(TGT_SPECIALS), len(vocab.target), (tgt.shape[1] - pos,), generator=gen)
            out = model.decode(memory, pad, changed)
            assert torch.equal(out[:, :pos], base[:, :pos])


def test_train_step_errors_and_finite(small_pairs):
    model, vocab, cfg = build(small_pairs)
    trainer = Seq2SeqTrainer(model, TrainConfig(steps=3, batch_size=8, seed=0))
    with pytest.raises(InputError):
        trainer.train_step([])
    losses = trainer.fit(encode_pairs(small_pairs[:40], vocab, cfg))
    assert len(losses) == 3 and all(math.isfinite(x) for x in losses)


def test_rank_dedupe_rule():
    vocab = CodeVocab(["A", "B", "C", "D"], ["A", "B", "C", "D"])
    idx = vocab.tgt_index
    first = torch.log_softmax(torch.tensor([0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.9]), dim=0)
    pred = _rank_from_tokens([idx["A"], idx["B"], idx["A"], idx["C"]], [-0.1] * 4, first, vocab, 3)
    assert pred.codes == ["A", "B", "C"]
    full = _rank_from_tokens([idx["A"]], [-0.1], first, vocab, 10)
    assert full.codes == ["A", "D", "C", "B"]
    assert all(a >= b for a, b in zip(full.scores, full.scores[1:]))


def test_decode_unique_monotone_and_exhaustive(small_pairs):
    model, vocab, cfg = build(small_pairs)
    enc = encode_pairs(small_pairs[:20], vocab, cfg)
    for pred in decode_ranked(model, enc, vocab, k=vocab.label_count + 50):
        assert sorted(pred.codes) == sorted(vocab.labels)
        assert all(a >= b for a, b in zip(pred.scores, pred.scores[1:]))
    for pred in decode_ranked(model, enc, vocab, k=5):
        assert len(pred.codes) >= 5 and len(set(pred.codes)) == len(pred.codes)


def test_beam_decoding_runs(small_pairs):
    model, vocab, cfg = build(small_pairs, beam_width=3, max_decode_len=6)
    preds = decode_ranked(model, encode_pairs(small_pairs[:3], vocab, cfg), vocab, k=10)
    assert all(len(p.codes) >= 10 for p in preds)


def test_overfit_small_set_recovers_targets(small_pairs):
    pairs = small_pairs[:16]
    model, vocab, cfg = build(pairs, enc_layers=2, hidden_dim=32, ff_dim=64)
    data = encode_pairs(pairs, vocab, cfg)
    Seq2SeqTrainer(model, TrainConfig(steps=200, batch_size=16, peak_lr=3e-3, warmup_steps=20, seed=0)).fit(data)
    preds = decode_ranked(model, data, vocab, 20)
    assert map_at_k([EvalQuery(p.codes, frozenset(e.target_codes)) for p, e in zip(preds, data)], 20) > 0.9
    hit = sum(p.codes[: len(e.target_codes)] == e.target_codes for p, e in zip(preds, data))
    assert hit >= 12


def test_training_is_deterministic(small_pairs):
    runs = []
    for _ in range(2):
        model, vocab, cfg = build(small_pairs[:40])
        runs.append(Seq2SeqTrainer(model, TrainConfig(steps=5, batch_size=8, seed=3)).fit(encode_pairs(small_pairs[:40], vocab, cfg)))
    assert runs[0] == runs[1]


def test_note_scaler(small_pairs, random_bank):
    model, vocab, cfg = build(small_pairs, "concat")
    data = encode_pairs(small_pairs, vocab, cfg, random_bank)
    model.fit_note_scaler(data)
    flat = np.concatenate([e.notes for e in data])
    np.testing.assert_allclose(model.note_shift.numpy(), flat.mean(axis=0), atol=1e-5)
    np.testing.assert_allclose(model.note_scale.numpy(), flat.std(axis=0), rtol=1e-4)
    with pytest.raises(InputError):
        model.fit_note_scaler(encode_pairs(small_pairs, vocab, cfg))
    build(small_pairs)[0].fit_note_scaler([])


def test_missing_note_raises(small_pairs):
    with pytest.raises(InputError):
        NoteBank({}).stack_for(small_pairs[0])


def test_bank_save_load(tmp_path, random_bank, small_pairs):
    random_bank.save(tmp_path / "bank.npz")
    back = NoteBank.load(tmp_path / "bank.npz")
    np.testing.assert_array_equal(back.stack_for(small_pairs[0]), random_bank.stack_for(small_pairs[0]))


def test_checkpoint_round_trip(tmp_path, small_pairs, random_bank):
    model, vocab, cfg = build(small_pairs, "projection", note_positional="learned")
    model.fit_note_scaler(encode_pairs(small_pairs, vocab, cfg, random_bank))
    save_trajectory_model(tmp_path / "m.safetensors", model, vocab, steps=0)
    back, vocab2, header = load_trajectory_model(tmp_path / "m.safetensors")
    assert header["steps"] == 0 and vocab2.labels == vocab.labels
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def test_hand_built_pair_targets_framed():
    pair = TrajectoryPair("p:1", "p", [Visit(1, frozenset({"D1"}), frozenset({"P1"}), frozenset())], ["D2", "D1"], 2)
    vocab = CodeVocab.from_pairs([pair])
    enc = encode_pairs([pair], vocab, Seq2SeqConfig(**SMALL))[0]
    assert enc.tgt_ids[0] == BOS and enc.tgt_ids[-1] == EOS and PAD not in enc.tgt_ids
    assert [vocab.target[i] for i in enc.tgt_ids[1:-1]] == ["D2", "D1"]
