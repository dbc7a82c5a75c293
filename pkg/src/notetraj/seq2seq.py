"""Encoder-decoder transformer over medical-code sequences with injected note tokens.

Fused note tokens go through an affine adapter to the model width, are
prepended to the code-token embeddings, and every token gets a learned
modality embedding (code vs note). From there the encoder treats the sequence
uniformly. The decoder is causally masked and cross-attends to the encoder
output; targets are framed as ``<bos> codes... <eos>`` in a fixed
frequency order and trained with teacher forcing.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError
from .fusion import FusionStrategy, NoteFusion
from .layers import DecoderBlock, EncoderBlock, sinusoidal_table
from .preprocess import ordered_vocabulary, target_ordering
from .records import CODE_TYPES, RankedPrediction, TrajectoryPair

logger = logging.getLogger(__name__)

SRC_SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
TGT_SPECIALS = ("<pad>", "<bos>", "<eos>")
PAD, BOS, EOS, SEP, UNK = range(5)
MAX_NOTE_VISITS = 64


class CodeVocab:
    """Source token ids (all code types) and target label ids (diagnoses)."""

    def __init__(self, source_codes: list[str], labels: list[str]):
        self.source = list(SRC_SPECIALS) + list(source_codes)
        self.target = list(TGT_SPECIALS) + list(labels)
        self.src_index = {c: i for i, c in enumerate(self.source)}
        self.tgt_index = {c: i for i, c in enumerate(self.target)}
        if len(self.src_index) != len(self.source) or len(self.tgt_index) != len(self.target):
            raise ConfigError("code ids collide with special tokens")
        self.label_frequency = Counter({c: len(labels) - i for i, c in enumerate(labels)})

    @property
    def labels(self) -> list[str]:
        return self.target[len(TGT_SPECIALS):]

    @property
    def label_count(self) -> int:
        return len(self.target) - len(TGT_SPECIALS)

    @classmethod
    def from_pairs(cls, pairs: list[TrajectoryPair]) -> "CodeVocab":
        """Vocabulary from the distinct visits (sources and targets) in ``pairs``.

        Each code type is ordered by descending visit frequency, ties lexicographic.
        """
        visits = {}
        targets = {}
        for p in pairs:
            for v in p.source_visits:
                visits.setdefault((p.patient_id, v.timestamp), v)
            targets.setdefault((p.patient_id, p.target_timestamp), p.target_codes)
        counts = {ct: Counter() for ct in CODE_TYPES}
        for v in visits.values():
            for ct in CODE_TYPES:
                counts[ct].update(v.codes(ct))
        # final visits only ever appear as targets
        for key, codes in targets.items():
            if key not in visits:
                counts["diagnosis"].update(codes)
        vocabs = {ct: ordered_vocabulary(counts[ct]) for ct in CODE_TYPES}
        return cls.from_vocabularies(vocabs)

    @classmethod
    def from_vocabularies(cls, vocabs: dict[str, list[str]]) -> "CodeVocab":
        source = [c for ct in CODE_TYPES for c in vocabs[ct]]
        return cls(source, vocabs["diagnosis"])

    def to_dict(self) -> dict:
        return {"source": self.source[len(SRC_SPECIALS):], "labels": self.labels}

    @classmethod
    def from_dict(cls, d: dict) -> "CodeVocab":
        return cls(d["source"], d["labels"])

    def order_targets(self, codes) -> list[str]:
        return target_ordering(codes, self.label_frequency)


@dataclass
class Seq2SeqConfig:
    enc_layers: int = 3
    dec_layers: int = 3
    n_heads: int = 8
    hidden_dim: int = 256
    ff_dim: int = 512
    dropout: float = 0.1
    max_decode_len: int = 64
    max_source_tokens: int = 512
    code_types: tuple = CODE_TYPES
    fusion: str = "none"
    proj_dim: int | None = None
    note_layers: int = 6
    note_dim: int = 0
    # positional signal on note tokens: "none" | "sinusoidal" | "learned"
    note_positional: str = "none"
    label_smoothing: float = 0.1
    beam_width: int = 1
    seed: int = 0

    def __post_init__(self):
        self.code_types = tuple(self.code_types)
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        FusionStrategy(self.fusion)
        if self.note_positional not in ("none", "sinusoidal", "learned"):
            raise ConfigError("note_positional must be none, sinusoidal or learned")
        if self.fusion != "none" and self.note_dim <= 0:
            raise ConfigError("note_dim must be set when a fusion strategy is used")
        if not set(self.code_types) <= set(CODE_TYPES):
            raise ConfigError(f"code_types must be drawn from {CODE_TYPES}")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    max_grad_norm: float = 1.0
    seed: int = 0


@dataclass
class EncodedPair:
    pair_id: str
    src_ids: list[int]
    tgt_ids: list[int]  # <bos> labels <eos>
    notes: np.ndarray | None = None  # [V, L, d]
    target_codes: list[str] = field(default_factory=list)


def encode_source(pair: TrajectoryPair, vocab: CodeVocab, config: Seq2SeqConfig) -> list[int]:
    """Visit-ordered code ids with a separator after each visit; keeps the most recent tokens."""
    ids: list[int] = []
    for v in pair.source_visits:
        for ct in config.code_types:
            ids.extend(sorted(vocab.src_index.get(c, UNK) for c in v.codes(ct)))
        ids.append(SEP)
    return ids[-config.max_source_tokens:]


def encode_target(codes: list[str], vocab: CodeVocab, max_len: int) -> list[int]:
    ids = [vocab.tgt_index[c] for c in codes if c in vocab.tgt_index]
    return [BOS] + ids[: max_len - 1] + [EOS]


def encode_pairs(
    pairs: list[TrajectoryPair],
    vocab: CodeVocab,
    config: Seq2SeqConfig,
    note_bank: "NoteBank | None" = None,
) -> list[EncodedPair]:
    out = []
    for p in pairs:
        notes = note_bank.stack_for(p) if note_bank is not None and config.fusion != "none" else None
        out.append(
            EncodedPair(
                p.pair_id,
                encode_source(p, vocab, config),
                encode_target(p.target_codes, vocab, config.max_decode_len),
                notes,
                list(p.target_codes),
            )
        )
    return out


class NoteBank:
    """Per-visit pooled note representations keyed by (patient_id, timestamp): [L, d] each."""

    def __init__(self, vectors: dict[tuple[str, int], np.ndarray]):
        self.vectors = vectors

    def stack_for(self, pair: TrajectoryPair) -> np.ndarray:
        try:
            return np.stack([self.vectors[(pair.patient_id, v.timestamp)] for v in pair.source_visits])
        except KeyError as exc:
            raise InputError(f"no note representation for visit {exc.args[0]}") from None

    @classmethod
    def from_encoder(cls, model, tokenizer, pairs: list[TrajectoryPair], k: int = 6) -> "NoteBank":
        from .note_encoder import note_layer_embeddings

        keys, texts, seen = [], [], set()
        for p in pairs:
            for v in p.source_visits:
                key = (p.patient_id, v.timestamp)
                if key not in seen:
                    seen.add(key)
                    keys.append(key)
                    texts.append(v.note)
        vecs = note_layer_embeddings(model, tokenizer, texts, k=k) if texts else []
        return cls({key: vecs[i] for i, key in enumerate(keys)})

    def save(self, path: str | Path) -> None:
        keys = sorted(self.vectors)
        np.savez_compressed(
            path,
            patient_ids=np.array([k[0] for k in keys]),
            timestamps=np.array([k[1] for k in keys], dtype=np.int64),
            values=np.stack([self.vectors[k] for k in keys]) if keys else np.zeros((0, 0, 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "NoteBank":
        with np.load(path) as z:
            return cls({(str(p), int(t)): v for p, t, v in zip(z["patient_ids"], z["timestamps"], z["values"])})


def collate(batch: list[EncodedPair], note_shape: tuple[int, int] | None = None) -> dict:
    if not batch:
        raise InputError("empty batch")
    b = len(batch)
    s = max(len(e.src_ids) for e in batch)
    t = max(len(e.tgt_ids) for e in batch) - 1
    src = torch.full((b, s), PAD, dtype=torch.long)
    tgt_in = torch.full((b, t), PAD, dtype=torch.long)
    tgt_out = torch.full((b, t), PAD, dtype=torch.long)
    for i, e in enumerate(batch):
        src[i, : len(e.src_ids)] = torch.as_tensor(e.src_ids)
        tgt = torch.as_tensor(e.tgt_ids)
        tgt_in[i, : len(tgt) - 1] = tgt[:-1]
        tgt_out[i, : len(tgt) - 1] = tgt[1:]
    out = {"src": src, "tgt_in": tgt_in, "tgt_out": tgt_out}
    if note_shape is not None:
        v = max(e.notes.shape[0] for e in batch)
        notes = torch.zeros((b, v) + tuple(note_shape))
        mask = torch.zeros((b, v), dtype=torch.bool)
        for i, e in enumerate(batch):
            notes[i, : e.notes.shape[0]] = torch.as_tensor(e.notes)
            mask[i, : e.notes.shape[0]] = True
        out["notes"], out["visit_mask"] = notes, mask
    return out


class TrajectoryModel(nn.Module):
    def __init__(self, config: Seq2SeqConfig, vocab: CodeVocab):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        d = config.hidden_dim
        self.src_emb = nn.Embedding(len(vocab.source), d, padding_idx=PAD)
        self.src_pos = nn.Embedding(config.max_source_tokens, d)
        self.modality = nn.Embedding(2, d)
        self.fusion = None
        self.adapter = None
        if config.fusion != "none":
            self.fusion = NoteFusion(config.fusion, config.note_layers, config.note_dim, config.proj_dim)
            self.adapter = nn.Linear(self.fusion.out_dim, d)
            # per-(layer, dim) standardization of note features, fitted on training notes
            self.register_buffer("note_shift", torch.zeros(config.note_layers, config.note_dim))
            self.register_buffer("note_scale", torch.ones(config.note_layers, config.note_dim))
            if config.note_positional == "learned":
                self.note_pos = nn.Embedding(MAX_NOTE_VISITS, d)
            elif config.note_positional == "sinusoidal":
                self.register_buffer("note_pos_table", sinusoidal_table(MAX_NOTE_VISITS, d))
        self.encoder = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.ff_dim, config.dropout, norm_first=True)
            for _ in range(config.enc_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.tgt_emb = nn.Embedding(len(vocab.target), d, padding_idx=PAD)
        self.tgt_pos = nn.Embedding(config.max_decode_len + 2, d)
        self.decoder = nn.ModuleList(
            DecoderBlock(d, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, len(vocab.target))
        self.dropout = nn.Dropout(config.dropout)

    def embed_and_inject(self, src, notes=None, visit_mask=None):
        """Encoder input [B, T_notes + T_codes, d] and its padding mask."""
        b, s = src.shape
        pos = torch.arange(s, device=src.device)
        x = self.src_emb(src) + self.src_pos(pos)[None] + self.modality.weight[0]
        pad = src == PAD
        if self.fusion is None:
            return self.dropout(x), pad
        if notes is None or visit_mask is None:
            raise ConfigError("this model injects note tokens; notes and visit_mask are required")
        notes = (notes - self.note_shift) / self.note_scale
        tokens, token_pad = self.fusion(notes, visit_mask)
        n = self.adapter(tokens) + self.modality.weight[1]
        if self.config.note_positional == "learned":
            n = n + self.note_pos(torch.arange(n.shape[1], device=n.device))[None]
        elif self.config.note_positional == "sinusoidal":
            n = n + self.note_pos_table[: n.shape[1]][None]
        return self.dropout(torch.cat([n, x], dim=1)), torch.cat([token_pad, pad], dim=1)

    @torch.no_grad()
    def fit_note_scaler(self, data: list["EncodedPair"]) -> None:
        """Set the note standardizer from the notes in ``data``.

        Note embeddings share a large common component and differ from visit
        to visit by a few percent; without rescaling that variation is
        drowned out by the code embeddings.
        """
        if self.fusion is None:
            return
        stacks = [e.notes for e in data if e.notes is not None and len(e.notes)]
        if not stacks:
            raise InputError("no note stacks to fit the scaler on")
        flat = torch.as_tensor(np.concatenate(stacks), dtype=self.note_shift.dtype)
        self.note_shift.copy_(flat.mean(dim=0))
        self.note_scale.copy_(flat.std(dim=0, unbiased=False).clamp_min(1e-6))

    def encode(self, src, notes=None, visit_mask=None):
        x, pad = self.embed_and_inject(src, notes, visit_mask)
        for block in self.encoder:
            x = block(x, key_padding_mask=pad)
        return self.enc_norm(x), pad

    def decode(self, memory, memory_pad, tgt_in):
        t = tgt_in.shape[1]
        y = self.tgt_emb(tgt_in) + self.tgt_pos(torch.arange(t, device=tgt_in.device))[None]
        y = self.dropout(y)
        for block in self.decoder:
            y = block(y, memory, memory_padding_mask=memory_pad)
        return self.out(self.dec_norm(y))

    def forward(self, batch: dict) -> torch.Tensor:
        memory, pad = self.encode(batch["src"], batch.get("notes"), batch.get("visit_mask"))
        return self.decode(memory, pad, batch["tgt_in"])


def sequence_loss(logits, tgt_out, label_smoothing=0.1):
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        tgt_out.reshape(-1),
        ignore_index=PAD,
        label_smoothing=label_smoothing,
    )


class Seq2SeqTrainer:
    """Teacher-forced training with AdamW and a warmup / inverse-square-root schedule."""

    def __init__(self, model: TrajectoryModel, train_config: TrainConfig):
        self.model = model
        self.cfg = train_config
        self.opt = torch.optim.AdamW(
            model.parameters(), lr=train_config.peak_lr, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.0
        )
        w = max(1, train_config.warmup_steps)
        self.sched = torch.optim.lr_scheduler.LambdaLR(
            self.opt, lambda s: min((s + 1) / w, math.sqrt(w / (s + 1)))
        )
        self.step_count = 0
        self._gen = torch.Generator().manual_seed(train_config.seed)
        self._queue: list[list[int]] = []
        self.note_shape = (
            (model.config.note_layers, model.config.note_dim) if model.fusion is not None else None
        )

    def train_step(self, batch: list[EncodedPair]) -> float:
        if not batch:
            raise InputError("empty batch")
        self.model.train()
        tensors = collate(batch, self.note_shape)
        self.opt.zero_grad()
        loss = sequence_loss(self.model(tensors), tensors["tgt_out"], self.model.config.label_smoothing)
        loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.max_grad_norm)
        self.opt.step()
        self.sched.step()
        self.step_count += 1
        return float(loss.detach())

    def _next_batches(self, data: list[EncodedPair], bs: int) -> list[list[int]]:
        """One pass of shuffled, length-bucketed batches (less padding per batch)."""
        perm = torch.randperm(len(data), generator=self._gen).tolist()
        pool = bs * 16
        batches = []
        for start in range(0, len(perm), pool):
            chunk = sorted(perm[start:start + pool], key=lambda i: len(data[i].src_ids))
            batches += [chunk[j:j + bs] for j in range(0, len(chunk), bs)]
        order = torch.randperm(len(batches), generator=self._gen).tolist()
        return [batches[i] for i in order]

    def fit(self, data: list[EncodedPair], steps: int | None = None, log_every: int = 0) -> list[float]:
        steps = self.cfg.steps if steps is None else steps
        bs = min(self.cfg.batch_size, len(data))
        losses = []
        for step in range(steps):
            if not self._queue:
                self._queue = self._next_batches(data, bs)
            idx = self._queue.pop(0)
            losses.append(self.train_step([data[i] for i in idx]))
            if log_every and (step + 1) % log_every == 0:
                logger.info("seq2seq step %d loss %.4f", step + 1, losses[-1])
        return losses


def _rank_from_tokens(
    emitted: list[int], step_logprobs: list[float], first_logprobs: torch.Tensor, vocab: CodeVocab, k: int
) -> RankedPrediction:
    """Collapse duplicates (first occurrence wins) and pad with first-step order.

    Scores are cumulative log-probabilities, so they never increase along the list.
    """
    codes, scores, seen = [], [], set()
    cum = 0.0
    for tok, lp in zip(emitted, step_logprobs):
        cum += lp
        if tok in seen:
            continue
        seen.add(tok)
        codes.append(vocab.target[tok])
        scores.append(cum)
    want = min(k, vocab.label_count)
    if len(codes) < want:
        label_lp = first_logprobs[len(TGT_SPECIALS):]
        order = sorted(range(len(label_lp)), key=lambda i: (-float(label_lp[i]), i))
        for i in order:
            if len(codes) >= want:
                break
            tok = i + len(TGT_SPECIALS)
            if tok in seen:
                continue
            seen.add(tok)
            codes.append(vocab.target[tok])
            scores.append(cum + float(label_lp[i]))
    return RankedPrediction(codes, scores)


@torch.no_grad()
def _greedy(model: TrajectoryModel, tensors: dict, max_len: int):
    memory, pad = model.encode(tensors["src"], tensors.get("notes"), tensors.get("visit_mask"))
    b = memory.shape[0]
    seq = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    tokens = [[] for _ in range(b)]
    lps = [[] for _ in range(b)]
    first = None
    for _ in range(max_len):
        logits = model.decode(memory, pad, seq)[:, -1]
        logits[:, PAD] = float("-inf")
        logits[:, BOS] = float("-inf")
        logprobs = torch.log_softmax(logits, dim=-1)
        if first is None:
            first = logprobs.clone()
        nxt = logprobs.argmax(dim=-1)
        for i in range(b):
            if done[i]:
                continue
            tok = int(nxt[i])
            if tok == EOS:
                done[i] = True
            else:
                tokens[i].append(tok)
                lps[i].append(float(logprobs[i, tok]))
        if bool(done.all()):
            break
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    return tokens, lps, first


@torch.no_grad()
def _beam(model: TrajectoryModel, tensors: dict, max_len: int, width: int):
    memory, pad = model.encode(tensors["src"], tensors.get("notes"), tensors.get("visit_mask"))
    all_tokens, all_lps, firsts = [], [], []
    for i in range(memory.shape[0]):
        mem, mpad = memory[i:i + 1], pad[i:i + 1]
        beams = [([BOS], [], 0.0, False)]
        first = None
        for _ in range(max_len):
            candidates = []
            live = [bm for bm in beams if not bm[3]]
            if not live:
                break
            seq = torch.as_tensor([bm[0] for bm in live])
            logits = model.decode(mem.expand(len(live), -1, -1), mpad.expand(len(live), -1), seq)[:, -1]
            logits[:, PAD] = float("-inf")
            logits[:, BOS] = float("-inf")
            logprobs = torch.log_softmax(logits, dim=-1)
            if first is None:
                first = logprobs[0].clone()
            for (toks, lp, score, _), row in zip(live, logprobs):
                top = torch.topk(row, width)
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((toks + [tok], lp + [val], score + val, tok == EOS))
            candidates += [bm for bm in beams if bm[3]]
            beams = sorted(candidates, key=lambda c: -c[2])[:width]
        best = beams[0]
        toks = [t for t in best[0][1:] if t != EOS]
        all_tokens.append(toks)
        all_lps.append(best[1][: len(toks)])
        firsts.append(first)
    return all_tokens, all_lps, torch.stack(firsts)


def decode_ranked(
    model: TrajectoryModel,
    data: list[EncodedPair],
    vocab: CodeVocab,
    k: int,
    batch_size: int = 128,
) -> list[RankedPrediction]:
    """Greedy (or beam) decoding to a ranked, duplicate-free code list per pair.

    Codes are ranked in emission order; when fewer than ``k`` distinct codes
    were emitted, the remaining ranks are filled with unemitted labels in
    descending first-step probability.
    """
    model.eval()
    note_shape = (model.config.note_layers, model.config.note_dim) if model.fusion is not None else None
    out = []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        tensors = collate(chunk, note_shape)
        if model.config.beam_width > 1:
            tokens, lps, first = _beam(model, tensors, model.config.max_decode_len, model.config.beam_width)
        else:
            tokens, lps, first = _greedy(model, tensors, model.config.max_decode_len)
        for i, e in enumerate(chunk):
            pred = _rank_from_tokens(tokens[i], lps[i], first[i], vocab, k)
            pred.pair_id = e.pair_id
            out.append(pred)
    return out


def save_trajectory_model(path, model: TrajectoryModel, vocab: CodeVocab, **extra) -> None:
    header = {"kind": "trajectory", "config": asdict(model.config), "vocab": vocab.to_dict(), **extra}
    save_checkpoint(path, model.state_dict(), header)


def load_trajectory_model(path) -> tuple[TrajectoryModel, CodeVocab, dict]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "trajectory":
        raise InputError(f"{path} is not a trajectory-model checkpoint")
    vocab = CodeVocab.from_dict(header["vocab"])
    model = TrajectoryModel(Seq2SeqConfig(**header["config"]), vocab)
    model.load_state_dict(tensors)
    return model, vocab, header
