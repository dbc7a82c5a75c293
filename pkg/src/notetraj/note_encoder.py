"""Bidirectional ALiBi transformer encoder for clinical notes.

Covers the word-level tokenizer, masked-language-model pretraining, per-layer
representation extraction for fusion, and a 3-way NLI classification head.
There are no positional embeddings anywhere: attention logits get a symmetric
per-head linear distance penalty instead, so the model runs at any length.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError, StateError
from .layers import EncoderBlock

logger = logging.getLogger(__name__)

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD, UNK, CLS, SEP, MASK = range(len(SPECIALS))
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class NoteTokenizer:
    """Whitespace/punctuation tokenizer with a frequency-capped word vocabulary."""

    def __init__(self, vocab: list[str]):
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise InputError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts, max_vocab: int = 4000, min_freq: int = 1) -> "NoteTokenizer":
        counts = Counter(tok for t in texts for tok in cls.tokenize(t))
        words = sorted((w for w, n in counts.items() if n >= min_freq), key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + words[: max(0, max_vocab - len(SPECIALS))])

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str, add_cls: bool = True) -> list[int]:
        ids = [self.index.get(t, UNK) for t in self.tokenize(text)]
        return [CLS] + ids if add_cls else ids

    def encode_pair(self, premise: str, hypothesis: str) -> list[int]:
        return self.encode(premise) + [SEP] + self.encode(hypothesis, add_cls=False) + [SEP]


@dataclass
class EncoderConfig:
    n_layers: int = 6
    n_heads: int = 4
    hidden_dim: int = 128
    ff_dim: int = 512
    max_pretrain_len: int = 128
    vocab_size: int = 4000
    mask_prob: float = 0.30
    dropout: float = 0.0
    pooling: str = "mean"  # or "cls"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError("mask_prob must lie in (0, 1)")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError("pooling must be 'mean' or 'cls'")
        if min(self.n_layers, self.n_heads, self.vocab_size, self.max_pretrain_len) < 1:
            raise ConfigError("encoder sizes must be positive")


PAPER_ENCODER = dict(n_layers=12, n_heads=12, hidden_dim=768, ff_dim=3072, max_pretrain_len=512)


@dataclass
class OptimizerSchedule:
    """AdamW with linear warmup to ``peak_lr`` then cosine annealing to ``final_lr``."""

    warmup_steps: int = 100
    decay_steps: int = 200
    peak_lr: float = 5e-4
    final_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 1e-5

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.decay_steps

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        t = min(step - self.warmup_steps, self.decay_steps) / max(self.decay_steps, 1)
        return self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1 + math.cos(math.pi * t))

    def build(self, params) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LambdaLR]:
        opt = torch.optim.AdamW(
            params,
            lr=self.peak_lr,
            betas=(self.beta1, self.beta2),
            eps=self.eps,
            weight_decay=self.weight_decay,
        )
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: self.lr_at(s) / self.peak_lr)
        return opt, sched


# 80k steps were budgeted, but 33k warmup + 46k cosine is what the schedule specifies
PAPER_SCHEDULE = OptimizerSchedule(warmup_steps=33_000, decay_steps=46_000, peak_lr=5e-4, final_lr=1e-5)


def alibi_slopes(n_heads: int) -> torch.Tensor:
    """Geometric head slopes 2^(-8(h+1)/n_heads), h = 0..n_heads-1."""
    h = torch.arange(n_heads, dtype=torch.float64)
    return torch.pow(2.0, -8.0 * (h + 1) / n_heads)


def alibi_bias(n_heads: int, query_len: int, key_len: int) -> torch.Tensor:
    """Symmetric ALiBi bias ``-slope(h) * |i - j|`` of shape [n_heads, query_len, key_len]."""
    if min(n_heads, query_len, key_len) < 1:
        raise InputError("alibi_bias arguments must be >= 1")
    i = torch.arange(query_len, dtype=torch.float64)[:, None]
    j = torch.arange(key_len, dtype=torch.float64)[None, :]
    return -alibi_slopes(n_heads)[:, None, None] * (i - j).abs()


class NoteEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.emb_norm = nn.LayerNorm(d)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.ff_dim, config.dropout, norm_first=False)
            for _ in range(config.n_layers)
        )
        self.mlm_dense = nn.Linear(d, d)
        self.mlm_norm = nn.LayerNorm(d)
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.nli_head: nn.Linear | None = None
        gen = torch.Generator().manual_seed(config.seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                with torch.no_grad():
                    module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * 0.02)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    nn.init.zeros_(module.bias)

    def hidden_states(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Embedding output followed by every block output, each [B, T, d]."""
        x = self.emb_dropout(self.emb_norm(self.tok_emb(ids)))
        t = ids.shape[1]
        bias = alibi_bias(self.config.n_heads, t, t).to(x.dtype)[None]
        states = [x]
        for block in self.blocks:
            x = block(x, bias=bias, key_padding_mask=pad_mask)
            states.append(x)
        return states

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        h = self.mlm_norm(F.gelu(self.mlm_dense(hidden)))
        return h @ self.tok_emb.weight.T + self.mlm_bias

    def forward(self, ids, pad_mask=None):
        return self.mlm_logits(self.hidden_states(ids, pad_mask)[-1])

    def pool(self, hidden: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        if self.config.pooling == "cls":
            return hidden[:, 0]
        if pad_mask is None:
            return hidden.mean(dim=1)
        keep = (~pad_mask).to(hidden.dtype)[..., None]
        return (hidden * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)


@dataclass
class LayerStack:
    """Per-layer token representations of one sequence: [n_layers + 1, T, d]."""

    layers: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0] - 1


def _check_ids(ids, vocab_size: int) -> None:
    if len(ids) == 0:
        raise InputError("token sequence must not be empty")
    bad = [int(i) for i in ids if not 0 <= int(i) < vocab_size]
    if bad:
        raise InputError(f"token ids out of vocabulary range: {bad[:5]}")


@torch.no_grad()
def encode(tokens, model: NoteEncoder) -> LayerStack:
    _check_ids(tokens, model.config.vocab_size)
    was_training = model.training
    model.eval()
    ids = torch.as_tensor(list(tokens), dtype=torch.long)[None]
    states = model.hidden_states(ids)
    model.train(was_training)
    return LayerStack(torch.stack(states)[:, 0].numpy())


def extract_last_k_layers(stack: LayerStack, k: int = 6, pooling: str = "mean") -> np.ndarray:
    """Pool each of the last ``k`` layers to one vector: returns [k, d]."""
    if not 1 <= k <= stack.n_layers:
        raise ConfigError(f"k={k} must lie in [1, n_layers={stack.n_layers}]")
    last = stack.layers[-k:]
    return last[:, 0] if pooling == "cls" else last.mean(axis=1)


def _pad_batch(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    t = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), t), PAD, dtype=torch.long)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, ids == PAD


@torch.no_grad()
def note_layer_embeddings(
    model: NoteEncoder,
    tokenizer: NoteTokenizer,
    texts: list[str],
    k: int = 6,
    batch_size: int = 128,
    max_len: int | None = None,
) -> np.ndarray:
    """Pooled last-``k``-layer vectors for every note: [N, k, d] float32."""
    if not 1 <= k <= model.config.n_layers:
        raise ConfigError(f"k={k} must lie in [1, n_layers={model.config.n_layers}]")
    was_training = model.training
    model.eval()
    seqs = [tokenizer.encode(t)[:max_len] if max_len else tokenizer.encode(t) for t in texts]
    out = np.zeros((len(seqs), k, model.config.hidden_dim), dtype=np.float32)
    # group similar lengths to limit padding
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        ids, pad = _pad_batch([seqs[i] for i in idx])
        states = model.hidden_states(ids, pad)[-k:]
        pooled = torch.stack([model.pool(h, pad) for h in states], dim=1)
        out[idx] = pooled.numpy()
    model.train(was_training)
    return out


# ---------------------------------------------------------------------------
# masked language modelling

def mask_tokens(
    ids: torch.Tensor,
    mask_prob: float,
    vocab_size: int,
    generator: torch.Generator,
    eligible: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Select positions with probability ``mask_prob``; of those 80% -> [MASK], 10% random, 10% kept.

    Returns (inputs, labels) with labels = -100 at unselected positions.
    """
    if eligible is None:
        eligible = ids >= len(SPECIALS)
    selected = (torch.rand(ids.shape, generator=generator) < mask_prob) & eligible
    labels = torch.where(selected, ids, torch.full_like(ids, -100))
    roll = torch.rand(ids.shape, generator=generator)
    random_ids = torch.randint(len(SPECIALS), vocab_size, ids.shape, generator=generator)
    inputs = ids.clone()
    inputs[selected & (roll < 0.8)] = MASK
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    inputs[swap] = random_ids[swap]
    return inputs, labels


def mlm_loss(model: NoteEncoder, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    pad = inputs == PAD
    logits = model(inputs, pad)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)


def mlm_pretrain_step(
    model: NoteEncoder,
    batch: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    scheduler=None,
    max_grad_norm: float | None = 1.0,
) -> float | None:
    """One optimisation step. Returns the loss, or None when the batch was skipped.

    A batch whose random selection is empty is re-drawn once before being skipped.
    """
    if batch.numel() == 0:
        raise InputError("empty batch")
    cfg = model.config
    inputs, labels = mask_tokens(batch, cfg.mask_prob, cfg.vocab_size, generator)
    if not (labels != -100).any():
        inputs, labels = mask_tokens(batch, cfg.mask_prob, cfg.vocab_size, generator)
        if not (labels != -100).any():
            return None
    model.train()
    optimizer.zero_grad()
    loss = mlm_loss(model, inputs, labels)
    loss.backward()
    if max_grad_norm:
        nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return float(loss.detach())


def pack_corpus(tokenizer: NoteTokenizer, texts: list[str], seq_len: int) -> torch.Tensor:
    """Concatenate ``[CLS] note [SEP]`` streams and cut into [N, seq_len] chunks."""
    stream: list[int] = []
    for t in texts:
        stream.extend(tokenizer.encode(t))
        stream.append(SEP)
    n = len(stream) // seq_len
    if n == 0:
        stream = stream + [PAD] * (seq_len - len(stream))
        n = 1
    return torch.as_tensor(stream[: n * seq_len], dtype=torch.long).view(n, seq_len)


def pretrain_mlm(
    model: NoteEncoder,
    chunks: torch.Tensor,
    steps: int,
    batch_size: int,
    schedule: OptimizerSchedule,
    seed: int = 0,
    log_every: int = 0,
) -> list[float]:
    """Run ``steps`` MLM updates over random batches of ``chunks``; returns the loss trajectory."""
    gen = torch.Generator().manual_seed(seed)
    opt, sched = schedule.build(model.parameters())
    losses = []
    for step in range(steps):
        idx = torch.randint(0, chunks.shape[0], (min(batch_size, chunks.shape[0]),), generator=gen)
        loss = mlm_pretrain_step(model, chunks[idx], opt, gen, sched)
        if loss is None:
            continue
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            logger.info("mlm step %d loss %.4f lr %.2e", step + 1, loss, sched.get_last_lr()[0])
    return losses


@torch.no_grad()
def evaluate_mlm(model: NoteEncoder, chunks: torch.Tensor, seed: int = 0, batch_size: int = 32) -> float:
    """Mean per-token cross-entropy over masked positions, with a fixed masking draw."""
    gen = torch.Generator().manual_seed(seed)
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    cfg = model.config
    for start in range(0, chunks.shape[0], batch_size):
        inputs, labels = mask_tokens(chunks[start:start + batch_size], cfg.mask_prob, cfg.vocab_size, gen)
        logits = model(inputs, inputs == PAD)
        sel = labels != -100
        total += float(F.cross_entropy(logits[sel], labels[sel], reduction="sum"))
        count += int(sel.sum())
    model.train(was_training)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# natural-language inference head

NLI_LABELS = ("entailment", "contradiction", "neutral")


@dataclass
class NLIConfig:
    lr_backbone: float = 2e-5
    lr_head: float = 2e-4
    weight_decay: float = 1e-6
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-6
    batch_size: int = 64
    max_grad_norm: float = 1.0
    warmup_epochs: int = 5
    epochs: int = 40
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0


def attach_nli_head(model: NoteEncoder, seed: int = 0) -> nn.Linear:
    head = nn.Linear(model.config.hidden_dim, len(NLI_LABELS))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen) * 0.02)
        head.bias.zero_()
    model.nli_head = head.to(model.tok_emb.weight.dtype)
    return model.nli_head


def nli_logits(model: NoteEncoder, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    if model.nli_head is None:
        raise StateError("model has no NLI head; call attach_nli_head or load a fine-tuned checkpoint")
    hidden = model.hidden_states(ids, pad_mask)[-1]
    return model.nli_head(model.pool(hidden, pad_mask))


@torch.no_grad()
def nli_classify(model: NoteEncoder, tokenizer: NoteTokenizer, premise: str, hypothesis: str):
    """Return (label, {label: probability})."""
    was_training = model.training
    model.eval()
    ids, pad = _pad_batch([tokenizer.encode_pair(premise, hypothesis)])
    probs = torch.softmax(nli_logits(model, ids, pad).double(), dim=-1)[0]
    model.train(was_training)
    scores = {lab: float(p) for lab, p in zip(NLI_LABELS, probs)}
    return NLI_LABELS[int(probs.argmax())], scores


def finetune_nli(
    model: NoteEncoder,
    tokenizer: NoteTokenizer,
    examples: list[tuple[str, str, str]],
    config: NLIConfig = NLIConfig(),
) -> dict:
    """Fine-tune backbone and head with separate learning rates and early stopping.

    Linear warmup over ``warmup_epochs`` then linear decay; gradient-norm
    clipping; stops after ``patience`` epochs without validation-loss gains and
    restores the best weights.
    """
    if model.nli_head is None:
        attach_nli_head(model, config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    perm = torch.randperm(len(examples), generator=gen).tolist()
    n_val = max(1, int(len(examples) * config.val_fraction))
    val = [examples[i] for i in perm[:n_val]]
    train = [examples[i] for i in perm[n_val:]]

    def tensors(rows):
        ids, pad = _pad_batch([tokenizer.encode_pair(p, h) for p, h, _ in rows])
        y = torch.as_tensor([NLI_LABELS.index(lab) for _, _, lab in rows])
        return ids, pad, y

    head_params = list(model.nli_head.parameters())
    head_ids = {id(p) for p in head_params}
    backbone = [p for p in model.parameters() if id(p) not in head_ids]
    opt = torch.optim.AdamW(
        [{"params": backbone, "lr": config.lr_backbone}, {"params": head_params, "lr": config.lr_head}],
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total - step) / max(total - warmup, 1))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    val_ids, val_pad, val_y = tensors(val)
    best = {"val_loss": math.inf, "epoch": -1, "state": None}
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        for start in range(0, len(order), config.batch_size):
            ids, pad, y = tensors([train[i] for i in order[start:start + config.batch_size]])
            opt.zero_grad()
            loss = F.cross_entropy(nli_logits(model, ids, pad), y)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            opt.step()
            sched.step()
        model.eval()
        with torch.no_grad():
            logits = nli_logits(model, val_ids, val_pad)
            val_loss = float(F.cross_entropy(logits, val_y))
            val_acc = float((logits.argmax(-1) == val_y).double().mean())
        history.append({"epoch": epoch, "val_loss": val_loss, "val_accuracy": val_acc})
        if val_loss < best["val_loss"]:
            best = {"val_loss": val_loss, "epoch": epoch, "val_accuracy": val_acc,
                    "state": {k: v.clone() for k, v in model.state_dict().items()}}
        elif epoch - best["epoch"] >= config.patience:
            break
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    return {"best_epoch": best["epoch"], "val_loss": best["val_loss"],
            "val_accuracy": best.get("val_accuracy"), "history": history}


_FINDINGS = [
    "chest pain", "shortness of breath", "fever", "a cough", "nausea", "a headache",
    "abdominal pain", "a rash", "dizziness", "back pain", "fatigue", "swelling of the legs",
]
_SUBJECTS = ["the patient", "she", "he", "the pt"]
_NEUTRAL = [
    "family visited in the afternoon", "the room was moved to the third floor",
    "lunch was served late today", "the chart was updated by the night team",
    "insurance forms were completed", "a social work consult was requested",
]


def synthetic_nli_pairs(n: int, seed: int = 0) -> list[tuple[str, str, str]]:
    """Lexically separable premise/hypothesis pairs.

    Entailment repeats the premise, contradiction negates it, neutral pairs it
    with an unrelated logistics sentence.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        subj = _SUBJECTS[rng.integers(len(_SUBJECTS))]
        finding = _FINDINGS[rng.integers(len(_FINDINGS))]
        premise = f"{subj} reports {finding}"
        label = NLI_LABELS[i % 3]
        if label == "entailment":
            hyp = premise
        elif label == "contradiction":
            hyp = f"{subj} denies {finding}"
        else:
            hyp = _NEUTRAL[rng.integers(len(_NEUTRAL))]
        rows.append((premise, hyp, label))
    return rows


# ---------------------------------------------------------------------------
# checkpoints

def save_encoder(path: str | Path, model: NoteEncoder, tokenizer: NoteTokenizer, **extra) -> None:
    header = {
        "kind": "note_encoder",
        "config": asdict(model.config),
        "tokenizer": tokenizer.vocab,
        "has_nli_head": model.nli_head is not None,
        **extra,
    }
    save_checkpoint(path, model.state_dict(), header)


def load_encoder(path: str | Path) -> tuple[NoteEncoder, NoteTokenizer, dict]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "note_encoder":
        raise InputError(f"{path} is not a note-encoder checkpoint")
    model = NoteEncoder(EncoderConfig(**header["config"]))
    if header.get("has_nli_head"):
        attach_nli_head(model)
    model.load_state_dict(tensors)
    return model, NoteTokenizer(header["tokenizer"]), header


@dataclass
class PretrainResult:
    model: NoteEncoder
    tokenizer: NoteTokenizer
    losses: list[float] = field(default_factory=list)


def pretrain_from_texts(
    texts: list[str],
    config: EncoderConfig,
    steps: int,
    batch_size: int = 32,
    schedule: OptimizerSchedule | None = None,
    max_vocab: int = 4000,
) -> PretrainResult:
    """Build a tokenizer over ``texts``, instantiate an encoder and pretrain it."""
    tokenizer = NoteTokenizer.build(texts, max_vocab=max_vocab)
    cfg = EncoderConfig(**{**asdict(config), "vocab_size": len(tokenizer)})
    model = NoteEncoder(cfg)
    if schedule is None:
        warm = max(1, steps // 10)
        schedule = OptimizerSchedule(warmup_steps=warm, decay_steps=max(steps - warm, 1))
    chunks = pack_corpus(tokenizer, texts, cfg.max_pretrain_len)
    losses = pretrain_mlm(model, chunks, steps, batch_size, schedule, seed=cfg.seed)
    return PretrainResult(model, tokenizer, losses)
