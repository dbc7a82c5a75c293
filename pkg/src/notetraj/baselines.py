"""Recurrent reference predictors over per-visit multi-hot code vectors.

``DoctorAI`` runs a single GRU over visits and scores the next visit's labels
at every step; the last step is the prediction. ``LIGDoctor`` runs a
bidirectional minimal gated unit (MGU), concatenates the two final states and
maps them through two affine layers to one label distribution.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError
from .records import CODE_TYPES, RankedPrediction, TrajectoryPair
from .seq2seq import CodeVocab

logger = logging.getLogger(__name__)

CELL_TYPES = ("gru", "mgu")


@dataclass
class RecurrentConfig:
    cell_type: str = "gru"
    hidden_dim: int = 64
    embed_dim: int = 64
    bidirectional: bool = False
    dropout: float = 0.5
    code_types: tuple = CODE_TYPES
    max_visits: int = 64
    seed: int = 0

    def __post_init__(self):
        self.code_types = tuple(self.code_types)
        if self.cell_type not in CELL_TYPES:
            raise ConfigError(f"cell_type must be one of {CELL_TYPES}")
        if self.hidden_dim <= 0 or self.embed_dim <= 0:
            raise ConfigError("hidden_dim and embed_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def doctor_ai_config(scale: str = "desk", **overrides) -> RecurrentConfig:
    dims = {"desk": 64, "paper": 2000}[scale]
    base = dict(cell_type="gru", hidden_dim=dims, embed_dim=dims, bidirectional=False, dropout=0.5)
    return RecurrentConfig(**{**base, **overrides})


def lig_doctor_config(scale: str = "desk", label_count: int = 714, **overrides) -> RecurrentConfig:
    # the published setting ties the hidden width to the label count
    dims = {"desk": 64, "paper": label_count}[scale]
    base = dict(cell_type="mgu", hidden_dim=dims, embed_dim=dims, bidirectional=True, dropout=0.0)
    return RecurrentConfig(**{**base, **overrides})


class MGUCell(nn.Module):
    """Minimal gated unit: one forget gate, no separate reset/update gates.

    f = sigmoid(W_f x + U_f h + b_f)
    c = tanh(W_h x + U_h (f * h) + b_h)
    h' = (1 - f) * h + f * c
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.x2f = nn.Linear(input_dim, hidden_dim)
        self.h2f = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.x2c = nn.Linear(input_dim, hidden_dim)
        self.h2c = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        f = torch.sigmoid(self.x2f(x) + self.h2f(h))
        c = torch.tanh(self.x2c(x) + self.h2c(f * h))
        return (1 - f) * h + f * c


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _run_cell(cell, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Step ``cell`` over [B, V, E]; padded steps carry the previous state. Returns all states and the last."""
    b, v, _ = x.shape
    h = x.new_zeros((b, cell.hidden_size if isinstance(cell, nn.GRUCell) else cell.hidden_dim))
    states = []
    for t in range(v):
        nh = cell(x[:, t], h)
        keep = mask[:, t, None].to(x.dtype)
        h = keep * nh + (1 - keep) * h
        states.append(h)
    return torch.stack(states, dim=1), h


def _reverse_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row's first ``length`` steps, leaving padding at the end."""
    v = x.shape[1]
    idx = torch.arange(v)[None].expand(x.shape[0], v)
    rev = (lengths[:, None] - 1 - idx).clamp_min(0)
    rev = torch.where(idx < lengths[:, None], rev, idx)
    return torch.gather(x, 1, rev[..., None].expand_as(x))


class _RecurrentBase(nn.Module):
    kind = ""

    def __init__(self, config: RecurrentConfig, input_dim: int, label_count: int):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.input_dim = input_dim
        self.label_count = label_count
        self.embed = nn.Linear(input_dim, config.embed_dim)
        cell_cls = nn.GRUCell if config.cell_type == "gru" else MGUCell
        self.cell = cell_cls(config.embed_dim, config.hidden_dim)

    def _embed(self, visits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if visits.shape[1] == 0 or not bool(mask.any(dim=1).all()):
            raise InputError("every sequence needs at least one visit")
        return torch.relu(self.embed(visits))

    def scores(self, visits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Prediction distribution over labels for the visit after the last one: [B, labels]."""
        return torch.softmax(self.logits(visits, mask), dim=-1)


class DoctorAI(_RecurrentBase):
    kind = "doctorai"

    def __init__(self, config: RecurrentConfig, input_dim: int, label_count: int):
        super().__init__(config, input_dim, label_count)
        self.dropout = nn.Dropout(config.dropout)
        self.out = nn.Linear(config.hidden_dim, label_count)

    def step_logits(self, visits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Per-step logits [B, V, labels]; step t scores visit t + 1."""
        states, _ = _run_cell(self.cell, self._embed(visits, mask), mask)
        return self.out(self.dropout(states))

    def step_scores(self, visits, mask) -> torch.Tensor:
        return torch.softmax(self.step_logits(visits, mask), dim=-1)

    def logits(self, visits, mask) -> torch.Tensor:
        steps = self.step_logits(visits, mask)
        last = mask.sum(dim=1) - 1
        return steps[torch.arange(steps.shape[0]), last]


class LIGDoctor(_RecurrentBase):
    kind = "ligdoctor"

    def __init__(self, config: RecurrentConfig, input_dim: int, label_count: int):
        super().__init__(config, input_dim, label_count)
        cell_cls = nn.GRUCell if config.cell_type == "gru" else MGUCell
        self.cell_bwd = cell_cls(config.embed_dim, config.hidden_dim) if config.bidirectional else None
        width = config.hidden_dim * (2 if config.bidirectional else 1)
        self.merge = nn.Linear(width, config.hidden_dim)
        self.out = nn.Linear(config.hidden_dim, label_count)

    def directional_states(self, visits, mask) -> tuple[torch.Tensor, torch.Tensor | None]:
        x = self._embed(visits, mask)
        _, fwd = _run_cell(self.cell, x, mask)
        if self.cell_bwd is None:
            return fwd, None
        lengths = mask.sum(dim=1)
        _, bwd = _run_cell(self.cell_bwd, _reverse_padded(x, lengths), mask)
        return fwd, bwd

    def logits(self, visits, mask) -> torch.Tensor:
        fwd, bwd = self.directional_states(visits, mask)
        h = fwd if bwd is None else torch.cat([fwd, bwd], dim=-1)
        return self.out(self.merge(h))


MODEL_CLASSES = {"doctorai": DoctorAI, "ligdoctor": LIGDoctor}


def build_baseline(name: str, config: RecurrentConfig, vocab: CodeVocab) -> _RecurrentBase:
    if name not in MODEL_CLASSES:
        raise ConfigError(f"unknown baseline {name!r}; expected one of {sorted(MODEL_CLASSES)}")
    return MODEL_CLASSES[name](config, len(vocab.source), vocab.label_count)


@dataclass
class EncodedSequence:
    pair_id: str
    visits: np.ndarray  # [V, input_dim] multi-hot
    step_targets: np.ndarray  # [V, labels]; row t is visit t + 1's diagnoses, last row the pair target
    target_codes: list[str]


def _label_hot(codes, vocab: CodeVocab) -> np.ndarray:
    row = np.zeros(vocab.label_count, dtype=np.float32)
    for c in codes:
        i = vocab.tgt_index.get(c)
        if i is not None:
            row[i - (len(vocab.target) - vocab.label_count)] = 1.0
    return row


def encode_sequences(pairs: list[TrajectoryPair], vocab: CodeVocab, config: RecurrentConfig) -> list[EncodedSequence]:
    out = []
    for p in pairs:
        visits = p.source_visits[-config.max_visits:]
        hot = np.zeros((len(visits), len(vocab.source)), dtype=np.float32)
        for t, v in enumerate(visits):
            for ct in config.code_types:
                for c in v.codes(ct):
                    i = vocab.src_index.get(c)
                    if i is not None:
                        hot[t, i] = 1.0
        targets = [_label_hot(v.diagnoses, vocab) for v in visits[1:]] + [_label_hot(p.target_codes, vocab)]
        out.append(EncodedSequence(p.pair_id, hot, np.stack(targets), list(p.target_codes)))
    return out


def collate_sequences(batch: list[EncodedSequence]) -> dict:
    if not batch:
        raise InputError("empty batch")
    v = max(e.visits.shape[0] for e in batch)
    b = len(batch)
    visits = torch.zeros((b, v, batch[0].visits.shape[1]))
    targets = torch.zeros((b, v, batch[0].step_targets.shape[1]))
    mask = torch.zeros((b, v), dtype=torch.bool)
    for i, e in enumerate(batch):
        n = e.visits.shape[0]
        visits[i, :n] = torch.from_numpy(e.visits)
        targets[i, :n] = torch.from_numpy(e.step_targets)
        mask[i, :n] = True
    return {"visits": visits, "targets": targets, "mask": mask}


def baseline_loss(model: _RecurrentBase, tensors: dict) -> torch.Tensor:
    mask = tensors["mask"]
    if isinstance(model, DoctorAI):
        logits = model.step_logits(tensors["visits"], mask)
        per = F.binary_cross_entropy_with_logits(logits, tensors["targets"], reduction="none").sum(-1)
        return (per * mask).sum() / mask.sum()
    last = tensors["targets"][torch.arange(mask.shape[0]), mask.sum(dim=1) - 1]
    soft = last / last.sum(dim=-1, keepdim=True).clamp_min(1.0)
    return -(soft * torch.log_softmax(model.logits(tensors["visits"], mask), dim=-1)).sum(-1).mean()


@dataclass
class BaselineTrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1.0
    rho: float = 0.95
    seed: int = 0


class BaselineTrainer:
    """Adadelta on the model's loss: per-label sigmoid CE for DoctorAI, soft-target CE for LIGDoctor."""

    def __init__(self, model: _RecurrentBase, config: BaselineTrainConfig):
        self.model = model
        self.cfg = config
        self.opt = torch.optim.Adadelta(model.parameters(), lr=config.lr, rho=config.rho)
        self._gen = torch.Generator().manual_seed(config.seed)
        self._order: list[int] = []

    def train_step(self, batch: list[EncodedSequence]) -> float:
        self.model.train()
        tensors = collate_sequences(batch)
        self.opt.zero_grad()
        loss = baseline_loss(self.model, tensors)
        loss.backward()
        self.opt.step()
        return float(loss.detach())

    def fit(self, data: list[EncodedSequence], steps: int | None = None, log_every: int = 0) -> list[float]:
        steps = self.cfg.steps if steps is None else steps
        bs = min(self.cfg.batch_size, len(data))
        losses = []
        for step in range(steps):
            if len(self._order) < bs:
                self._order += torch.randperm(len(data), generator=self._gen).tolist()
            idx, self._order = self._order[:bs], self._order[bs:]
            losses.append(self.train_step([data[i] for i in idx]))
            if log_every and (step + 1) % log_every == 0:
                logger.info("%s step %d loss %.4f", self.model.kind, step + 1, losses[-1])
        return losses


def logits_to_ranking(scores, labels: list[str], k: int | None = None) -> RankedPrediction:
    """Labels by descending score, ties by ascending label index."""
    s = np.asarray(scores, dtype=float)
    if s.shape != (len(labels),):
        raise InputError(f"{s.shape[0] if s.ndim else 0} scores for {len(labels)} labels")
    if not np.isfinite(s).all():
        raise InputError("scores contain non-finite values")
    order = np.argsort(-s, kind="stable")
    if k is not None:
        order = order[:k]
    return RankedPrediction([labels[i] for i in order], [float(s[i]) for i in order])


@torch.no_grad()
def predict_baseline(
    model: _RecurrentBase, data: list[EncodedSequence], vocab: CodeVocab, k: int | None = None, batch_size: int = 256
) -> list[RankedPrediction]:
    model.eval()
    out = []
    labels = vocab.labels
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        tensors = collate_sequences(chunk)
        probs = model.scores(tensors["visits"], tensors["mask"])
        for e, row in zip(chunk, probs.numpy()):
            pred = logits_to_ranking(row, labels, k)
            pred.pair_id = e.pair_id
            out.append(pred)
    return out


def save_baseline(path, model: _RecurrentBase, vocab: CodeVocab, **extra) -> None:
    header = {"kind": "baseline", "model": model.kind, "config": asdict(model.config), "vocab": vocab.to_dict(), **extra}
    save_checkpoint(path, model.state_dict(), header)


def load_baseline(path) -> tuple[_RecurrentBase, CodeVocab, dict]:
    tensors, header = load_checkpoint(path)
    if header.get("kind") != "baseline":
        raise InputError(f"{path} is not a baseline checkpoint")
    vocab = CodeVocab.from_dict(header["vocab"])
    model = build_baseline(header["model"], RecurrentConfig(**header["config"]), vocab)
    model.load_state_dict(tensors)
    return model, vocab, header

