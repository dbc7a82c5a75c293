"""Turn per-visit, multi-layer note representations into tokens for the trajectory encoder.

Three strategies:

* ``mean``: average over layers and visits, one token of width d.
* ``concat``: average over layers only, one token per visit.
* ``projection``: flatten each visit's [L, d] block (layer-major), apply a
  trained affine map and exact GeLU, one token of width p per visit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError


class FusionStrategy(str, Enum):
    NONE = "none"
    MEAN = "mean"
    CONCAT = "concat"
    PROJECTION = "projection"


@dataclass
class VisitNoteStack:
    values: torch.Tensor  # [V, L, d]
    visit_timestamps: list[int] | None = None

    def __post_init__(self):
        if not isinstance(self.values, torch.Tensor):
            self.values = torch.as_tensor(np.asarray(self.values))
        if self.values.ndim != 3 or self.values.shape[0] == 0:
            raise InputError("note stack must have shape [V >= 1, L, d]")
        if not torch.isfinite(self.values).all():
            raise InputError("note stack contains non-finite values")


@dataclass
class FusedTokens:
    tokens: torch.Tensor  # [T, d_out]
    strategy: FusionStrategy


@dataclass
class ProjectionParams:
    weight: torch.Tensor  # [L*d, p]
    bias: torch.Tensor  # [p]


def fuse_mean(stack: VisitNoteStack) -> FusedTokens:
    return FusedTokens(stack.values.mean(dim=(0, 1))[None], FusionStrategy.MEAN)


def fuse_concat(stack: VisitNoteStack) -> FusedTokens:
    return FusedTokens(stack.values.mean(dim=1), FusionStrategy.CONCAT)


def fuse_projection(stack: VisitNoteStack, params: ProjectionParams) -> FusedTokens:
    v, layers, d = stack.values.shape
    if params.weight.shape[0] != layers * d or params.bias.shape != params.weight.shape[1:]:
        raise ConfigError(
            f"projection weight {tuple(params.weight.shape)} does not fit [{layers}*{d}, p]"
        )
    flat = stack.values.reshape(v, layers * d)
    return FusedTokens(F.gelu(flat @ params.weight + params.bias), FusionStrategy.PROJECTION)


def fuse(stack: VisitNoteStack, strategy: str, params: ProjectionParams | None = None) -> FusedTokens:
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.MEAN:
        return fuse_mean(stack)
    if strategy is FusionStrategy.CONCAT:
        return fuse_concat(stack)
    if strategy is FusionStrategy.PROJECTION:
        if params is None:
            raise ConfigError("projection fusion needs ProjectionParams")
        return fuse_projection(stack, params)
    d = stack.values.shape[-1]
    return FusedTokens(stack.values.new_zeros((0, d)), strategy)


class NoteFusion(nn.Module):
    """Batched fusion over padded stacks [B, V, L, d] with a visit mask."""

    def __init__(self, strategy: str, n_layers: int, dim: int, proj_dim: int | None = None):
        super().__init__()
        self.strategy = FusionStrategy(strategy)
        self.n_layers = n_layers
        self.dim = dim
        self.proj_dim = proj_dim or max(1, dim // 2)
        self.proj = (
            nn.Linear(n_layers * dim, self.proj_dim)
            if self.strategy is FusionStrategy.PROJECTION
            else None
        )

    @property
    def out_dim(self) -> int:
        return self.proj_dim if self.strategy is FusionStrategy.PROJECTION else self.dim

    def params(self) -> ProjectionParams:
        if self.proj is None:
            raise ConfigError("only projection fusion has parameters")
        return ProjectionParams(self.proj.weight.T, self.proj.bias)

    def forward(self, stacks: torch.Tensor, visit_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            stacks: [B, V, L, d]
            visit_mask: [B, V], True for real visits
        Returns:
            tokens [B, T, d_out] and padding mask [B, T] (True = padding)
        """
        b, v, layers, d = stacks.shape
        if (layers, d) != (self.n_layers, self.dim):
            raise ConfigError(f"stack layers/dim {(layers, d)} != {(self.n_layers, self.dim)}")
        if self.strategy is FusionStrategy.NONE:
            return stacks.new_zeros((b, 0, d)), visit_mask.new_zeros((b, 0))
        keep = visit_mask.to(stacks.dtype)
        if self.strategy is FusionStrategy.MEAN:
            per_visit = stacks.mean(dim=2)
            summed = (per_visit * keep[..., None]).sum(dim=1)
            token = summed / keep.sum(dim=1, keepdim=True).clamp_min(1.0)
            return token[:, None], visit_mask.new_zeros((b, 1))
        if self.strategy is FusionStrategy.CONCAT:
            return stacks.mean(dim=2), ~visit_mask
        tokens = F.gelu(self.proj(stacks.reshape(b, v, layers * d)))
        return tokens, ~visit_mask
