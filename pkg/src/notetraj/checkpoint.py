"""Single-file checkpoints: a tensor map plus a JSON header (config echo, step, loss, ...)."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file


def save_checkpoint(path: str | Path, state_dict: dict[str, torch.Tensor], header: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # clone: tied weights share storage, which the format refuses
    tensors = {k: v.detach().cpu().clone().contiguous() for k, v in state_dict.items()}
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        header = json.loads(fh.metadata()["header"])
        for key in fh.keys():
            tensors[key] = fh.get_tensor(key)
    return tensors, header


def read_header(path: str | Path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        return json.loads(fh.metadata()["header"])
