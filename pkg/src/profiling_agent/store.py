"""Run-directory helpers: atomic JSON writes and model checkpoints."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import torch


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text_atomic(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json_atomic(path: str | os.PathLike, obj) -> Path:
    return write_text_atomic(path, dumps(obj))


def read_json(path: str | os.PathLike):
    with open(path) as fh:
        return json.load(fh)


def save_checkpoint(model: torch.nn.Module, directory: str | os.PathLike, meta: dict) -> Path:
    """Pickle the whole module next to a JSON description of how it was made.

    The pickle carries the (possibly pruned) architecture, so a checkpoint can
    be reloaded without replaying the plan that produced it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / ".model.pt.tmp"
    torch.save(model, tmp)
    os.replace(tmp, directory / "model.pt")
    write_json_atomic(directory / "meta.json", meta)
    return directory


def load_checkpoint(directory: str | os.PathLike, device: str = "cpu"):
    directory = Path(directory)
    model = torch.load(directory / "model.pt", map_location=device, weights_only=False)
    model.eval()
    return model, read_json(directory / "meta.json")
