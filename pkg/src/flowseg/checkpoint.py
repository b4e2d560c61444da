"""Versioned binary checkpoints.

Layout (little-endian)::

    magic  b"FSCK"        4 bytes
    format_version        u32
    header_length         u64
    header                UTF-8 JSON, sorted keys
    blob                  float32 tensors back to back

The header records the stage, a full config snapshot, the training seed and
epoch, the parameter count, and a table of ``{name, shape, offset}`` entries
addressing the blob (offsets in elements).  Tensor names are prefixed with
``model.``, ``best.`` or ``optim.``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, IngestionError

MAGIC = b"FSCK"
FORMAT_VERSION = 1
STAGES = ("image-vae", "mask-vae", "flow")
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    stage: str
    config: dict
    seed: int
    epoch: int
    param_count: int
    tensors: dict[str, torch.Tensor]
    extra: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _flatten_optimizer(opt_state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, scalars = {}, {}
    for idx, slots in opt_state["state"].items():
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"optim.{idx}.{key}"] = value
            else:
                scalars[f"{idx}.{key}"] = value
    return tensors, {"param_groups": opt_state["param_groups"], "scalars": scalars}


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    for name, value in meta.get("scalars", {}).items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    return {"state": dict(sorted(state.items())), "param_groups": meta["param_groups"]}


def save_checkpoint(
    path: str | Path,
    *,
    stage: str,
    config: dict,
    seed: int,
    epoch: int,
    model: dict[str, torch.Tensor],
    best: dict[str, torch.Tensor] | None = None,
    optimizer: dict | None = None,
    extra: dict | None = None,
) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    tensors = {f"model.{k}": v for k, v in model.items()}
    if best is not None:
        tensors.update({f"best.{k}": v for k, v in best.items()})
    extra = dict(extra or {})
    if optimizer is not None:
        opt_tensors, extra["optimizer"] = _flatten_optimizer(optimizer)
        tensors.update(opt_tensors)

    table, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config": config,
        "seed": int(seed),
        "epoch": int(epoch),
        "param_count": int(sum(v.numel() for v in model.values())),
        "tensors": table,
        "extra": extra,
    }
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(body)))
        fh.write(body)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing checkpoint file: {path}")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise IngestionError(f"{path}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + n].decode("utf-8"))
    blob = np.frombuffer(data, dtype="<f4", offset=_PREFIX.size + n)
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + count > blob.size:
            raise IngestionError(f"{path}: tensor {entry['name']} exceeds blob")
        arr = blob[start:start + count].reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        stage=header["stage"],
        config=header["config"],
        seed=header["seed"],
        epoch=header["epoch"],
        param_count=header["param_count"],
        tensors=tensors,
        extra=header.get("extra", {}),
    )


def verify_against(ckpt: Checkpoint, module: torch.nn.Module, prefix: str = "model"):
    """Compare the stored shape table with ``module``; raise on any mismatch."""
    stored = ckpt.group(prefix)
    expected = module.state_dict()
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise ConfigError(f"checkpoint {ckpt.stage} tensor names differ: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, value in expected.items():
        if tuple(stored[name].shape) != tuple(value.shape):
            raise ConfigError(
                f"checkpoint {ckpt.stage} tensor {name} has shape {tuple(stored[name].shape)}, "
                f"config expects {tuple(value.shape)}"
            )
    count = sum(v.numel() for v in expected.values())
    if prefix == "model" and ckpt.param_count != count:
        raise ConfigError(f"checkpoint {ckpt.stage} parameter count {ckpt.param_count} != {count}")


def load_into(ckpt: Checkpoint, module: torch.nn.Module, prefix: str = "model"):
    verify_against(ckpt, module, prefix)
    module.load_state_dict(ckpt.group(prefix))
    return module


def optimizer_state(ckpt: Checkpoint) -> dict | None:
    meta = ckpt.extra.get("optimizer")
    if meta is None:
        return None
    return _unflatten_optimizer(ckpt.group("optim"), meta)
