"""Deterministic checkpoint serialization.

Layout: a fixed magic string, an 8-byte little-endian header length, a JSON
header (sorted keys, so identical state always produces identical bytes),
then raw tensor payloads concatenated in manifest order. Saving the result
of a load reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EEGSSLCKPT\n"
FORMAT_VERSION = 1

_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or version-incompatible checkpoints."""


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray | torch.Tensor]):
    """Atomically write meta + tensors; overwrites any existing file."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(tensors):
        value = tensors[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        value = np.ascontiguousarray(value)
        if str(value.dtype) not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {value.dtype}")
        arrays[name] = value

    manifest = [
        {"name": name, "dtype": str(a.dtype), "shape": list(a.shape)}
        for name, a in arrays.items()
    ]
    header = {"format_version": FORMAT_VERSION, "meta": meta, "tensors": manifest}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            for a in arrays.values():
                fh.write(a.tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and fully validate a checkpoint before returning any state."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    header_len = int.from_bytes(blob[offset : offset + 8], "little")
    offset += 8
    if offset + header_len > len(blob):
        raise CheckpointError(f"{path}: corrupted checkpoint header (truncated)")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint header: {exc}") from exc
    offset += header_len

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version!r}, "
            f"expected {FORMAT_VERSION}"
        )

    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated tensor payload for {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            blob[offset : offset + nbytes], dtype=dtype
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after tensor payload")
    return Checkpoint(meta=header["meta"], tensors=tensors)


# -- model / trainer hydration ------------------------------------------------


def model_tensors(model: torch.nn.Module, prefix: str = "model") -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, ckpt: Checkpoint, prefix: str = "model"):
    state = {}
    wanted = dict(model.state_dict())
    for key, tensor in wanted.items():
        name = f"{prefix}.{key}"
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        value = torch.as_tensor(ckpt.tensors[name])
        if tuple(value.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(value.shape)}, expected {tuple(tensor.shape)}"
            )
        state[key] = value.to(tensor.dtype)
    model.load_state_dict(state)


def optimizer_tensors(optimizer: torch.optim.Optimizer) -> tuple[dict, dict[str, torch.Tensor]]:
    """Split an optimizer state dict into JSON-able meta and raw tensors."""
    state = optimizer.state_dict()
    tensors: dict[str, torch.Tensor] = {}
    for pid, slots in state["state"].items():
        for slot, value in slots.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim.{pid}.{slot}"] = value
            else:
                tensors[f"optim.{pid}.{slot}"] = torch.as_tensor(float(value))
    meta = {"param_groups": state["param_groups"], "state_keys": sorted(state["state"].keys())}
    return meta, tensors


def load_optimizer_tensors(optimizer: torch.optim.Optimizer, ckpt: Checkpoint):
    opt_meta = ckpt.meta["optimizer"]
    state: dict[int, dict] = {}
    for pid in opt_meta["state_keys"]:
        prefix = f"optim.{pid}."
        slots = {
            name[len(prefix):]: torch.as_tensor(value)
            for name, value in ckpt.tensors.items()
            if name.startswith(prefix)
        }
        state[pid] = slots
    optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})


def save_trainer_checkpoint(path: str | Path, trainer, config_snapshot: dict, seed: int):
    """Everything needed to continue training exactly: model, optimizer
    moments, schedule horizons, counters, and the RNG state."""
    trainer_state = trainer.state_dict()
    opt_meta, opt_tensors = optimizer_tensors(trainer.optimizer)
    tensors = {
        **model_tensors(trainer.model),
        **opt_tensors,
        "rng.torch": torch.get_rng_state(),
    }
    meta = {
        "kind": "pretrain",
        "seed": seed,
        "config": config_snapshot,
        "trainer": {k: v for k, v in trainer_state.items() if k != "optimizer"},
        "optimizer": opt_meta,
        "total_updates": trainer.total_updates,
        "ema": {
            "tau_start": trainer.ema.tau_start,
            "tau_end": trainer.ema.tau_end,
            "tau_steps": trainer.ema.tau_steps,
        },
    }
    save_checkpoint(path, meta, tensors)


def restore_trainer(ckpt: Checkpoint, trainer):
    """Load model weights, optimizer state, counters, and RNG state."""
    if ckpt.meta.get("kind") != "pretrain":
        raise CheckpointError(f"checkpoint kind {ckpt.meta.get('kind')!r} is not resumable")
    if ckpt.meta["total_updates"] != trainer.total_updates:
        raise CheckpointError(
            "schedule mismatch: checkpoint was created for "
            f"{ckpt.meta['total_updates']} total updates, trainer has {trainer.total_updates}"
        )
    load_model_tensors(trainer.model, ckpt)
    load_optimizer_tensors(trainer.optimizer, ckpt)
    state = dict(ckpt.meta["trainer"])
    state["optimizer"] = trainer.optimizer.state_dict()
    trainer.load_state_dict(state)
    if "rng.torch" in ckpt.tensors:
        torch.set_rng_state(torch.as_tensor(ckpt.tensors["rng.torch"]))
