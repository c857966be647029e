"""DTRC checkpoint container.

Layout (all integers little-endian)::

    b"DTRC" | version u32 | header_len u64 | header JSON (UTF-8) | payload

The header holds the run configuration, progress counters, the centre-bank
flags, the random-stream state and a tensor table ``name -> {dtype, shape,
offset, nbytes}``.  Offsets are relative to the payload start and follow the
sorted tensor names; the payload is the raw little-endian bytes of every
tensor in that order.  Serialisation is deterministic, so saving the same
state twice gives identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DTRC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict

    def group(self, prefix: str) -> dict:
        """Tensors under ``prefix.``, with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def encode(header: dict, tensors: dict) -> bytes:
    table, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = dict(header, tensors=table)
    blob = json.dumps(head, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise IntegrityError(f"{source}: file too short for a DTRC header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a DTRC checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise IntegrityError(f"{source}: header truncated")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: corrupt header: {exc}") from exc
    payload = memoryview(data)[start:]
    table = header.pop("tensors")
    tensors, expected = {}, 0
    for name in sorted(table, key=lambda k: table[k]["offset"]):
        ent = table[name]
        if ent["offset"] != expected:
            raise IntegrityError(f"{source}: tensor {name!r} at offset {ent['offset']}, expected {expected}")
        end = ent["offset"] + ent["nbytes"]
        if end > len(payload):
            raise IntegrityError(f"{source}: tensor {name!r} truncated "
                                 f"({len(payload) - ent['offset']} of {ent['nbytes']} bytes present)")
        arr = np.frombuffer(payload[ent["offset"]:end], dtype=np.dtype(ent["dtype"]))
        tensors[name] = arr.reshape(ent["shape"]).copy()
        expected = end
    if expected != len(payload):
        raise IntegrityError(f"{source}: {len(payload) - expected} trailing payload bytes")
    return Checkpoint(header, tensors)


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_header(path) -> dict:
    """Header JSON only (including the tensor table), without touching the payload."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise IntegrityError(f"{path}: file too short for a DTRC header")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC or version != VERSION:
            raise CheckpointError(f"{path}: not a version-{VERSION} DTRC checkpoint")
        return json.loads(fh.read(hlen).decode("utf-8"))


# -- model-level helpers ---------------------------------------------------

def checkpoint_save(path, model, bank=None, *, config: dict | None = None, epoch: int = 0,
                    phase: str = "source_only", rng_state: int = 0, step: int = 0,
                    optim=None) -> None:
    """Write model parameters, optional optimiser moments and centre bank."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    header = {
        "config": {"model": model.cfg.to_dict(), **(config or {})},
        "epoch": int(epoch),
        "phase": phase,
        "step": int(step),
        "rng_state": f"{int(rng_state):016x}",
        "optim_t": int(optim.t) if optim is not None else 0,
        "bank": None,
    }
    if optim is not None:
        tensors.update(optim.state_arrays())
    if bank is not None:
        tensors["bank.source"] = bank.source_centers
        tensors["bank.target"] = bank.target_centers
        header["bank"] = {
            "epoch": int(bank.epoch),
            "valid_source": [bool(b) for b in bank.valid_source],
            "valid_target": [bool(b) for b in bank.valid_target],
        }
    write_atomic(path, encode(header, tensors))


def checkpoint_load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode(data, str(path))


def restore_model(ckpt: Checkpoint, dtype=np.float32):
    """Rebuild the model from the stored config and load its parameters."""
    from .model import ModelConfig, build_model
    from .numkit.rng import Rng

    cfg = ModelConfig.from_dict(ckpt.header["config"]["model"])
    model = build_model(cfg, Rng(0), dtype)
    model.load_state_dict(ckpt.group("model"))
    return model


def restore_bank(ckpt: Checkpoint):
    from .uda import ClassCenterBank

    meta = ckpt.header.get("bank")
    if not meta:
        return None
    return ClassCenterBank(ckpt.tensors["bank.source"], ckpt.tensors["bank.target"],
                           np.array(meta["valid_source"], bool), np.array(meta["valid_target"], bool),
                           int(meta["epoch"]))


def rng_state(ckpt: Checkpoint) -> int:
    return int(ckpt.header["rng_state"], 16)
