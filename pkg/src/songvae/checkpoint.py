"""Versioned checkpoint container.

Layout: ``b"MSCK"``, u16 version, u32 header length, a UTF-8 JSON header
(sorted keys) and the concatenated little-endian tensor payloads. The JSON
header lists every tensor's name, dtype, shape and byte offset. Nothing
time- or path-dependent is written, so identical weights give identical
files.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import MissingPretrainError, ParseError, ProvenanceError

MAGIC = b"MSCK"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    meta: dict
    tensors: dict[str, np.ndarray]
    digest: str
    path: Path | None = None

    def torch_state(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(prefix)}


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype == np.float64:
        return arr
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.int64)
    return arr.astype(np.float32)


def save_checkpoint(path, kind: str, tensors: dict, config: dict, meta: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of the file bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        dtype = str(arr.dtype)
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "config": config, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    data = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)  # a crash mid-write never leaves a truncated checkpoint
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingPretrainError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[10:10 + hlen])
    if kind is not None and header["kind"] != kind:
        raise MissingPretrainError(f"{path} is a {header['kind']!r} checkpoint, expected {kind!r}")
    base = 10 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return Checkpoint(header["kind"], header["config"], header["meta"], tensors, hashlib.sha256(data).hexdigest(), path)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_digest(state: dict) -> str:
    """Hash of a state dict's names, shapes and values (order independent)."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = _as_numpy(state[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return state_digest(module.state_dict())


def resolve_parent(child: Checkpoint, key: str, override=None) -> Path:
    """Locate the parent checkpoint a child refers to and verify its hash."""
    meta = child.meta
    name, digest = meta.get(f"{key}_file"), meta.get(f"{key}_digest")
    if override is not None:
        candidate = Path(override)
    elif name is not None and child.path is not None:
        candidate = child.path.parent / name
    else:
        raise MissingPretrainError(f"checkpoint does not reference a {key} checkpoint")
    if not candidate.exists():
        raise MissingPretrainError(f"{key} checkpoint {candidate} not found")
    actual = file_digest(candidate)
    if digest is not None and actual != digest:
        raise ProvenanceError(f"{candidate} does not match the {key} checkpoint this model was trained against")
    return candidate


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str = "optim.") -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}{idx}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    for g in groups:
        if isinstance(g.get("betas"), tuple):
            g["betas"] = list(g["betas"])
    return tensors, {f"{prefix}groups": groups}


def restore_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str = "optim.") -> None:
    groups = ckpt.meta.get(f"{prefix}groups")
    if groups is None:
        return
    state: dict = {}
    n = len(prefix)
    for name, arr in ckpt.tensors.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[n:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
