"""Versioned, byte-stable checkpoint container.

Layout: magic, u32 format version, u64 header length, a sorted-key JSON
header, then raw little-endian tensor bytes in header order. Nothing depends
on wall-clock time, so saving the same state twice yields identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"CAMOINPAINT-CKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    config_hash: str
    step: int
    tensors: dict = field(default_factory=dict)  # name -> torch.Tensor
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().cpu().contiguous()
            a = t.numpy()
            if a.dtype.byteorder == ">":
                a = a.byteswap().newbyteorder()
            raw = a.tobytes()
            entries.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"kind": self.kind, "config": self.config, "config_hash": self.config_hash,
                  "step": self.step, "meta": self.meta, "tensors": entries}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(blobs)

    def save(self, path) -> str:
        """Write atomically; returns the sha256 of the file."""
        data = self.to_bytes()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        try:
            version, hlen = struct.unpack_from("<IQ", data, pos)
            pos += 12
            if version != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            header = json.loads(data[pos : pos + hlen])
            base = pos + hlen
            tensors = {}
            for e in header["tensors"]:
                raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
                if len(raw) != e["nbytes"]:
                    raise CheckpointError("truncated checkpoint")
                a = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
                tensors[e["name"]] = torch.from_numpy(a.copy())
        except (struct.error, KeyError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
        return cls(header["kind"], header["config"], header["config_hash"], header["step"], tensors,
                   header["meta"])

    @classmethod
    def load(cls, path, kind=None, expect_hash=None, allow_mismatch=False) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        ckpt = cls.from_bytes(path.read_bytes())
        if kind is not None and ckpt.kind != kind:
            raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
        if expect_hash is not None and ckpt.config_hash != expect_hash and not allow_mismatch:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {ckpt.config_hash}, current {expect_hash} "
                "(pass an override to load anyway)"
            )
        return ckpt


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pack_optimizer(opt: torch.optim.Optimizer, prefix="optim/"):
    """Split an optimizer state dict into tensors and JSON-safe metadata."""
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"{prefix}{pid}/{k}"] = v
            else:
                scalars[f"{pid}/{k}"] = v
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def unpack_optimizer(opt: torch.optim.Optimizer, tensors, meta, prefix="optim/"):
    state = {}
    for name, v in tensors.items():
        if not name.startswith(prefix):
            continue
        pid, k = name[len(prefix):].split("/", 1)
        state.setdefault(int(pid), {})[k] = v
    for key, v in meta.get("scalars", {}).items():
        pid, k = key.split("/", 1)
        state.setdefault(int(pid), {})[k] = v
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
