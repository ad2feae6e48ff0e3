"""Binary checkpoint format.

Layout::

    b"HYPD" | u32 format version | u32 header length | header (UTF-8 JSON) | tensor bytes

The header carries a shape table ``[{name, shape, dtype}]``; tensors follow
in that order, little-endian. Model parameters use 32-bit floats (64-bit in
verification mode); normalization statistics are always 64-bit so that
denormalized metrics survive the round trip exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import NormStats
from .errors import DataValidationError

MAGIC = b"HYPD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_spec: dict
    params: dict[str, np.ndarray]
    norm: NormStats
    epoch: int = 0
    opt_t: int = 0
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    train_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _table(ckpt: Checkpoint):
    entries = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    entries += [(f"opt.m.{k}", v) for k, v in ckpt.opt_m.items()]
    entries += [(f"opt.v.{k}", v) for k, v in ckpt.opt_v.items()]
    entries += [("norm.mean", ckpt.norm.mean), ("norm.std", ckpt.norm.std)]
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    param_dtype = "<f8" if ckpt.model_spec.get("float64") else "<f4"
    table, blobs = [], []
    for name, arr in _table(ckpt):
        dtype = "<f8" if name.startswith("norm.") else param_dtype
        arr = np.ascontiguousarray(np.asarray(arr), dtype=dtype)
        table.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = {
        "tensors": table,
        "model_spec": ckpt.model_spec,
        "epoch": ckpt.epoch,
        "opt_t": ckpt.opt_t,
        "rng_state": ckpt.rng_state,
        "train_state": ckpt.train_state,
        "config": ckpt.config,
    }
    raw = json.dumps(header).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataValidationError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise DataValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    params, m, v, norm = {}, {}, {}, {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(buf):
            raise DataValidationError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
        kind, _, name = entry["name"].partition(".")
        if kind == "param":
            params[name] = arr
        elif kind == "norm":
            norm[name] = arr
        elif name.startswith("m."):
            m[name[2:]] = arr
        else:
            v[name[2:]] = arr
    return Checkpoint(
        model_spec=header["model_spec"],
        params=params,
        norm=NormStats(norm["mean"], norm["std"]),
        epoch=header["epoch"],
        opt_t=header["opt_t"],
        opt_m=m,
        opt_v=v,
        rng_state=header["rng_state"],
        train_state=header["train_state"],
        config=header["config"],
    )


def tensors_to_numpy(tensors: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: t.detach().cpu().numpy().copy() for k, t in tensors.items()}
