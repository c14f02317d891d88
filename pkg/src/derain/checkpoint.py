"""Versioned binary checkpoint container.

Layout (little-endian throughout):

    magic   4 bytes  b"DRSF"
    version u32      currently 1
    hlen    u32      header length in bytes
    header  JSON     {"config": {...}, "config_digest": hex, "iteration": int,
                      "optimizer": bool, "optimizer_step": int}
    count   u32      number of records
    records          name_len u16, name utf-8, ndim u8, dims u32 * ndim,
                     raw float32 data

Parameter tensors round-trip bit-exactly. Optimizer moments are stored as
extra records under "opt.m." / "opt.v." prefixes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"DRSF"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def config_digest(config_dict):
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _write_record(fh, name, arr):
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save(path, config_dict, params, iteration=0, optimizer=None):
    """Write a checkpoint. params: ordered {name: Tensor-or-array}.

    optimizer: optional (step, {name: m array}, {name: v array}).
    """
    records = OrderedDict()
    for name, t in params.items():
        arr = t.data if hasattr(t, "data") else np.asarray(t)
        if arr.dtype != np.float32:
            raise CheckpointError(f"checkpoints store float32 tensors; {name} is {arr.dtype}")
        records[name] = arr
    opt_step = 0
    if optimizer is not None:
        opt_step, ms, vs = optimizer
        for name, arr in ms.items():
            records[f"opt.m.{name}"] = arr
        for name, arr in vs.items():
            records[f"opt.v.{name}"] = arr
    header = json.dumps({
        "config": config_dict,
        "config_digest": config_digest(config_dict),
        "iteration": int(iteration),
        "optimizer": optimizer is not None,
        "optimizer_step": int(opt_step),
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            _write_record(fh, name, arr)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load(path):
    """Read a checkpoint; returns (header dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header"))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt header: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        records = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                          for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * size, f"data of {name}")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last record")
    return header, records


def split_optimizer(records):
    """Separate parameter records from optimizer-moment records."""
    params, ms, vs = OrderedDict(), {}, {}
    for name, arr in records.items():
        if name.startswith("opt.m."):
            ms[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            vs[name[len("opt.v."):]] = arr
        else:
            params[name] = arr
    return params, ms, vs
