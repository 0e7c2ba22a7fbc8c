"""Versioned flat-binary checkpoints.

Byte layout (all integers little-endian):

    offset 0   8 bytes   magic ``b"MSRKITCP"``
    offset 8   u32       format version (currently 1)
    offset 12  u64       header length in bytes
    offset 20  header    UTF-8 JSON (see below)
    then       payload   raw little-endian tensor bytes, C order

The JSON header carries the resolved experiment config, step/epoch
counters, every rng stream's (seed, counter) state, the normalization
statistics, and the tensor manifest: a list of ``{name, shape, dtype,
offset, nbytes}`` with offsets relative to the payload start.  Tensors
cover model parameters, model buffers (batch-norm running statistics,
prefixed ``buffer.``), and optimizer momentum buffers (prefixed
``optim.``).  load(save(state)) is the identity, and restoring a
checkpoint resumes training bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAGIC = b"MSRKITCP"
VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    """Decoded checkpoint: header fields plus name -> tensor."""

    version: int
    config: dict
    step: int
    epoch: int
    rng_states: dict[str, list[int]]
    optimizer: dict
    stats: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str, *, config: dict, step: int, epoch: int,
                    rng_states: dict[str, tuple[int, int]],
                    optimizer: dict, stats: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            enc = np.ascontiguousarray(arr, dtype="<f8")
            dtype = "<f8"
        elif arr.dtype.kind in "iu":
            enc = np.ascontiguousarray(arr, dtype="<i8")
            dtype = "<i8"
        else:
            raise DataError(f"checkpoint: cannot encode tensor {name} "
                            f"of dtype {arr.dtype}")
        raw = enc.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": config,
        "step": int(step),
        "epoch": int(epoch),
        "rng": {k: [int(v[0]), int(v[1])] for k, v in rng_states.items()},
        "optimizer": optimizer,
        "stats": stats,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    if len(buf) < 20:
        raise DataError(f"checkpoint {path}: truncated at {len(buf)} bytes")
    if buf[:8] != MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {buf[:8]!r}")
    version = struct.unpack("<I", buf[8:12])[0]
    if version != VERSION:
        raise DataError(
            f"checkpoint {path}: format version {version} unsupported "
            f"(this build reads version {VERSION})")
    hlen = struct.unpack("<Q", buf[12:20])[0]
    if 20 + hlen > len(buf):
        raise DataError(f"checkpoint {path}: header overruns file")
    try:
        header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint {path}: corrupt header: {e}")
    payload = buf[20 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"checkpoint {path}: tensor {name} has "
                            f"unknown dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataError(
                f"checkpoint {path}: tensor {name} overruns payload "
                f"({start}+{nbytes} > {len(payload)})")
        expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expect:
            raise DataError(
                f"checkpoint {path}: tensor {name} byte count {nbytes} "
                f"does not match shape {shape} ({expect})")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=start).reshape(shape)
        tensors[name] = arr.astype(np.float64 if dtype.kind == "f" else np.int64)
    return Checkpoint(
        version=version,
        config=header["config"],
        step=header["step"],
        epoch=header["epoch"],
        rng_states={k: list(v) for k, v in header["rng"].items()},
        optimizer=header["optimizer"],
        stats=header["stats"],
        tensors=tensors,
    )


def restore_arrays(target: dict[str, np.ndarray], source: dict[str, np.ndarray],
                   prefix: str = "") -> None:
    """Copy checkpoint tensors into live arrays in place, strict on names."""
    for name, arr in target.items():
        key = prefix + name
        if key not in source:
            raise DataError(f"checkpoint restore: missing tensor {key}")
        if source[key].shape != arr.shape:
            raise DataError(
                f"checkpoint restore: tensor {key} shape {source[key].shape} "
                f"does not match model {arr.shape}")
        arr[...] = source[key]
