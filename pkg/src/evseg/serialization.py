"""Deterministic binary container: named float/int blobs plus a JSON header.

Layout: magic, format version, u64 header length, canonical JSON header
(sorted keys), then the raw little-endian blob bytes in header order.  Saving
the same logical content always produces the same bytes, so checkpoints can be
compared and cached by file digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import EventParseError

MAGIC = b"EVBL"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_blobs(path, blobs: dict, meta: dict | None = None) -> None:
    """Write named arrays and a metadata dict; blob order is sorted by name."""
    entries = []
    payload = bytearray()
    for name in sorted(blobs):
        src = np.asarray(blobs[name])
        # order="C" keeps 0-dim shapes intact (ascontiguousarray would not)
        arr = src.astype(src.dtype.newbyteorder("<"), order="C", copy=True)
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape), "nbytes": arr.nbytes})
        payload += arr.tobytes()
    header = canonical_json({"meta": meta or {}, "blobs": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_blobs(path) -> tuple:
    """Read back (blobs, meta)."""
    raw = Path(path).read_bytes()
    fixed = len(MAGIC) + struct.calcsize("<IQ")
    if len(raw) < fixed or raw[:4] != MAGIC:
        raise EventParseError("not a blob container", path, 0)
    version, header_len = struct.unpack("<IQ", raw[4:fixed])
    if version != VERSION:
        raise EventParseError(f"unsupported container version {version}", path, 0)
    header = json.loads(raw[fixed:fixed + header_len].decode("utf-8"))
    blobs = {}
    offset = fixed + header_len
    for entry in header["blobs"]:
        count = entry["nbytes"]
        arr = np.frombuffer(raw[offset:offset + count], dtype=np.dtype(entry["dtype"]))
        blobs[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += count
    if offset != len(raw):
        raise EventParseError("trailing bytes in blob container", path, 0)
    return blobs, header["meta"]


def module_blobs(module: torch.nn.Module, prefix: str) -> dict:
    """Named parameter (and buffer) arrays of a module, prefixed."""
    out = {}
    for name, p in sorted(module.named_parameters()):
        out[f"{prefix}.{name}"] = p.detach().cpu().numpy()
    for name, b in sorted(module.named_buffers()):
        out[f"{prefix}.buffer.{name}"] = b.detach().cpu().numpy()
    return out


def as_tensor(arr: np.ndarray) -> torch.Tensor:
    """Blob array to tensor, preserving 0-dim shapes and fixing byte order."""
    native = np.asarray(arr, dtype=arr.dtype.newbyteorder("="))
    return torch.from_numpy(native.astype(native.dtype, order="C", copy=True))


def load_module_blobs_(module: torch.nn.Module, blobs: dict, prefix: str) -> None:
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            p.copy_(as_tensor(blobs[f"{prefix}.{name}"]).to(p.dtype))
        for name, b in sorted(module.named_buffers()):
            b.copy_(as_tensor(blobs[f"{prefix}.buffer.{name}"]).to(b.dtype))


def module_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all parameter/buffer bytes in sorted-name order."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    for name, b in sorted(module.named_buffers()):
        digest.update(name.encode())
        digest.update(b.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
