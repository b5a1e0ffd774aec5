"""Self-describing binary container for models, cohorts and analysis results.

Layout::

    MAGIC (8 bytes) | header length (uint64, little endian) | header (UTF-8 JSON) | payload

The header records the format version, the payload kind, the producing
configuration (text and hash), the seed, free-form metadata and a table of
named arrays, each with its shape, byte offset into the payload and byte
count.  Arrays are stored as little-endian float64, so a load reproduces
the saved values bit for bit (NaN payloads included).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..data import DataContractError

MAGIC = b"DSTATE\x00\x01"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPE = "<f8"


class CheckpointError(DataContractError):
    """The file is not a valid container of the expected kind or version."""


@dataclass
class Checkpoint:
    kind: str
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    config_text: str = ""
    config_hash: str = ""
    seed: int = 0
    version: int = FORMAT_VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype=_DTYPE, order="C")
        data = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.version,
        "kind": ckpt.kind,
        "config": ckpt.config_text,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "meta": ckpt.meta,
        "arrays": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def from_bytes(blob: bytes, kind: str | None = None) -> Checkpoint:
    """Parse and validate a container; every inconsistency names its byte offset."""
    if len(blob) < len(MAGIC) + _LEN.size:
        raise CheckpointError(f"truncated container: {len(blob)} bytes, header needs {len(MAGIC) + _LEN.size}")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic at offset 0: not a deepstate container")
    (head_len,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + head_len > len(blob):
        raise CheckpointError(f"header at offset {start} claims {head_len} bytes, file has {len(blob) - start}")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header at offset {start}: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("kind"), str):
        raise CheckpointError(f"header at offset {start} lacks a payload kind")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version!r} at offset {start}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"container holds {header.get('kind')!r}, expected {kind!r}")
    base = start + head_len
    payload = len(blob) - base
    arrays, expected = {}, 0
    entries = header.get("arrays", [])
    if not isinstance(entries, list):
        raise CheckpointError(f"array table in header at offset {start} is not a list")
    for i, entry in enumerate(entries):
        try:
            name, shape, offset, claimed = entry["name"], tuple(int(n) for n in entry["shape"]), entry["offset"], entry["nbytes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"array entry {i} in header at offset {start} is malformed: {exc}") from exc
        if any(n < 0 for n in shape):
            raise CheckpointError(f"array {name!r}: negative dimension in shape {shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if claimed != nbytes:
            raise CheckpointError(f"array {name!r}: shape {shape} needs {nbytes} bytes, header says {claimed}")
        if offset != expected:
            raise CheckpointError(f"array {name!r}: offset {base + offset} but previous array ends at {base + expected}")
        if expected + nbytes > payload:
            raise CheckpointError(f"array {name!r} at offset {base + expected}: needs {nbytes} bytes, {payload - expected} left")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // 8, offset=base + expected).reshape(shape).astype(np.float64)
        expected += nbytes
    if expected != payload:
        raise CheckpointError(f"{payload - expected} unexpected trailing bytes at offset {base + expected}")
    return Checkpoint(
        header["kind"],
        arrays,
        header.get("meta", {}),
        header.get("config", ""),
        header.get("config_hash", ""),
        header.get("seed", 0),
        version,
    )


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return from_bytes(blob, kind)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
