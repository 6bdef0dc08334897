"""Binary weights container.

Layout of a ``.dsw`` file:

    bytes 0..7    magic ``DSWEIGHT``
    bytes 8..11   header length N, unsigned 32-bit little-endian
    bytes 12..12+N-1   UTF-8 JSON header
    remainder     raw little-endian float32 blocks, concatenated in
                  header declaration order

Header schema::

    {
      "version": 1,
      "endianness": "little",
      "dtype": "float32",
      "kind": "<appearance|semantic_backbone|semantic_head|...>",
      "profile": "<profile name>",
      "arrays": [{"name": "...", "shape": [...]}, ...],
      "meta": { ... free-form ... }
    }

Round trips are bit exact: load(save(x)) == x for every array.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"DSWEIGHT"
VERSION = 1


def save_weights(named_arrays, path, kind: str, profile: str, meta: dict | None = None) -> None:
    """Write named float32 arrays; accepts a dict or (name, array) iterable."""
    if isinstance(named_arrays, dict):
        items = list(named_arrays.items())
    else:
        items = list(named_arrays)
    header = {
        "version": VERSION,
        "endianness": "little",
        "dtype": "float32",
        "kind": kind,
        "profile": profile,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(arr.tobytes())


def load_weights(path):
    """Read a container; returns (header dict, {name: float32 array})."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read weights file {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: not a weights container (bad magic)")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if header_end > len(data):
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[header_start:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {header.get('version')}")
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise DataFormatError(f"{path}: unsupported dtype/endianness")
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        block = data[offset : offset + nbytes]
        if len(block) != nbytes:
            raise DataFormatError(
                f"{path}: truncated float block for {entry['name']!r} "
                f"(wanted {nbytes} bytes, got {len(block)})"
            )
        arrays[entry["name"]] = np.frombuffer(block, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} trailing bytes after float blocks")
    return header, arrays


def assign_named_arrays(params, arrays: dict, context: str) -> None:
    """Copy loaded arrays into a params struct, validating shape per layer."""
    for name, target in params.named_arrays():
        if name not in arrays:
            raise DataFormatError(f"{context}: missing array {name!r}")
        src = arrays[name]
        if src.shape != target.shape:
            raise DataFormatError(
                f"{context}: shape mismatch for layer {name!r}: "
                f"file has {src.shape}, model expects {target.shape}"
            )
        target[...] = src
    extra = set(arrays) - {name for name, _ in params.named_arrays()}
    if extra:
        raise DataFormatError(f"{context}: unexpected arrays in file: {sorted(extra)}")
