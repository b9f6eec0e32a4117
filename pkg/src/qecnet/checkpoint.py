"""Versioned checkpoint files: a JSON manifest followed by raw float64 arrays.

Layout (all multi-byte fields little-endian):

    bytes 0..7    magic ``b"QECCKPT1"``
    bytes 8..11   uint32: manifest length in bytes
    manifest      UTF-8 JSON: {"format_version": 1,
                               "config": <arbitrary JSON>,
                               "arrays": [{"name": str, "shape": [int...]}]}
    payload       for each manifest entry in order: C-order float64 values

Files are written to a temporary sibling and renamed into place, so a
half-written checkpoint can never be observed at the target path.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

MAGIC = b"QECCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` (name -> float array) plus a JSON-able ``config``."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config, "arrays": entries}
    ).encode("utf-8")

    payload = bytearray()
    payload += MAGIC
    payload += len(manifest).to_bytes(4, "little")
    payload += manifest
    for blob in blobs:
        payload += blob
    _atomic_write_bytes(path, bytes(payload))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as ``(config, {name: array})``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    mlen = int.from_bytes(raw[8:12], "little")
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {manifest.get('format_version')}")
    offset = 12 + mlen
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after declared arrays")
    return manifest["config"], arrays


def _atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    """Write text via temp-file-and-rename (shared by CLI outputs)."""
    _atomic_write_bytes(path, text.encode("utf-8"))
