"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian):

    bytes 0..7    magic ``ZINBVAE1`` (ASCII)
    bytes 8..11   uint32 header length H
    bytes 12..12+H JSON header (UTF-8, sorted keys) with at least
                  ``{"format_version": 1, "manifest": [{"name", "shape"}...]}``
    then          one raw block per manifest entry, in manifest order:
                  row-major float64 little-endian, prod(shape) values

The manifest is sorted by name, so identical arrays always serialize to
identical bytes. Model checkpoints and simulator ground-truth files both use
this container; any language can read it from this description.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"ZINBVAE1"
FORMAT_VERSION = 1


def write_array_container(path, arrays: dict[str, np.ndarray], extra_header: dict | None = None):
    manifest = [
        {"name": name, "shape": list(np.asarray(arrays[name]).shape)}
        for name in sorted(arrays)
    ]
    header = {"format_version": FORMAT_VERSION, "manifest": manifest}
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for item in manifest:
            arr = np.ascontiguousarray(arrays[item["name"]], dtype="<f8")
            fh.write(arr.tobytes())


def read_array_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError(f"{path}: not a {MAGIC.decode()} container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for item in header["manifest"]:
            shape = tuple(item["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise DataError(f"{path}: truncated block for array {item['name']!r}")
            arrays[item["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(
                np.float64
            )
        trailing = fh.read(1)
        if trailing:
            raise DataError(f"{path}: trailing bytes after final array block")
    return header, arrays
