"""Versioned binary container for named float64 tensors plus a JSON header.

Layout: magic | u32 version | u64 header length | JSON header (sorted keys) |
tensors as little-endian float64, row-major, in ``header["tensors"]`` order.
Equal inputs always produce byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def write_tensor_file(path, magic: bytes, version: int, header: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", version, len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class FormatVersionError(ValueError):
    pass


def read_tensor_file(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode()} file")
    off = len(magic)
    got_version, hlen = struct.unpack_from("<IQ", data, off)
    if got_version != version:
        raise FormatVersionError(f"{path}: file version {got_version}, this reader supports {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return header, tensors
