"""On-disk model containers.

A container is a directory of three files:

* ``config.json`` -- architecture fields plus ``format_version`` and a
  ``tensors`` manifest (name, rows, cols, byte offset into the blob).
* ``weights.bin`` -- row-major little-endian float64 tensor data, packed in
  manifest order with 8-byte aligned offsets.
* ``checksum.txt`` -- hex CRC-64 of ``weights.bin``.

The CRC is the XZ variant of CRC-64 (reflected ECMA-182 polynomial), done
slice-by-8 so multi-megabyte blobs hash quickly in pure Python.
"""

from __future__ import annotations

import json
import os

import numpy as np
from numpy.typing import NDArray

from .errors import ContainerFormatError

FORMAT_VERSION = 1
CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.bin"
CHECKSUM_FILE = "checksum.txt"

_CRC_POLY = 0xC96C5795D7870F42  # reflected ECMA-182
_CRC_MASK = (1 << 64) - 1


def _build_tables() -> list[list[int]]:
    base = []
    for b in range(256):
        crc = b
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC_POLY if crc & 1 else crc >> 1
        base.append(crc)
    tables = [base]
    for k in range(1, 8):
        prev = tables[k - 1]
        tables.append([tables[0][prev[b] & 0xFF] ^ (prev[b] >> 8) for b in range(256)])
    return tables


_TABLES = _build_tables()


def crc64(data: bytes) -> int:
    """CRC-64/XZ of a byte string."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _TABLES
    crc = _CRC_MASK
    n = len(data)
    end8 = n - (n % 8)
    for i in range(0, end8, 8):
        c = crc ^ int.from_bytes(data[i:i + 8], "little")
        crc = (
            t7[c & 0xFF]
            ^ t6[(c >> 8) & 0xFF]
            ^ t5[(c >> 16) & 0xFF]
            ^ t4[(c >> 24) & 0xFF]
            ^ t3[(c >> 32) & 0xFF]
            ^ t2[(c >> 40) & 0xFF]
            ^ t1[(c >> 48) & 0xFF]
            ^ t0[(c >> 56) & 0xFF]
        )
    for b in data[end8:]:
        crc = t0[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC_MASK


def write_container(path: str, config_fields: dict, tensors: list[tuple[str, NDArray]]) -> None:
    """Write a tensor directory. Overwrites files already present."""
    os.makedirs(path, exist_ok=True)
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f8")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ContainerFormatError(f"tensor {name!r} is not 2-D")
        blob = a.tobytes()
        if offset % 8:
            raise ContainerFormatError(f"misaligned offset for tensor {name!r}")
        manifest.append(
            {"name": name, "rows": int(a.shape[0]), "cols": int(a.shape[1]),
             "offset": offset}
        )
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    config = dict(config_fields)
    config["format_version"] = FORMAT_VERSION
    config["tensors"] = manifest
    with open(os.path.join(path, WEIGHTS_FILE), "wb") as f:
        f.write(payload)
    with open(os.path.join(path, CHECKSUM_FILE), "w", encoding="utf-8") as f:
        f.write(f"{crc64(payload):016x}\n")
    with open(os.path.join(path, CONFIG_FILE), "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def read_container(path: str) -> tuple[dict, dict[str, NDArray[np.float64]]]:
    """Read and validate a tensor directory.

    Returns (config dict, tensors by name). Raises ContainerFormatError for
    anything malformed: bad JSON, version or checksum mismatch, manifest
    entries that do not tile the blob, or misaligned offsets.
    """
    config_path = os.path.join(path, CONFIG_FILE)
    weights_path = os.path.join(path, WEIGHTS_FILE)
    checksum_path = os.path.join(path, CHECKSUM_FILE)
    for p in (config_path, weights_path, checksum_path):
        if not os.path.isfile(p):
            raise ContainerFormatError(f"container file missing: {p}")
    try:
        with open(config_path, encoding="utf-8") as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unreadable config.json: {exc}") from exc
    if not isinstance(config, dict):
        raise ContainerFormatError("config.json must hold a JSON object")
    version = config.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(
            f"unsupported format_version {version!r}, expected {FORMAT_VERSION}"
        )
    manifest = config.get("tensors")
    if not isinstance(manifest, list):
        raise ContainerFormatError("config.json missing tensors manifest")

    with open(weights_path, "rb") as f:
        payload = f.read()
    with open(checksum_path, encoding="utf-8") as f:
        recorded = f.read().strip()
    actual = f"{crc64(payload):016x}"
    if recorded != actual:
        raise ContainerFormatError(
            f"weights checksum mismatch: recorded {recorded}, actual {actual}"
        )

    tensors: dict[str, NDArray[np.float64]] = {}
    for entry in manifest:
        try:
            name = entry["name"]
            rows = int(entry["rows"])
            cols = int(entry["cols"])
            offset = int(entry["offset"])
        except (TypeError, KeyError, ValueError) as exc:
            raise ContainerFormatError(f"malformed manifest entry: {entry!r}") from exc
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor {name!r} in manifest")
        if rows <= 0 or cols <= 0:
            raise ContainerFormatError(f"tensor {name!r} has bad shape {rows}x{cols}")
        if offset % 8:
            raise ContainerFormatError(f"tensor {name!r} offset {offset} not 8-byte aligned")
        size = rows * cols * 8
        if offset < 0 or offset + size > len(payload):
            raise ContainerFormatError(
                f"tensor {name!r} extends past end of weights.bin"
            )
        arr = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
        tensors[name] = arr.reshape(rows, cols).astype(np.float64)
    return config, tensors
