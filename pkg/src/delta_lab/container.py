"""Single-file binary container: JSON manifest followed by raw array sections.

Layout::

    b"DLAB1\\n"              6 bytes magic
    header length          uint64 little-endian
    header                 canonical JSON (utf-8)
    payload                sections concatenated in manifest order

The header lists every section's name, dtype, shape, offset and size, plus the
sha256 of the whole payload so truncation and bit rot are both detected.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from delta_lab.errors import CorruptFileError, DataError, HashMismatchError

MAGIC = b"DLAB1\n"
_PREFIX = len(MAGIC) + 8
_DTYPES = {"<f4", "<f8", "<i4", "<i8"}


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_array(values: np.ndarray) -> str:
    """Content hash of an array's little-endian float64 bytes."""
    return sha256_hex(np.ascontiguousarray(values, dtype="<f8").tobytes())


def file_sha256(path: str | Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def encode(kind: str, meta: Mapping[str, Any], sections: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise TypeError(f"section {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = canonical_json(
        {"kind": kind, "meta": dict(meta), "sections": entries, "payload_sha256": sha256_hex(payload)}
    )
    return MAGIC + struct.pack("<Q", len(header)) + header + payload


def decode(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFileError("bad magic or short file at byte offset 0")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : _PREFIX])
    if _PREFIX + hlen > len(blob):
        raise CorruptFileError(
            f"header claims {hlen} bytes at byte offset {_PREFIX} but file has {len(blob) - _PREFIX}"
        )
    try:
        header = json.loads(blob[_PREFIX : _PREFIX + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unparseable header at byte offset {_PREFIX}: {exc}") from None
    if kind is not None and header.get("kind") != kind:
        raise CorruptFileError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    start = _PREFIX + hlen
    payload = blob[start:]
    expected = sum(s["nbytes"] for s in header["sections"])
    if len(payload) != expected:
        raise CorruptFileError(
            f"payload at byte offset {start} should hold {expected} bytes, found {len(payload)}"
        )
    if sha256_hex(payload) != header["payload_sha256"]:
        raise HashMismatchError("payload sha256 does not match the manifest")
    arrays = {}
    for s in header["sections"]:
        raw = payload[s["offset"] : s["offset"] + s["nbytes"]]
        arrays[s["name"]] = np.frombuffer(raw, dtype=s["dtype"]).reshape(s["shape"]).copy()
    return header, arrays


def write(path: str | Path, kind: str, meta: Mapping[str, Any], sections: Mapping[str, np.ndarray]) -> str:
    """Write a container and return the sha256 of the file bytes."""
    blob = encode(kind, meta, sections)
    Path(path).write_bytes(blob)
    return sha256_hex(blob)


def read(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return decode(path.read_bytes(), kind)
