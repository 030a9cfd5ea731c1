"""Self-describing binary container for numeric artifacts.

Layout: 4 magic bytes, a uint64 little-endian header length, a UTF-8 JSON
header, then the raw array payload back to back. The header lists array
names/shapes/dtypes in payload order plus free-form metadata; all float
arrays are little-endian float64. A sha256 of the payload is stored so
readers can detect corruption.

Body models, datasets, network weights and prediction files all use this
one format (distinguished by the header's "kind" field).
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

MAGIC = b"SFC1"
FORMAT_VERSION = "1"

# dtypes allowed in the payload; everything is stored little-endian.
_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


class ContainerError(ValueError):
    """Malformed, truncated or incompatible container file."""


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.int64:
        return "<i8"
    if arr.dtype == np.uint8:
        return "|u1"
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


def write_container(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus metadata to `path`.

    Arrays are converted to float64/int64/uint8; the header JSON is
    serialized with sorted keys so identical inputs give identical bytes.
    """
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype(np.int64)
        dtype = _canonical_dtype(arr)
        blob = arr.astype(np.dtype(dtype)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(blob)

    payload = b"".join(blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arrays": entries,
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)


def read_container(path, expected_kind: str | None = None):
    """Read a container; returns (arrays dict, meta dict).

    Raises ContainerError on wrong magic, version mismatch, truncation,
    checksum failure or unexpected kind.
    """
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < 12:
        raise ContainerError(f"{path}: file too short to be a container")
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    header_len = int.from_bytes(data[4:12], "little")
    if len(data) < 12 + header_len:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from exc

    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: format version {header.get('format_version')!r} "
            f"not supported (expected {FORMAT_VERSION!r})"
        )
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise ContainerError(
            f"{path}: container kind {header.get('kind')!r}, expected {expected_kind!r}"
        )

    payload = data[12 + header_len :]
    expected_size = sum(
        int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
        for e in header["arrays"]
    )
    if len(payload) != expected_size:
        raise ContainerError(
            f"{path}: payload size {len(payload)} != expected {expected_size} (truncated?)"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ContainerError(f"{path}: payload checksum mismatch")

    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise ContainerError(f"{path}: disallowed dtype {entry['dtype']!r}")
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        raw = payload[offset : offset + count * dt.itemsize]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
        offset += count * dt.itemsize

    return arrays, header["meta"]
