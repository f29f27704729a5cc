"""Checksummed little-endian binary blobs and JSON sidecars"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

import config
from core.errors import (
    ChecksumError,
    NotFoundError,
    PersistenceError,
    TruncatedFileError,
    VersionMismatchError,
)

CHECKSUM_BYTES = 8

PathLike = Union[str, Path]


def checksum(payload: bytes) -> bytes:
    """8-byte BLAKE2b digest"""
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def write_blob(path: PathLike, payload: bytes) -> None:
    """Write payload followed by its trailing checksum"""
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(payload)
            f.write(checksum(payload))
    except OSError as e:
        raise PersistenceError(path, f"write failed: {e}") from e


def read_blob(path: PathLike, expected_size: int) -> bytes:
    """
    Read a blob written by write_blob and verify it.

    Args:
        path: file to read
        expected_size: payload size in bytes (without checksum)

    Returns:
        payload bytes
    """
    path = Path(path)
    if not path.exists():
        raise NotFoundError(path, "file not found")
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise PersistenceError(path, f"read failed: {e}") from e
    if len(raw) != expected_size + CHECKSUM_BYTES:
        raise TruncatedFileError(
            path, f"expected {expected_size + CHECKSUM_BYTES} bytes, found {len(raw)}"
        )
    payload, stored = raw[:expected_size], raw[expected_size:]
    if checksum(payload) != stored:
        raise ChecksumError(path, "checksum mismatch")
    return payload


def array_to_bytes(values: np.ndarray, dtype: str = "<f4") -> bytes:
    """Row-major little-endian bytes"""
    return np.ascontiguousarray(values, dtype=np.dtype(dtype)).tobytes(order="C")


def bytes_to_array(payload: bytes, shape, dtype: str = "<f4") -> np.ndarray:
    """Read-only native-order view of little-endian bytes"""
    values = np.frombuffer(payload, dtype=np.dtype(dtype)).reshape(shape)
    return values.astype(np.dtype(dtype).newbyteorder("="), copy=False)


def write_json(path: PathLike, document: Dict[str, Any]) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, ensure_ascii=False)
    except OSError as e:
        raise PersistenceError(path, f"write failed: {e}") from e


def read_json(path: PathLike, check_version: bool = True) -> Dict[str, Any]:
    """Load a JSON sidecar, rejecting unknown format versions"""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(path, "file not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise PersistenceError(path, f"invalid JSON: {e}") from e
    except OSError as e:
        raise PersistenceError(path, f"read failed: {e}") from e
    if check_version and document.get("format_version") != config.FORMAT_VERSION:
        raise VersionMismatchError(
            path,
            f"format version {document.get('format_version')} != {config.FORMAT_VERSION}",
        )
    return document
