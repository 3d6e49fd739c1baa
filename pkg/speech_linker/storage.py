"""
Versioned binary files for model parameters and vector indexes.

Parameter file layout (all integers little-endian):
    magic "SELP" | u16 version | u16 kind length + kind | u32 meta length
    + canonical JSON meta | u16 array count | per array: u16 name length
    + name | u8 ndim | u64 per dimension | float64 row-major data

Index file layout:
    magic "SELI" | u16 version | u32 count | u32 d | u16 fingerprint length
    + fingerprint | per id: u32 length + UTF-8 id | float64 row-major matrix
"""

import json
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np


PARAMS_MAGIC = b"SELP"
INDEX_MAGIC = b"SELI"
FORMAT_VERSION = 1

_DTYPE = np.dtype("<f8")


class StorageError(Exception):
    """Raised when a parameter or index file cannot be read or written."""
    pass


def _read_exact(f: BinaryIO, size: int, path: Path) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise StorageError(f"Truncated file: {path}")
    return data


def _unpack(f: BinaryIO, fmt: str, path: Path):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt), path))


def _check_header(f: BinaryIO, magic: bytes, path: Path) -> None:
    found = _read_exact(f, len(magic), path)
    if found != magic:
        raise StorageError(f"Bad magic header in {path}: {found!r}")
    (version,) = _unpack(f, "<H", path)
    if version != FORMAT_VERSION:
        raise StorageError(f"Unsupported format version {version} in {path}")


def canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_param_file(
    path: Union[str, Path],
    kind: str,
    meta: dict,
    arrays: dict[str, np.ndarray],
) -> None:
    """Write named float64 arrays plus JSON metadata to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    kind_bytes = kind.encode("utf-8")
    meta_bytes = canonical_json(meta)

    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<H", len(kind_bytes)) + kind_bytes)
        f.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        f.write(struct.pack("<H", len(arrays)))
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=_DTYPE)
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)) + name_bytes)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes(order="C"))


def read_param_file(
    path: Union[str, Path],
    kind: str,
) -> tuple[dict, dict[str, np.ndarray]]:
    """
    Read a parameter file written by write_param_file.

    Raises:
        StorageError: On a missing file, bad header, version or kind.
    """
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Parameter file not found: {path}")

    with open(path, "rb") as f:
        _check_header(f, PARAMS_MAGIC, path)
        (kind_len,) = _unpack(f, "<H", path)
        found_kind = _read_exact(f, kind_len, path).decode("utf-8")
        if found_kind != kind:
            raise StorageError(f"Expected a '{kind}' file, {path} holds '{found_kind}'")
        (meta_len,) = _unpack(f, "<I", path)
        meta = json.loads(_read_exact(f, meta_len, path).decode("utf-8"))
        (count,) = _unpack(f, "<H", path)

        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = _unpack(f, "<H", path)
            name = _read_exact(f, name_len, path).decode("utf-8")
            (ndim,) = _unpack(f, "<B", path)
            shape = _unpack(f, f"<{ndim}Q", path) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, size * _DTYPE.itemsize, path)
            arrays[name] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)

    return meta, arrays


def write_index_file(
    path: Union[str, Path],
    ids: list[str],
    matrix: np.ndarray,
    fingerprint: str,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(matrix, dtype=_DTYPE)
    if data.ndim != 2 or data.shape[0] != len(ids):
        raise StorageError(f"Index matrix shape {data.shape} does not match {len(ids)} ids")

    fp_bytes = fingerprint.encode("ascii")
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<II", data.shape[0], data.shape[1]))
        f.write(struct.pack("<H", len(fp_bytes)) + fp_bytes)
        for entity_id in ids:
            id_bytes = entity_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)) + id_bytes)
        f.write(data.tobytes(order="C"))


def read_index_file(path: Union[str, Path]) -> tuple[list[str], np.ndarray, str]:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Index file not found: {path}")

    with open(path, "rb") as f:
        _check_header(f, INDEX_MAGIC, path)
        count, d = _unpack(f, "<II", path)
        (fp_len,) = _unpack(f, "<H", path)
        fingerprint = _read_exact(f, fp_len, path).decode("ascii")
        ids = []
        for _ in range(count):
            (id_len,) = _unpack(f, "<I", path)
            ids.append(_read_exact(f, id_len, path).decode("utf-8"))
        raw = _read_exact(f, count * d * _DTYPE.itemsize, path)
        matrix = np.frombuffer(raw, dtype=_DTYPE).reshape(count, d).astype(np.float64)

    return ids, matrix, fingerprint
