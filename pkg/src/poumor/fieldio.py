"""POUF binary container for tensors and named-tensor tables (checkpoints).

Layout, all little-endian::

    b"POUF" | u16 version | u8 tag | ...
    tag in {0: f64, 1: c128, 2: u8, 3: i64}:  u8 rank | u64 dims[rank] | row-major payload
    tag 255 (table):  u32 count | count * (u16 name length | utf-8 name | tensor record)

A tensor record inside a table is ``u8 tag | u8 rank | dims | payload``.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"POUF"
VERSION = 1
TABLE = 255
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
TAGS = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1, np.dtype(np.uint8): 2,
        np.dtype(np.int64): 3, np.dtype(bool): 2}


class FormatError(ValueError):
    pass


def _tag_for(a: np.ndarray) -> int:
    tag = TAGS.get(a.dtype)
    if tag is None:
        if np.issubdtype(a.dtype, np.floating):
            return 0
        if np.issubdtype(a.dtype, np.complexfloating):
            return 1
        if np.issubdtype(a.dtype, np.integer):
            return 3
        raise FormatError(f"unsupported dtype {a.dtype}")
    return tag


def _write_record(buf, a) -> None:
    a = np.asarray(a)
    tag = _tag_for(a)
    buf.write(struct.pack("<BB", tag, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=DTYPES[tag]).tobytes())


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def _read_record(buf, tag: int | None = None) -> np.ndarray:
    if tag is None:
        (tag,) = struct.unpack("<B", _read_exact(buf, 1))
    if tag not in DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack("<B", _read_exact(buf, 1))
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank))
    dt = DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(buf, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def dumps(obj) -> bytes:
    """Serialise an array or a ``{name: array}`` mapping."""
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<H", VERSION))
    if isinstance(obj, Mapping):
        buf.write(struct.pack("<BI", TABLE, len(obj)))
        for name, a in obj.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)) + raw)
            _write_record(buf, a)
    else:
        _write_record(buf, obj)
    return buf.getvalue()


def loads(data: bytes):
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise FormatError("bad magic: not a POUF file")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    (tag,) = struct.unpack("<B", _read_exact(buf, 1))
    if tag == TABLE:
        (count,) = struct.unpack("<I", _read_exact(buf, 4))
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read_exact(buf, 2))
            name = _read_exact(buf, ln).decode("utf-8")
            out[name] = _read_record(buf)
        obj = out
    else:
        obj = _read_record(buf, tag)
    if buf.read(1):
        raise FormatError("trailing bytes after payload")
    return obj


def write(path, obj) -> None:
    Path(path).write_bytes(dumps(obj))


def read(path):
    return loads(Path(path).read_bytes())


def json_tensor(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def tensor_json(a: np.ndarray):
    return json.loads(np.asarray(a, dtype=np.uint8).tobytes().decode("utf-8"))


def write_checkpoint(path, params: Mapping, config: dict, optimizer: Mapping | None = None,
                     step: int = 0) -> None:
    table = {f"param:{k}": np.asarray(v, dtype=float) for k, v in sorted(params.items())}
    table["__config__"] = json_tensor(config)
    for k, v in sorted((optimizer or {}).items()):
        table[f"opt:{k}"] = np.asarray(v, dtype=float)
    table["__step__"] = np.array([step], dtype=np.int64)
    write(path, table)


def read_checkpoint(path):
    table = read(path)
    if not isinstance(table, dict) or "__config__" not in table:
        raise FormatError(f"{path} is not a checkpoint")
    params = {k[6:]: v for k, v in table.items() if k.startswith("param:")}
    opt = {k[4:]: v for k, v in table.items() if k.startswith("opt:")}
    step = int(table["__step__"][0]) if "__step__" in table else 0
    return params, tensor_json(table["__config__"]), opt, step
