"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"RFDN"  version:u16  count:u32
    per entry: name_len:u16 name:utf-8  dtype:u8  rank:u8  dims:u32*rank  raw data

dtype 0 is float32; dtype 1 is uint8 and is used for the single
``__config__`` entry holding the model configuration as JSON text.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"RFDN"
VERSION = 1
CONFIG_ENTRY = "__config__"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries = dict(tensors)
    if meta is not None:
        entries[CONFIG_ENTRY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            arr = arr.astype("<f4")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an RFDN checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    tensors, meta = {}, None
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        name = blob[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if code not in DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"entry {name!r} truncated")
        arr = np.frombuffer(blob, dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
        if name == CONFIG_ENTRY:
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = arr.astype(np.float32)
    return tensors, meta


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None):
    Path(path).write_bytes(encode(tensors, meta))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    return decode(Path(path).read_bytes())
