"""Binary container for named arrays.

Layout, all integers little-endian::

    magic      8 bytes
    version    u32
    count      u32
    count records, sorted by name:
        u16 name length, UTF-8 name
        u8 dtype length, numpy dtype string
        u8 ndim, u64 per dimension
        u64 payload length, C-order payload

Anything that is not an array is stored as sorted-key JSON in a uint8
record called ``__meta__``, so saving what was loaded gives the same bytes.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"ADSENSE\x00"
VERSION = 1
META = "__meta__"


def _encode_meta(meta):
    text = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def dumps(arrays, meta=None):
    records = dict(arrays)
    if META in records:
        raise CheckpointError(f"{META} is a reserved record name")
    records[META] = _encode_meta(meta or {})
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name in sorted(records):
        value = np.ascontiguousarray(records[name])
        if value.dtype.hasobject:
            raise CheckpointError(f"Can not store object array {name}")
        dtype = value.dtype.newbyteorder("<") if value.dtype.byteorder == ">" else value.dtype
        value = value.astype(dtype, copy=False)
        encoded_name = name.encode("utf-8")
        dtype_str = dtype.str.encode("ascii")
        payload = value.tobytes(order="C")
        out.append(struct.pack("<H", len(encoded_name)))
        out.append(encoded_name)
        out.append(struct.pack("<B", len(dtype_str)))
        out.append(dtype_str)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError(
                f"{self.source}: truncated at byte {self.offset}, needed {size} more bytes"
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data, source="<bytes>"):
    """Returns (arrays, meta)."""
    reader = _Reader(data, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint file")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(
            f"{source} has format version {version}, this build reads version {VERSION}"
        )
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (dtype_len,) = reader.unpack("<B")
        dtype = np.dtype(reader.take(dtype_len).decode("ascii"))
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q")
        (size,) = reader.unpack("<Q")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if size != expected:
            raise CheckpointError(
                f"{source}: record {name} holds {size} bytes, shape {shape} needs {expected}"
            )
        arrays[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: trailing data after byte {reader.offset}")
    try:
        meta = json.loads(arrays.pop(META).tobytes().decode("utf-8"))
    except KeyError:
        raise CheckpointError(f"{source} has no {META} record")
    return arrays, meta


def save(path, arrays, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    tmp.replace(path)
    logging.debug("Wrote %d arrays to %s", len(arrays), path)


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Can not read checkpoint {path}: {exc}")
    return loads(data, str(path))
