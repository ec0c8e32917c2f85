"""Versioned binary container for named float64 arrays plus a JSON header.

Layout (all integers little-endian)::

    8 bytes   magic
    uint32    version
    uint32    header length n
    n bytes   UTF-8 JSON header {"meta": ..., "arrays": [[name, shape], ...]}
    ...       arrays in header order, little-endian float64, C order

The header is written with sorted keys so identical content gives identical bytes.
"""
import json
import os
import struct
import tempfile

import numpy as np


class FormatError(ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(magic, version, meta, arrays):
    assert len(magic) == 8
    names = list(arrays)
    header = {"meta": meta, "arrays": [[n, list(np.shape(arrays[n]))] for n in names]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", version, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    return b"".join(parts)


def unpack(data, magic, version):
    if len(data) < 16:
        raise FormatError("file too short for header", len(data))
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}", 0)
    file_version, hlen = struct.unpack_from("<II", data, 8)
    if file_version != version:
        raise VersionError(f"unsupported version {file_version}, expected {version}", 8)
    if 16 + hlen > len(data):
        raise FormatError("truncated header", len(data))
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        specs = [(str(n), tuple(int(s) for s in shape)) for n, shape in header["arrays"]]
        meta = header["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", 16) from None
    pos = 16 + hlen
    arrays = {}
    for name, shape in specs:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"truncated array {name!r}", len(data))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after last array", pos)
    return meta, arrays
