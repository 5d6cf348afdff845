"""Binary tensor container and PGM mask I/O.

Container layout (all little-endian)::

    4 bytes   magic b"PTN1"
    u8        dtype code (see DTYPE_CODES)
    u8        rank
    u32*rank  dims
    payload   row-major raw values, product(dims) * itemsize bytes
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PTN1"
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
    5: np.dtype("<i8"),
}
_CODE_OF = {np.dtype(v).newbyteorder("=").str: k for k, v in DTYPE_CODES.items()}
_U32_MAX = 2 ** 32 - 1


class ContainerFormatError(ValueError):
    """Malformed or truncated tensor container."""


def _code_for(dtype) -> int:
    key = np.dtype(dtype).newbyteorder("=").str
    if key not in _CODE_OF:
        raise TypeError(f"unsupported dtype for container: {dtype}")
    return _CODE_OF[key]


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    code = _code_for(a.dtype)
    if a.ndim > 255:
        raise ContainerFormatError("rank exceeds 255")
    if any(d > _U32_MAX for d in a.shape):
        raise ContainerFormatError("dimension exceeds u32 range")
    header = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    payload = np.ascontiguousarray(a, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise ContainerFormatError("truncated header")
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic {buf[:4]!r}")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise ContainerFormatError(f"unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise ContainerFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = DTYPE_CODES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes > len(buf) - off:
        raise ContainerFormatError(f"payload truncated: need {nbytes} bytes, have {len(buf) - off}")
    if nbytes != len(buf) - off:
        raise ContainerFormatError("trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def read_header(path) -> tuple[np.dtype, tuple]:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != MAGIC:
            raise ContainerFormatError(f"{path}: not a tensor container")
        code, rank = struct.unpack_from("<BB", head, 4)
        if code not in DTYPE_CODES:
            raise ContainerFormatError(f"unknown dtype code {code}")
        raw = fh.read(4 * rank)
        if len(raw) < 4 * rank:
            raise ContainerFormatError("truncated dims")
        return DTYPE_CODES[code], struct.unpack(f"<{rank}I", raw)


def write_container(path, array):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_tensor(array))
    os.replace(tmp, path)


def read_container(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_pgm(path, mask):
    """Binary mask -> 8-bit P5 image with values 0/255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("PGM mask must be 2-D")
    h, w = m.shape
    body = np.where(m > 0, 255, 0).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def read_pgm(path, binary=True) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ContainerFormatError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ContainerFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ContainerFormatError("16-bit PGM not supported")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ContainerFormatError(f"{path}: truncated PGM payload")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return (img > 127).astype(np.uint8) if binary else img.copy()
