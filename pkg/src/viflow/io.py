"""Binary and text file formats.

* VIFT  - single tensor: b"VIFT", u32 version, u8 rank, u32 extents, f32 data
* .flo  - Middlebury flow: f32 magic 202021.25, i32 width, i32 height, (u, v) f32 pairs
* PGM/PPM - 8-bit binary greyscale / colour images
* IMU CSV - timestamp, gx, gy, gz, ax, ay, az

All integers and floats are little-endian.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from viflow.errors import FormatError

VIFT_MAGIC = b"VIFT"
VIFT_VERSION = 1
FLO_MAGIC = 202021.25


class Reader:
    """Cursor over a bytes buffer that reports the failing offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def pack_tensor_body(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds 255")
    parts = [struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def read_tensor_body(r: Reader, what: str = "tensor") -> np.ndarray:
    (rank,) = r.unpack("<B", f"{what} rank")
    shape = r.unpack(f"<{rank}I", f"{what} extents") if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    raw = r.take(4 * count, f"{what} data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _write_bytes(path, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(payload)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# VIFT ----------------------------------------------------------------------

def encode_vift(arr) -> bytes:
    return VIFT_MAGIC + struct.pack("<I", VIFT_VERSION) + pack_tensor_body(arr)


def decode_vift(data: bytes) -> np.ndarray:
    r = Reader(data)
    magic = r.take(4, "magic")
    if magic != VIFT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'VIFT'", 0)
    (version,) = r.unpack("<I", "version")
    if version != VIFT_VERSION:
        raise FormatError(f"unsupported VIFT version {version}", 4)
    arr = read_tensor_body(r)
    if not r.exhausted:
        raise FormatError("trailing bytes after tensor", r.pos)
    return arr


def save_vift(path, arr):
    _write_bytes(path, encode_vift(arr))


def load_vift(path) -> np.ndarray:
    return decode_vift(_read_bytes(path))


# .flo ----------------------------------------------------------------------

def encode_flo(vectors) -> bytes:
    vectors = np.asarray(vectors)
    if vectors.ndim != 3 or vectors.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {vectors.shape}")
    h, w = vectors.shape[:2]
    return (struct.pack("<f", FLO_MAGIC) + struct.pack("<ii", w, h)
            + np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def decode_flo(data: bytes) -> np.ndarray:
    r = Reader(data)
    (magic,) = r.unpack("<f", "magic")
    if magic != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {magic}, expected {FLO_MAGIC}", 0)
    w, h = r.unpack("<ii", "dimensions")
    if w < 0 or h < 0:
        raise FormatError(f"negative .flo dimensions {w}x{h}", 4)
    raw = r.take(8 * w * h, "flow data")
    if not r.exhausted:
        raise FormatError("trailing bytes after flow data", r.pos)
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def save_flo(path, vectors):
    _write_bytes(path, encode_flo(vectors))


def load_flo(path) -> np.ndarray:
    return decode_flo(_read_bytes(path))


# PGM / PPM -----------------------------------------------------------------

def to_uint8(values) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_pgm(path, image):
    data = to_uint8(image)
    if data.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    h, w = data.shape
    _write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def save_ppm(path, rgb):
    data = to_uint8(rgb)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PPM needs an HxWx3 array")
    h, w = data.shape[:2]
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def load_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255; returns uint8 array."""
    data = _read_bytes(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
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
            raise FormatError("truncated PNM header", pos)
        tokens.append(data[start:pos])
    pos += 1
    kind = tokens[0]
    if kind not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM kind {kind!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    channels = 1 if kind == b"P5" else 3
    body = data[pos:pos + w * h * channels]
    if len(body) != w * h * channels:
        raise FormatError("truncated PNM pixel data", pos + len(body))
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


# IMU CSV -------------------------------------------------------------------

IMU_CSV_HEADER = "timestamp,gx,gy,gz,ax,ay,az"


def save_imu_csv(path, timestamps, samples):
    buf = io.StringIO()
    buf.write(IMU_CSV_HEADER + "\n")
    for t, row in zip(np.asarray(timestamps), np.asarray(samples)):
        buf.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def load_imu_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] != 7:
        raise FormatError(f"{os.fspath(path)}: expected 7 columns, got {arr.shape[1]}")
    return arr[:, 0], arr[:, 1:]
