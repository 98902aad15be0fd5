"""Binary file formats: tensor container, parameter store, checkpoints,
PFM float maps and 16-bit PGM images.

All multi-byte integers in the custom containers are little-endian; tensor
payloads are row-major.  PGM16 pixels are big-endian per the Netpbm
convention; PFM rows are stored bottom-up with a sign-encoded endianness
scale line.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .tensor import ConfigError, Tensor
from .params import ParamStore

__all__ = [
    "ParseError",
    "write_tensor", "read_tensor",
    "write_param_store", "read_param_store", "load_param_store",
    "save_checkpoint", "load_checkpoint",
    "write_pfm", "read_pfm",
    "write_pgm16", "read_pgm16",
    "write_depth_pgm16", "read_depth_pgm16",
]

TENSOR_MAGIC = b"DFTN"
STORE_MAGIC = b"DFPS"
CKPT_MAGIC = b"PDCK"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class ParseError(ValueError):
    """Malformed or truncated file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated while reading {what}", f.tell() - len(buf))
    return buf


# tensor container ---------------------------------------------------------


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ConfigError(f"cannot serialize dtype {arr.dtype}")
    if arr.ndim > 4:
        raise ConfigError("cannot serialize tensors of rank > 4")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", _DTYPE_CODES[arr.dtype])
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _tensor_from(f) -> np.ndarray:
    start = f.tell()
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise ParseError(f"bad tensor magic {magic!r}", start)
    rank = _read_exact(f, 1, "tensor rank")[0]
    if rank > 4:
        raise ParseError(f"tensor rank {rank} exceeds 4", f.tell() - 1)
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor shape"))
    code = _read_exact(f, 1, "tensor dtype")[0]
    if code not in _CODE_DTYPES:
        raise ParseError(f"unknown dtype code {code}", f.tell() - 1)
    dt = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, count * dt.itemsize, "tensor payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.astype(_CODE_DTYPES[code])


def write_tensor(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as f:
        f.write(_tensor_bytes(arr))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        arr = _tensor_from(f)
        trailing = f.read(1)
        if trailing:
            raise ParseError("trailing bytes after tensor payload", f.tell() - 1)
    return Tensor(arr)


# parameter store container -------------------------------------------------


def _store_bytes(named_arrays) -> bytes:
    out = io.BytesIO()
    named_arrays = list(named_arrays)
    out.write(STORE_MAGIC + struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        enc = name.encode("utf-8")
        out.write(struct.pack("<H", len(enc)) + enc)
        out.write(_tensor_bytes(np.asarray(arr)))
    return out.getvalue()


def _store_from(f) -> list:
    start = f.tell()
    magic = _read_exact(f, 4, "store magic")
    if magic != STORE_MAGIC:
        raise ParseError(f"bad parameter store magic {magic!r}", start)
    (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, nlen, "entry name").decode("utf-8")
        entries.append((name, _tensor_from(f)))
    return entries


def write_param_store(path, store: ParamStore) -> None:
    with open(path, "wb") as f:
        f.write(_store_bytes(store.state_arrays()))


def read_param_store(path) -> list:
    """Return [(name, ndarray), ...] in file order."""
    with open(path, "rb") as f:
        return _store_from(f)


def load_param_store(path, store: ParamStore) -> None:
    store.load_arrays(dict(read_param_store(path)))


# checkpoints ----------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, meta: dict) -> None:
    """Parameter snapshot plus a JSON metadata line (config echo, class
    count, anything needed to rebuild the model)."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        f.write(_store_bytes(store.state_arrays()))


def load_checkpoint(path):
    """Return (meta dict, {name: ndarray})."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CKPT_MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", 0)
        (blen,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        blob = _read_exact(f, blen, "metadata")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ParseError("checkpoint metadata is not valid JSON", 8)
        entries = _store_from(f)
    return meta, dict(entries)


# PFM ------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write (h, w) or (h, w, 3) float32 data as Pf/PF, rows bottom-up,
    little-endian (scale line -1.0)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ConfigError(f"PFM data must be (h, w) or (h, w, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    flipped = np.ascontiguousarray(arr[::-1])
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(flipped.astype("<f4", copy=False).tobytes())


def _pfm_token(f) -> bytes:
    # headers may separate tokens with any whitespace, comments excluded
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ParseError("truncated PFM header", f.tell())
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pfm(path) -> np.ndarray:
    """Return (h, w) float32 for Pf, (h, w, 3) for PF, top-down rows."""
    with open(path, "rb") as f:
        kind = _pfm_token(f)
        if kind not in (b"Pf", b"PF"):
            raise ParseError(f"bad PFM magic {kind!r}", 0)
        channels = 3 if kind == b"PF" else 1
        try:
            w = int(_pfm_token(f))
            h = int(_pfm_token(f))
            scale = float(_pfm_token(f))
        except ValueError:
            raise ParseError("non-numeric PFM header field", f.tell())
        if w < 1 or h < 1:
            raise ParseError(f"bad PFM extents {w}x{h}", f.tell())
        if scale == 0:
            raise ParseError("PFM scale must be non-zero", f.tell())
        dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        payload = _read_exact(f, w * h * channels * 4, "PFM payload")
    arr = np.frombuffer(payload, dtype=dt).astype(np.float32)
    arr = arr.reshape((h, w) if channels == 1 else (h, w, channels))
    return np.ascontiguousarray(arr[::-1])


# PGM16 ----------------------------------------------------------------------


def write_pgm16(path, values: np.ndarray) -> None:
    """Write (h, w) uint16 data as binary P5 with maxval 65535."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ConfigError(f"PGM data must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if np.issubdtype(arr.dtype, np.integer) and arr.min() >= 0 and arr.max() <= 65535:
            arr = arr.astype(np.uint16)
        else:
            raise ConfigError("PGM16 needs uint16-compatible integer data")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.astype(">u2", copy=False).tobytes())


def read_pgm16(path) -> np.ndarray:
    """Return (h, w) uint16; only maxval 65535 binary P5 is accepted."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 2, "PGM magic")
        if magic != b"P5":
            raise ParseError(f"bad PGM magic {magic!r}", 0)
        try:
            w = int(_pfm_token(f))
            h = int(_pfm_token(f))
            maxval = int(_pfm_token(f))
        except ValueError:
            raise ParseError("non-numeric PGM header field", f.tell())
        if w < 1 or h < 1:
            raise ParseError(f"bad PGM extents {w}x{h}", f.tell())
        if maxval != 65535:
            raise ParseError(f"only 16-bit PGM supported, got maxval {maxval}", f.tell())
        payload = _read_exact(f, w * h * 2, "PGM payload")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


def write_depth_pgm16(path, plane: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """Quantize a float plane in [lo, hi] to the full 16-bit range."""
    if hi <= lo:
        raise ConfigError("depth range must satisfy hi > lo")
    arr = np.asarray(plane, dtype=np.float64)
    q = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    write_pgm16(path, np.round(q * 65535.0).astype(np.uint16))


def read_depth_pgm16(path, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    raw = read_pgm16(path).astype(np.float32)
    return (raw / np.float32(65535.0)) * np.float32(hi - lo) + np.float32(lo)
