"""Binary containers for channel sets, codebooks, datasets and checkpoints.

All formats are little-endian and contain no timestamps, so writing the
same object twice yields identical bytes. Files are written to a
temporary name and renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .codebooks import Codebook, CodebookKind
from .errors import FingerprintMismatch, FormatError
from .scenario import ChannelSet

VERSION = 1
_KINDS = list(CodebookKind)
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def atomic_write(path, data) -> None:
    """Write ``data`` (bytes, or a callable taking the open file) via a renamed temporary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            if callable(data):
                data(fh)
            else:
                fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _complex_payload(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.complex128)
    return a.astype("<c16").tobytes()


def _read_exact(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise FormatError("file is truncated")
    return bytes(buf[pos:pos + n]), pos + n


# --------------------------------------------------------------------------
# channel sets and codebooks
# --------------------------------------------------------------------------

def channel_bytes(hs: ChannelSet) -> bytes:
    """``XBMC`` container: header, interleaved (re, im) doubles, then ids and known mask."""
    h = hs.h
    head = b"XBMC" + struct.pack("<H5IB", VERSION, *h.shape, 1)
    tail = (np.asarray(hs.user_ids, "<i8").tobytes()
            + np.asarray(hs.known_mask, "u1").tobytes())
    return head + _complex_payload(h) + tail


def save_channels(path, hs: ChannelSet) -> None:
    atomic_write(path, channel_bytes(hs))


def load_channels(path) -> ChannelSet:
    buf = memoryview(Path(path).read_bytes())
    magic, pos = _read_exact(buf, 0, 4)
    if magic != b"XBMC":
        raise FormatError("not a channel-set file")
    raw, pos = _read_exact(buf, pos, struct.calcsize("<H5IB"))
    version, U, T, K, R, N, flag = struct.unpack("<H5IB", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    n = U * T * K * R * N
    data, pos = _read_exact(buf, pos, 16 * n)
    h = np.frombuffer(data, "<c16").astype(np.complex128).reshape(U, T, K, R, N)
    ids, known = np.arange(U), np.ones(U, bool)
    if flag & 1:
        raw, pos = _read_exact(buf, pos, 8 * U)
        ids = np.frombuffer(raw, "<i8").astype(np.int64)
        raw, pos = _read_exact(buf, pos, U)
        known = np.frombuffer(raw, "u1").astype(bool)
    return ChannelSet.from_dense(h, ids, known)


def codebook_bytes(cb: Codebook) -> bytes:
    """``XBMB`` container with dims ``(N_T, L)``.

    The flag byte stores the kind (bits 0-1), the constrained bit (bit 2)
    and the phase resolution (bits 3-7).
    """
    flag = _KINDS.index(cb.kind) | (int(cb.constrained) << 2) | ((cb.b_phase or 0) << 3)
    return b"XBMB" + struct.pack("<H2IB", VERSION, *cb.beams.shape, flag) + _complex_payload(cb.beams)


def save_codebook(path, cb: Codebook) -> None:
    atomic_write(path, codebook_bytes(cb))


def load_codebook(path) -> Codebook:
    buf = memoryview(Path(path).read_bytes())
    magic, pos = _read_exact(buf, 0, 4)
    if magic != b"XBMB":
        raise FormatError("not a codebook file")
    raw, pos = _read_exact(buf, pos, struct.calcsize("<H2IB"))
    version, n, L, flag = struct.unpack("<H2IB", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    data, pos = _read_exact(buf, pos, 16 * n * L)
    beams = np.frombuffer(data, "<c16").astype(np.complex128).reshape(n, L)
    b_phase = flag >> 3
    return Codebook(beams, _KINDS[flag & 3], bool(flag & 4), b_phase or None)


# --------------------------------------------------------------------------
# named-array containers (datasets and checkpoints)
# --------------------------------------------------------------------------

_CHUNK = 1 << 22


def _dtype_for(arr: np.ndarray) -> np.dtype:
    kind = arr.dtype.kind
    if kind == "f":
        return _DTYPES[0]
    if kind == "c":
        return _DTYPES[1]
    if kind == "b":
        return _DTYPES[3]
    return _DTYPES[2]


def write_arrays(fh, magic: bytes, fingerprint: tuple[int, ...], meta: dict, arrays) -> None:
    """Stream a named-array container to ``fh``.

    Layout: ``magic, version, n_fp, fingerprint u32s, meta json, count``,
    then per array its name, dtype code, dims and little-endian payload.
    ``arrays`` is a mapping or an iterable of ``(name, array)`` pairs; each
    array is converted in chunks, so peak memory stays near one chunk.
    """
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    meta_b = json.dumps(meta, sort_keys=True, default=str).encode()
    fh.write(magic + struct.pack("<HB", VERSION, len(fingerprint))
             + struct.pack(f"<{len(fingerprint)}I", *fingerprint)
             + struct.pack("<I", len(meta_b)) + meta_b + struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        dt = _dtype_for(arr)
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[dt], arr.ndim)
                 + struct.pack(f"<{arr.ndim}I", *arr.shape))
        flat = np.ascontiguousarray(arr).reshape(-1)
        for i in range(0, flat.size, _CHUNK):
            fh.write(flat[i:i + _CHUNK].astype(dt).tobytes())


def pack_arrays(magic: bytes, fingerprint: tuple[int, ...], meta: dict, arrays) -> bytes:
    """In-memory counterpart of :func:`write_arrays`."""
    buf = io.BytesIO()
    write_arrays(buf, magic, fingerprint, meta, arrays)
    return buf.getvalue()


def save_arrays(path, magic: bytes, fingerprint: tuple[int, ...], meta: dict, arrays) -> None:
    atomic_write(path, lambda fh: write_arrays(fh, magic, fingerprint, meta, arrays))


def _read(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("file is truncated")
    return raw


def read_arrays(fh, magic: bytes):
    """Parse a container header from ``fh``.

    Returns ``(fingerprint, meta, arrays)`` where ``arrays`` is a generator
    of ``(name, array)`` pairs read one at a time. The generator raises
    :class:`FormatError` on truncation or trailing bytes.
    """
    m = fh.read(4)
    if m != magic:
        raise FormatError(f"expected magic {magic!r}, found {m!r}")
    version, n_fp = struct.unpack("<HB", _read(fh, 3))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    fingerprint = struct.unpack(f"<{n_fp}I", _read(fh, 4 * n_fp))
    (n_meta,) = struct.unpack("<I", _read(fh, 4))
    meta = json.loads(_read(fh, n_meta).decode())
    (count,) = struct.unpack("<I", _read(fh, 4))

    def items():
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode()
            code, ndim = struct.unpack("<BB", _read(fh, 2))
            if code not in _DTYPES:
                raise FormatError(f"unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            dt = _DTYPES[code]
            payload = bytearray(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
            if fh.readinto(payload) != len(payload):
                raise FormatError("file is truncated")
            arr = np.frombuffer(payload, dt).reshape(shape)
            yield name, (arr.astype(bool) if code == 3
                         else arr.astype(dt.newbyteorder("="), copy=False))
        if fh.read(1):
            raise FormatError("trailing bytes after last array")

    return tuple(fingerprint), meta, items()


def unpack_arrays(data: bytes, magic: bytes):
    """Inverse of :func:`pack_arrays`; returns ``(fingerprint, meta, arrays)``."""
    fp, meta, items = read_arrays(io.BytesIO(data), magic)
    return fp, meta, dict(items)


def load_arrays(path, magic: bytes):
    with open(path, "rb") as fh:
        fp, meta, items = read_arrays(fh, magic)
        return fp, meta, dict(items)


def check_fingerprint(found, expected) -> None:
    if expected is not None and tuple(found) != tuple(expected):
        raise FingerprintMismatch(f"checkpoint fingerprint {tuple(found)} != {tuple(expected)}")
