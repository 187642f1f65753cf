"""Tiny binary tensor file format.

Layout, all little-endian:

    bytes 0..3   magic b"GTEN"
    byte  4      format version, currently 1
    byte  5      dtype code: 0 = float32, 1 = float64
    byte  6      ndim
    next  8*ndim u64 dimensions
    rest         C-order payload

Checkpoints are directories holding one ``.gten`` file per state entry plus a
flat ``manifest.txt`` of ``key = value`` lines.
"""

import struct

import numpy as np

MAGIC = b"GTEN"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_gten(path, arr):
    """Write a float32/float64 numpy array to ``path``."""
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError("gten stores float32/float64 only, got %s" % arr.dtype)
    if arr.ndim > 255:
        raise ValueError("gten supports at most 255 dimensions")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, code))
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_gten(path):
    """Read a ``.gten`` file back into a numpy array (native byte order)."""
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise ValueError("%s: not a GTEN file" % path)
        version, code, ndim = head[4], head[5], head[6]
        if version != VERSION:
            raise ValueError("%s: unsupported GTEN version %d" % (path, version))
        if code not in _CODE_DTYPES:
            raise ValueError("%s: unknown dtype code %d" % (path, code))
        dims_raw = fh.read(8 * ndim)
        if len(dims_raw) != 8 * ndim:
            raise ValueError("%s: truncated header" % path)
        shape = struct.unpack("<%dQ" % ndim, dims_raw) if ndim else ()
        dtype = _CODE_DTYPES[code]
        count = 1
        for d in shape:
            count *= d
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise ValueError("%s: truncated payload" % path)
        if fh.read(1):
            raise ValueError("%s: trailing bytes after payload" % path)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def write_manifest(path, entries):
    """Write ``key = value`` lines; keys sorted for byte-stable output."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write("%s = %s\n" % (key, entries[key]))


def read_manifest(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError("%s: bad manifest line %r" % (path, line))
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
