"""Binary checkpoint container.

Layout, all little-endian:

  bytes 0-3   magic "BSL1"
  u32         header byte length
  header      UTF-8 "key=value" lines
  u32         record count
  per record  u32 name length, name UTF-8,
              u32 ndim, ndim x u32 dims,
              float64 data (row-major)

Records round-trip bit-exactly; they are written in sorted name order so
identical contents produce identical files.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"BSL1"


def save_checkpoint(path, header, arrays):
    """header: dict[str,str]; arrays: dict[str, float ndarray]."""
    htext = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(htext)))
        fh.write(htext)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (header dict, arrays dict). Raises DataError on bad files."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = {}
        for line in _read_exact(fh, hlen, "header").decode("utf-8").splitlines():
            if line:
                k, _, v = line.partition("=")
                header[k] = v
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            size = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, size * 8, f"data of {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays
