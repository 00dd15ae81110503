"""Binary checkpoint container shared by denoiser and attack-model files.

Layout, all little-endian::

    magic        8 bytes   (b"GSAMIA01" denoiser, b"GSAATK01" attack model)
    version      u32
    n_header     u32
    header       n_header x i64
    n_arrays     u32
    per array:   u32 ndim, ndim x u32 extents, prod(extents) x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, header: list[int], arrays: list[np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    parts = [magic, struct.pack("<II", VERSION, len(header))]
    parts.append(struct.pack(f"<{len(header)}q", *[int(h) for h in header]))
    parts.append(struct.pack("<I", len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path, magic: bytes) -> tuple[list[int], list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != magic:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    off = 8
    try:
        version, n_header = struct.unpack_from("<II", buf, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = list(struct.unpack_from(f"<{n_header}q", buf, off))
        off += 8 * n_header
        (n_arrays,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated array data at byte {off}")
            arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header at byte {off}") from exc
    return header, arrays
