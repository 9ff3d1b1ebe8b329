"""Standalone FTZ writer.

The refinement pipeline consumes tensors through the FTZ file format, so this
package carries its own serializer rather than importing the consumer: the
byte layout is the interface.

    magic   4 bytes  b"FREF"
    version u16 LE   1
    dtype   u8       0 (little-endian float32)
    rank    u8       2 or 3
    dims    rank x u32 LE
    payload row-major float32 LE
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FREF"
VERSION = 1
DTYPE_F32 = 0


def write_ftz(array: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise ValueError(f"FTZ holds rank 2 or 3 tensors, got rank {arr.ndim}")
    if min(arr.shape) <= 0:
        raise ValueError("FTZ dims must be positive")
    if not np.all(np.isfinite(arr)):
        raise ValueError("FTZ payload must be finite")
    header = struct.pack("<4sHBB", MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + dims + arr.astype("<f4", copy=False).tobytes(order="C"))
