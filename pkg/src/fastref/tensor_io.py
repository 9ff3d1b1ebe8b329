"""FTZ feature-tensor file format and the in-memory tensor types.

The FTZ layout is fixed and bit-exact so independent producers (the feature
exporter, test fixtures written by hand) interoperate without a shared
runtime:

    magic   4 bytes  b"FREF"
    version u16 LE   1
    dtype   u8       0 (little-endian float32)
    rank    u8       2 or 3
    dims    rank x u32 LE
    payload rank-product x 4 bytes, row-major float32 LE

Rank 2 round-trips as :class:`FlatFeatures` (rows x channels), rank 3 as
:class:`FeatureMap` (height x width x channels).  NaN/Inf payloads are
rejected at read time; every downstream formula assumes finite inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import (
    BadMagicError,
    BadRankError,
    DimsOverflowError,
    InvalidDimsError,
    InvalidInputError,
    NonFiniteError,
    TrailingDataError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

MAGIC = b"FREF"
VERSION = 1
DTYPE_F32 = 0

EUCLIDEAN = "euclidean"
COSINE = "cosine"
METRIC_MODES = (EUCLIDEAN, COSINE)

# Largest payload we agree to allocate: 2**40 bytes. Anything above is either
# corruption or an attack, not a feature tensor.
_MAX_PAYLOAD_BYTES = 1 << 40

_HEADER = struct.Struct("<4sHBB")


def _as_f32(data, shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.shape != shape:
        raise InvalidInputError(f"{what}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: payload contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """An h x w grid of c-dimensional feature vectors for one image."""

    height: int
    width: int
    channels: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.height, self.width, self.channels) <= 0:
            raise InvalidInputError("FeatureMap dims must be positive")
        object.__setattr__(
            self,
            "data",
            _as_f32(self.data, (self.height, self.width, self.channels), "FeatureMap"),
        )

    @classmethod
    def from_array(cls, arr) -> "FeatureMap":
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise InvalidInputError(f"FeatureMap.from_array wants rank 3, got rank {arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr.shape[2], arr)


@dataclass(frozen=True)
class FlatFeatures:
    """Row-major flattened features: one row per patch location."""

    rows: int
    channels: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.rows, self.channels) <= 0:
            raise InvalidInputError("FlatFeatures dims must be positive")
        object.__setattr__(
            self, "data", _as_f32(self.data, (self.rows, self.channels), "FlatFeatures")
        )

    @classmethod
    def from_array(cls, arr) -> "FlatFeatures":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise InvalidInputError(f"FlatFeatures.from_array wants rank 2, got rank {arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr)


@dataclass(frozen=True)
class PrototypeBank:
    """n x c matrix of normal prototype vectors (the memory bank)."""

    count: int
    channels: int
    data: np.ndarray = field(repr=False)
    metric_mode: str = EUCLIDEAN

    def __post_init__(self):
        if min(self.count, self.channels) <= 0:
            raise InvalidInputError("PrototypeBank dims must be positive")
        if self.metric_mode not in METRIC_MODES:
            raise InvalidInputError(f"unknown metric_mode {self.metric_mode!r}")
        object.__setattr__(
            self, "data", _as_f32(self.data, (self.count, self.channels), "PrototypeBank")
        )
        if self.metric_mode == COSINE:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-5):
                raise InvalidInputError("cosine-mode bank rows must have unit L2 norm")

    @classmethod
    def from_array(cls, arr, metric_mode: str = EUCLIDEAN) -> "PrototypeBank":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise InvalidInputError(f"PrototypeBank.from_array wants rank 2, got rank {arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], arr, metric_mode)


Tensor = Union[FeatureMap, FlatFeatures]


def flatten_map(fmap: FeatureMap) -> FlatFeatures:
    """Flatten an h x w x c map into (h*w) x c, row-major over (h, w)."""
    h, w, c = fmap.height, fmap.width, fmap.channels
    return FlatFeatures(h * w, c, fmap.data.reshape(h * w, c))


def reshape_flat(flat: FlatFeatures, height: int, width: int) -> FeatureMap:
    """Inverse of :func:`flatten_map`; requires rows == height * width."""
    if height * width != flat.rows:
        raise InvalidInputError(
            f"cannot reshape {flat.rows} rows into {height}x{width} grid"
        )
    return FeatureMap(height, width, flat.channels, flat.data.reshape(height, width, flat.channels))


def write_tensor(tensor: Union[Tensor, np.ndarray], path) -> None:
    """Write a rank-2 or rank-3 tensor in the FTZ layout, byte-for-byte deterministic."""
    if isinstance(tensor, (FeatureMap, FlatFeatures)):
        arr = tensor.data
    else:
        arr = np.ascontiguousarray(tensor, dtype=np.float32)
        if arr.ndim not in (2, 3):
            raise InvalidInputError(f"write_tensor wants rank 2 or 3, got rank {arr.ndim}")
        if min(arr.shape) <= 0:
            raise InvalidInputError("write_tensor: dims must be positive")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("write_tensor: payload contains NaN or Inf")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + dims + payload)


def read_tensor(path) -> Tensor:
    """Parse an FTZ file; rank 2 yields FlatFeatures, rank 3 yields FeatureMap."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header")
    magic, version, dtype, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype code {dtype}")
    if rank not in (2, 3):
        raise BadRankError(f"{path}: unsupported rank {rank}")
    dims_end = _HEADER.size + 4 * rank
    if len(raw) < dims_end:
        raise TruncatedPayloadError(f"{path}: header truncated before dims")
    dims = struct.unpack_from(f"<{rank}I", raw, _HEADER.size)
    if any(d == 0 for d in dims):
        raise InvalidDimsError(f"{path}: zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count * 4 > _MAX_PAYLOAD_BYTES:
        raise DimsOverflowError(f"{path}: dims {dims} declare an implausible payload")
    expected = count * 4
    actual = len(raw) - dims_end
    if actual < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {actual} bytes, header requires {expected}"
        )
    if actual > expected:
        raise TrailingDataError(
            f"{path}: payload has {actual} bytes, header requires {expected}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    if rank == 2:
        return FlatFeatures(dims[0], dims[1], arr)
    return FeatureMap(dims[0], dims[1], dims[2], arr)


@dataclass(frozen=True)
class ManifestEntry:
    """One image record in the JSON-lines run manifest."""

    tensor: str
    label: int
    mask: str | None = None
    image_hw: tuple[int, int] = (0, 0)
    s0: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError(f"manifest label must be 0 or 1, got {self.label}")
        if self.s0 is not None and not (0.0 <= self.s0 <= 1.0):
            raise InvalidInputError(f"manifest s0 must lie in [0, 1], got {self.s0}")

    def to_record(self) -> dict:
        rec = {
            "tensor": self.tensor,
            "label": self.label,
            "mask": self.mask,
            "image_hw": list(self.image_hw),
        }
        if self.s0 is not None:
            rec["s0"] = self.s0
        return rec


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    lines = [json.dumps(e.to_record(), sort_keys=True) for e in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        try:
            entries.append(
                ManifestEntry(
                    tensor=rec["tensor"],
                    label=int(rec["label"]),
                    mask=rec.get("mask"),
                    image_hw=tuple(rec.get("image_hw", (0, 0))),
                    s0=rec.get("s0"),
                )
            )
        except KeyError as exc:
            raise InvalidInputError(f"{path}:{lineno}: missing field {exc}") from exc
    return entries
