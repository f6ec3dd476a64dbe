"""Scalar and label volumes with MetaImage-style (.mhd + .raw) file I/O.

Arrays are indexed ``data[x, y, z]``; on disk the payload is little-endian
with x varying fastest, so the linear index of voxel (x, y, z) is
``x + nx * (y + ny * z)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

_ELEMENT_TYPES = {"FLOAT32": np.dtype("<f4"), "UINT8": np.dtype("u1")}
_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile")


class VolumeFormatError(ValueError):
    """Raised for malformed headers or payloads."""


@dataclass(eq=False)
class Volume:
    """3D float32 image. ``data`` has shape ``(nx, ny, nz)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class LabelVolume(Volume):
    """3D uint8 region map: 0 is background, 1..R are regions."""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("labels must lie in [0, 255]")
        self.data = arr.astype(np.uint8)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def regions(self) -> list[int]:
        return [int(r) for r in np.unique(self.data) if r != 0]

    def mask(self, region: int) -> np.ndarray:
        return self.data == region


AnyVolume = Union[Volume, LabelVolume]


def _parse_header(text: str, path: Path) -> dict[str, str]:
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'Key = Value'")
        header[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise VolumeFormatError(f"{path}: missing header keys {missing}")
    return header


def load_volume(path) -> AnyVolume:
    """Read a .mhd header and its raw payload.

    UINT8 files come back as :class:`LabelVolume`, FLOAT32 as :class:`Volume`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    header = _parse_header(path.read_text(), path)
    try:
        ndims = int(header["NDims"])
        dims = tuple(int(v) for v in header["DimSize"].split())
        spacing = tuple(float(v) for v in header["ElementSpacing"].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
    if ndims != 3 or len(dims) != 3 or len(spacing) != 3:
        raise VolumeFormatError(f"{path}: only 3D volumes are supported")
    if min(dims) < 1:
        raise VolumeFormatError(f"{path}: DimSize must be positive")
    etype = header["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {etype!r}")
    dtype = _ELEMENT_TYPES[etype]

    raw_path = path.parent / header["ElementDataFile"]
    if not raw_path.is_file():
        raise FileNotFoundError(raw_path)
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F").copy()
    if etype == "UINT8":
        return LabelVolume(data=data, spacing=spacing)
    return Volume(data=data, spacing=spacing)


def _fmt_spacing(s: float) -> str:
    return repr(float(s))


def save_volume(vol: AnyVolume, path) -> None:
    """Write ``vol`` as ``path`` (header) plus a sibling ``.raw`` payload."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    if isinstance(vol, LabelVolume):
        etype, dtype = "UINT8", _ELEMENT_TYPES["UINT8"]
    else:
        etype, dtype = "FLOAT32", _ELEMENT_TYPES["FLOAT32"]
    nx, ny, nz = vol.dims
    header = (
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {' '.join(_fmt_spacing(s) for s in vol.spacing)}\n"
        f"ElementType = {etype}\n"
        f"ElementDataFile = {raw_path.name}\n"
    )
    payload = np.asarray(vol.data, dtype=dtype).ravel(order="F").tobytes()
    _atomic_write(raw_path, payload)
    _atomic_write(path, header.encode("ascii"))


def _atomic_write(path: Path, content: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(content)
    os.replace(tmp, path)


def linear_index(x: int, y: int, z: int, dims) -> int:
    nx, ny, _ = dims
    return x + nx * (y + ny * z)
