"""
Volume and mask containers, MVOL file I/O, z-score normalization,
center-of-mass localization and fixed-size ROI cropping.

MVOL is a two-file format: ``<name>.json`` holds
``{"dims": [D, H, W], "spacing_mm": [sz, sy, sx], "dtype": "f32" | "u8"}``
and ``<name>.raw`` holds D*H*W little-endian values in C order (x fastest).
"""
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from errors import (
    EmptyMask,
    IoFailure,
    InvalidMask,
    MalformedHeader,
    NonFiniteData,
    SizeMismatch,
)

Spacing = Tuple[float, float, float]
Dims = Tuple[int, int, int]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume3:
    """A 3D scalar image with anisotropic voxel spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteData("volume contains NaN or Inf values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(data, self.spacing)

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass(frozen=True, eq=False)
class Mask3:
    """A binary 3D label volume; every element is 0 or 1."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        src = np.asarray(self.data)
        if src.ndim != 3 or min(src.shape) < 1:
            raise ValueError(f"mask data must be a non-empty 3D array, got shape {src.shape}")
        if src.dtype != np.bool_ and not np.isin(src, (0, 1)).all():
            raise InvalidMask("mask values must be 0 or 1")
        arr = np.array(src, dtype=np.uint8, order="C", copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def with_data(self, data: np.ndarray) -> "Mask3":
        return Mask3(data, self.spacing)

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


Grid = Union[Volume3, Mask3]


@dataclass(frozen=True)
class RoiSpec:
    """Fixed ROI size in voxels (d, h, w) and the fill value outside the source."""

    size: Dims = (32, 32, 32)
    pad_value: float = 0.0
    # When set, windows that fit inside the volume are shifted inward instead of padded.
    clamp_to_volume: bool = False

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or min(size) < 1:
            raise ValueError(f"ROI size must be three positive ints, got {self.size}")
        object.__setattr__(self, "size", size)

    @classmethod
    def full(cls) -> "RoiSpec":
        # 256 x 256 in-plane, 44 slices
        return cls(size=(44, 256, 256))


@dataclass(frozen=True)
class RoiWindow:
    """Integer window start (may be negative) and size on the source grid."""

    start: Tuple[int, int, int]
    size: Dims
    center: Tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def to_dict(self) -> dict:
        return {"start": list(self.start), "size": list(self.size), "center": list(self.center)}


# --- file I/O -------------------------------------------------------------

def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def _sibling(stem: Path, ext: str) -> Path:
    return stem.parent / f"{stem.name}{ext}"


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write through a ``.partial`` file and rename into place."""
    partial = path.parent / f"{path.name}.partial"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(partial, "wb") as f:
            f.write(payload)
        os.replace(partial, path)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def save_volume(v: Grid, path) -> None:
    """Write a Volume3 (dtype f32) or Mask3 (dtype u8) in MVOL format."""
    stem = _stem(path)
    dtype = "u8" if isinstance(v, Mask3) else "f32"
    header = {"dims": list(v.dims), "spacing_mm": list(v.spacing), "dtype": dtype}
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES[dtype]).tobytes(order="C")
    atomic_write_bytes(_sibling(stem, ".raw"), payload)
    atomic_write_bytes(_sibling(stem, ".json"), (json.dumps(header) + "\n").encode())


def _read_header(stem: Path) -> dict:
    header_path = _sibling(stem, ".json")
    try:
        with open(header_path, "r") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedHeader(f"{header_path}: invalid JSON ({e})") from e
    except OSError as e:
        raise IoFailure(f"cannot read {header_path}: {e}") from e

    if not isinstance(header, dict):
        raise MalformedHeader(f"{header_path}: header must be a JSON object")
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise MalformedHeader(f"{header_path}: missing field '{key}'")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in dims)):
        raise MalformedHeader(f"{header_path}: dims must be three positive integers")
    try:
        _check_spacing(header["spacing_mm"])
    except (TypeError, ValueError) as e:
        raise MalformedHeader(f"{header_path}: {e}") from e
    if header["dtype"] not in _DTYPES:
        raise MalformedHeader(f"{header_path}: unsupported dtype {header['dtype']!r}")
    return header


def load_volume(path) -> Grid:
    """Read an MVOL pair; f32 payloads give a Volume3, u8 payloads a Mask3."""
    stem = _stem(path)
    header = _read_header(stem)
    dtype = _DTYPES[header["dtype"]]
    dims = tuple(header["dims"])
    raw_path = _sibling(stem, ".raw")
    try:
        with open(raw_path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise IoFailure(f"cannot read {raw_path}: {e}") from e

    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatch(f"{raw_path}: payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    spacing = tuple(float(s) for s in header["spacing_mm"])
    if header["dtype"] == "u8":
        return Mask3(data, spacing)
    if not np.isfinite(data).all():
        raise NonFiniteData(f"{raw_path}: payload contains NaN or Inf")
    return Volume3(data, spacing)


def load_mask(path) -> Mask3:
    grid = load_volume(path)
    if not isinstance(grid, Mask3):
        raise MalformedHeader(f"{path}: expected a u8 mask, found an f32 volume")
    return grid


def mvol_exists(path) -> bool:
    stem = _stem(path)
    return _sibling(stem, ".json").is_file() and _sibling(stem, ".raw").is_file()


# --- intensity and geometry -----------------------------------------------

def zscore_normalize(v: Volume3) -> Volume3:
    """Zero mean, unit population std; constant input maps to all zeros."""
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if std < 1e-8:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    return v.with_data(((x - mean) / std).astype(np.float32))


def center_of_mass(m: Mask3) -> Tuple[float, float, float]:
    """Unweighted mean of foreground voxel indices (z, y, x)."""
    idx = np.argwhere(m.data)
    if idx.shape[0] == 0:
        raise EmptyMask("center of mass of an empty mask is undefined")
    c = idx.mean(axis=0, dtype=np.float64)
    return float(c[0]), float(c[1]), float(c[2])


def roi_window(center, roi: RoiSpec, dims: Dims) -> RoiWindow:
    """Window start = round_half_up(center) - floor(size / 2) per axis."""
    start = []
    for c, size, n in zip(center, roi.size, dims):
        s = math.floor(float(c) + 0.5) - size // 2
        if roi.clamp_to_volume and size <= n:
            s = min(max(s, 0), n - size)
        start.append(int(s))
    return RoiWindow(tuple(start), roi.size, tuple(float(c) for c in center))


def crop_window(v: Grid, window: RoiWindow, pad_value: float = 0.0) -> Grid:
    fill = 0 if isinstance(v, Mask3) else pad_value
    out = np.full(window.size, fill, dtype=v.data.dtype)
    src, dst = [], []
    for s, size, n in zip(window.start, window.size, v.dims):
        lo, hi = max(s, 0), min(s + size, n)
        if hi <= lo:
            return v.with_data(out)
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = v.data[tuple(src)]
    return v.with_data(out)


def crop_roi(v: Grid, center, roi: RoiSpec) -> Grid:
    """Crop a fixed-size window around ``center``; masks always pad with 0."""
    return crop_window(v, roi_window(center, roi, v.dims), roi.pad_value)
