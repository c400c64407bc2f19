"""Scalar volume ingestion, transfer functions, and the world coordinate frame.

A scalar volume is a headerless raw file plus a JSON sidecar describing dims,
sample type, value range, and voxel spacing.  Samples are normalized to [0,1]
on load.  Applying a transfer function yields an RGBA radiance volume living
in a world frame where the longest physical axis spans exactly [-1, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateRange,
    IndexOutOfRange,
    SizeMismatch,
    UnreadableFile,
)

SAMPLE_DTYPES = {
    "u8": np.dtype("u1"),
    "u16le": np.dtype("<u2"),
    "f32le": np.dtype("<f4"),
}


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry and raw sample encoding of a scalar volume."""

    dims: tuple[int, int, int]
    sample_type: str = "u8"
    value_range: tuple[float, float] | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 2 for d in self.dims):
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        if self.sample_type not in SAMPLE_DTYPES:
            raise ValueError(f"unknown sample_type {self.sample_type!r}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.value_range is not None:
            lo, hi = self.value_range
            if not lo < hi:
                raise DegenerateRange(f"value_range min must be < max, got {self.value_range}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def to_json(self) -> dict:
        out = {
            "dims": list(self.dims),
            "sample_type": self.sample_type,
            "spacing": list(self.spacing),
        }
        if self.value_range is not None:
            out["value_range"] = list(self.value_range)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "VolumeMeta":
        vr = obj.get("value_range")
        return cls(
            dims=tuple(obj["dims"]),
            sample_type=obj["sample_type"],
            value_range=tuple(vr) if vr is not None else None,
            spacing=tuple(obj.get("spacing", (1.0, 1.0, 1.0))),
        )


@dataclass
class ScalarVolume:
    """3D grid of scalars normalized to [0,1]."""

    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.meta.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("scalar samples must lie in [0,1]")


@dataclass
class TransferFunction:
    """Piecewise-linear map from normalized scalars to RGBA.

    Control points are (scalar, rgba) with strictly increasing scalars
    covering [0,1].  An optional support interval zeroes the output outside
    [a, b); the right endpoint is included only when b == 1 (left-closed
    interval ownership, so interval partitions tile without double counting).
    """

    control_points: Sequence[tuple[float, tuple[float, float, float, float]]]
    support: tuple[float, float] | None = None

    def __post_init__(self):
        pts = [(float(s), tuple(float(c) for c in rgba)) for s, rgba in self.control_points]
        scalars = [s for s, _ in pts]
        if len(pts) < 2 or scalars[0] != 0.0 or scalars[-1] != 1.0:
            raise ValueError("control points must start at 0 and end at 1")
        if any(b <= a for a, b in zip(scalars, scalars[1:])):
            raise ValueError("control-point scalars must be strictly increasing")
        for _, rgba in pts:
            if len(rgba) != 4 or any(c < 0.0 or c > 1.0 for c in rgba):
                raise ValueError("rgba components must lie in [0,1]")
        self.control_points = pts
        if self.support is not None:
            a, b = (float(self.support[0]), float(self.support[1]))
            if not (0.0 <= a <= b <= 1.0):
                raise ValueError(f"support must satisfy 0 <= a <= b <= 1, got {self.support}")
            self.support = (a, b)

    def to_json(self) -> dict:
        out = {
            "control_points": [
                {"value": s, "r": r, "g": g, "b": b, "a": a}
                for s, (r, g, b, a) in self.control_points
            ]
        }
        if self.support is not None:
            out["support"] = list(self.support)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TransferFunction":
        pts = [
            (p["value"], (p["r"], p["g"], p["b"], p["a"]))
            for p in obj["control_points"]
        ]
        sup = obj.get("support")
        return cls(pts, support=tuple(sup) if sup is not None else None)


@dataclass
class RadianceVolume:
    """RGBA samples over the grid of `meta`, plus the world-space box."""

    meta: VolumeMeta
    rgba: np.ndarray
    world_box: np.ndarray = field(default=None)  # (2,3): min corner, max corner

    def __post_init__(self):
        self.rgba = np.asarray(self.rgba, dtype=np.float64)
        if self.rgba.shape != self.meta.dims + (4,):
            raise ValueError(f"rgba shape {self.rgba.shape} != dims {self.meta.dims}+(4,)")
        if self.world_box is None:
            self.world_box = world_box(self.meta)
        self.world_box = np.asarray(self.world_box, dtype=np.float64)


def load_tf(path: str | Path) -> TransferFunction:
    with open(path, "r") as f:
        return TransferFunction.from_json(json.load(f))


def save_tf(tf: TransferFunction, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(tf.to_json(), f, indent=2)


def load_meta(path: str | Path) -> VolumeMeta:
    with open(path, "r") as f:
        return VolumeMeta.from_json(json.load(f))


def save_meta(meta: VolumeMeta, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(meta.to_json(), f, indent=2)


def load_raw(path: str | Path, meta: VolumeMeta) -> ScalarVolume:
    """Read a headerless raw volume and normalize samples to [0,1].

    u8 divides by 255, u16le by 65535; f32le is mapped affinely from
    meta.value_range (or the observed min/max when absent).  The last dim
    varies fastest in the file (C order over meta.dims).
    """
    dtype = SAMPLE_DTYPES[meta.sample_type]
    path = Path(path)
    try:
        nbytes = path.stat().st_size
    except OSError as e:
        raise UnreadableFile(f"cannot stat {path}: {e}") from e
    expected = meta.voxel_count * dtype.itemsize
    if nbytes != expected:
        raise SizeMismatch(
            f"{path}: file is {nbytes} bytes, dims {meta.dims} with "
            f"{meta.sample_type} need {expected}"
        )
    try:
        raw = np.fromfile(path, dtype=dtype)
    except OSError as e:
        raise UnreadableFile(f"cannot read {path}: {e}") from e
    raw = raw.reshape(meta.dims)

    if meta.sample_type == "u8":
        data = raw.astype(np.float64) / 255.0
    elif meta.sample_type == "u16le":
        data = raw.astype(np.float64) / 65535.0
    else:
        data = raw.astype(np.float64)
        if meta.value_range is not None:
            lo, hi = meta.value_range
        else:
            lo, hi = float(data.min()), float(data.max())
            if lo == hi:
                raise DegenerateRange(f"{path}: constant f32 volume and no value_range")
        data = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return ScalarVolume(meta, data)


def save_raw(vol: ScalarVolume, path: str | Path) -> None:
    """Quantize back to the meta's sample type and write the raw file."""
    meta = vol.meta
    if meta.sample_type == "u8":
        out = np.rint(vol.data * 255.0).astype(np.uint8)
    elif meta.sample_type == "u16le":
        out = np.rint(vol.data * 65535.0).astype("<u2")
    else:
        if meta.value_range is None:
            raise DegenerateRange("saving f32 requires an explicit value_range")
        lo, hi = meta.value_range
        out = (vol.data * (hi - lo) + lo).astype("<f4")
    out.tofile(Path(path))


def _in_support(scalars: np.ndarray, support: tuple[float, float]) -> np.ndarray:
    a, b = support
    if b >= 1.0:
        return (scalars >= a) & (scalars <= 1.0)
    return (scalars >= a) & (scalars < b)


def apply_tf(vol: ScalarVolume, tf: TransferFunction) -> RadianceVolume:
    """Evaluate the transfer function per voxel, zeroing outside its support."""
    s = vol.data
    xs = np.array([p[0] for p in tf.control_points])
    ys = np.array([p[1] for p in tf.control_points])  # (n_pts, 4)
    flat = s.ravel()
    rgba = np.empty((flat.size, 4))
    for c in range(4):
        rgba[:, c] = np.interp(flat, xs, ys[:, c])
    rgba = rgba.reshape(s.shape + (4,))
    if tf.support is not None:
        rgba[~_in_support(s, tf.support)] = 0.0
    np.clip(rgba, 0.0, 1.0, out=rgba)
    return RadianceVolume(vol.meta, rgba)


def make_interval_tfs(tf: TransferFunction, count: int = 5) -> list[TransferFunction]:
    """Split a TF into `count` copies supported on the equal-width partition of [0,1].

    If the input already has a support, each partition interval is intersected
    with it so the partitioned outputs still sum to the original.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for i in range(count):
        a, b = i / count, (i + 1) / count
        if tf.support is not None:
            a, b = max(a, tf.support[0]), min(b, tf.support[1])
            if a > b:
                a = b = min(max(tf.support[0], i / count), 1.0)
        out.append(TransferFunction(tf.control_points, support=(a, b)))
    return out


def _aspect(meta: VolumeMeta) -> np.ndarray:
    extent = np.array(meta.dims, dtype=np.float64) * np.array(meta.spacing)
    return extent / extent.max()


def world_scale(meta: VolumeMeta) -> np.ndarray:
    """Per-axis world units per voxel (the derivative of the voxel→world map)."""
    return 2.0 * _aspect(meta) / np.array(meta.dims, dtype=np.float64)


def world_box(meta: VolumeMeta) -> np.ndarray:
    """Axis-aligned world bounds of the volume; longest axis spans [-1, 1]."""
    a = _aspect(meta)
    return np.stack([-a, a])


def world_coords(meta: VolumeMeta, index: tuple[int, int, int]) -> np.ndarray:
    """World position of the voxel center at an integer index triple."""
    idx = np.asarray(index)
    dims = np.array(meta.dims)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= dims):
        raise IndexOutOfRange(f"index {index} outside dims {meta.dims}")
    return continuum_to_world(meta, idx + 0.5)


def continuum_to_world(meta: VolumeMeta, v) -> np.ndarray:
    """Map continuous voxel coordinates (grid corner at 0) to world space.

    Voxel center i sits at v = i + 0.5; world_coords(meta, i) equals
    continuum_to_world(meta, i + 0.5).
    """
    v = np.asarray(v, dtype=np.float64)
    dims = np.array(meta.dims, dtype=np.float64)
    return (2.0 * v / dims - 1.0) * _aspect(meta)


def world_to_continuum(meta: VolumeMeta, x) -> np.ndarray:
    """Inverse of continuum_to_world."""
    x = np.asarray(x, dtype=np.float64)
    dims = np.array(meta.dims, dtype=np.float64)
    return (x / _aspect(meta) + 1.0) * dims / 2.0
