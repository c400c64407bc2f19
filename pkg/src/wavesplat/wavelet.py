"""Multi-level separable 3D DWT/IDWT with subband addressing and impulse synthesis.

Analysis applies per-axis filter matrices built from embedded tap tables
(CDF 9/7 for 'bior4.4', orthonormal Haar) under either half-sample symmetric
or periodic extension, decimating by 2 per level and recursing on the LLL
band.  Every band has extent ceil(n / 2^level) per axis; for odd sizes both
half-bands keep ceil(n/2) coefficients (slightly expansive).

Synthesis is the exact inverse of the recorded analysis operator, computed
once per (size, filter, boundary) and cached.  In the interior this inverse
coincides with the classical synthesis filter bank; at boundaries it absorbs
the extension folding, which keeps reconstruction exact for every size and
boundary mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .errors import (
    InconsistentPyramid,
    IndexOutOfRange,
    InvalidBand,
    TooManyLevels,
    UnsupportedFilter,
)

_SQRT1_2 = 1.0 / np.sqrt(2.0)

# CDF 9/7 taps, sum √2 per filter; derived by spectral factorization of the
# order-4 maxflat half-band filter (standard published values).
CDF97_DEC_LO = np.array([
    0.037828455506995481, -0.023849465019380005, -0.110624404418423430,
    0.377402855612653810, 0.852698679009403420, 0.377402855612653810,
    -0.110624404418423430, -0.023849465019380005, 0.037828455506995481,
])
CDF97_SYN_LO = np.array([
    -0.064538882628938436, -0.040689417609558414, 0.418092273222212200,
    0.788485616405664400, 0.418092273222212200, -0.040689417609558414,
    -0.064538882628938436,
])
# analysis highpass = synthesis lowpass modulated to Nyquist
CDF97_DEC_HI = CDF97_SYN_LO * np.array([(-1.0) ** m for m in range(-3, 4)])
# synthesis highpass (modulated analysis lowpass); kept for interior-kernel checks
CDF97_SYN_HI = CDF97_DEC_LO * np.array([(-1.0) ** m for m in range(-4, 5)])

HAAR_DEC_LO = np.array([_SQRT1_2, _SQRT1_2])
HAAR_DEC_HI = np.array([_SQRT1_2, -_SQRT1_2])


@dataclass(frozen=True)
class FilterBank:
    name: str
    dec_lo: np.ndarray
    lo_start: int       # signal offset of the first lowpass tap relative to 2k
    dec_hi: np.ndarray
    hi_start: int       # relative to the highpass output position
    hi_phase: int       # highpass output k sits at signal position 2k + hi_phase
    support: int        # longest analysis filter


FILTERS = {
    "bior4.4": FilterBank("bior4.4", CDF97_DEC_LO, -4, CDF97_DEC_HI, -3, 1, 9),
    "haar": FilterBank("haar", HAAR_DEC_LO, 0, HAAR_DEC_HI, 0, 0, 2),
}

BOUNDARIES = ("symmetric", "periodic")

ORIENTATIONS = tuple(product("LH", repeat=3))  # lexicographic, L < H


@dataclass(frozen=True, order=True)
class BandKey:
    """Subband address: decomposition level (1 = finest) and per-axis L/H."""

    level: int
    orientation: tuple[str, str, str]

    def __post_init__(self):
        object.__setattr__(self, "orientation", tuple(self.orientation))
        if self.level < 1:
            raise InvalidBand(f"level must be >= 1, got {self.level}")
        if self.orientation not in ORIENTATIONS:
            raise InvalidBand(f"bad orientation {self.orientation}")

    def __str__(self):
        return f"({self.level},{''.join(self.orientation)})"


def band_list(levels: int) -> list[BandKey]:
    """All subband keys in deterministic order: level 1..J, orientations L<H.

    The pure approximation band (L,L,L) exists only at the coarsest level, so
    the count is 7·levels + 1.
    """
    if levels < 1:
        raise TooManyLevels("levels must be >= 1")
    keys = []
    for level in range(1, levels + 1):
        for o in ORIENTATIONS:
            if o == ("L", "L", "L") and level != levels:
                continue
            keys.append(BandKey(level, o))
    return keys


def band_shape(source_dims: tuple[int, int, int], level: int) -> tuple[int, int, int]:
    return tuple(-(-d // (1 << level)) for d in source_dims)


@dataclass
class WaveletPyramid:
    """Per-band coefficient arrays for one channel of a decomposed volume."""

    source_dims: tuple[int, int, int]
    levels: int
    filter: str
    boundary: str
    bands: dict[BandKey, np.ndarray]

    def check(self) -> None:
        expect = set(band_list(self.levels))
        if set(self.bands) != expect:
            raise InconsistentPyramid(
                f"pyramid has bands {sorted(map(str, self.bands))}, "
                f"expected {sorted(map(str, expect))}"
            )
        for key, arr in self.bands.items():
            shape = band_shape(self.source_dims, key.level)
            if arr.shape != shape:
                raise InconsistentPyramid(f"band {key} has shape {arr.shape}, expected {shape}")


def _ext_index(i: int, n: int, boundary: str) -> int:
    if boundary == "periodic":
        return i % n
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        else:
            i = 2 * n - 1 - i
    return i


_matrix_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _axis_ops(n: int, filter: str, boundary: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked analysis operator B (low rows then high rows) and its inverse.

    B maps length-n signals to 2*ceil(n/2) coefficients.  The inverse is
    np.linalg.inv for even n and the pseudo-inverse for odd n, where the
    two ceil-sized half-bands are redundant by one coefficient.
    """
    key = (n, filter, boundary)
    hit = _matrix_cache.get(key)
    if hit is not None:
        return hit
    fb = FILTERS[filter]
    m = (n + 1) // 2
    B = np.zeros((2 * m, n))
    for k in range(m):
        for t, tap in enumerate(fb.dec_lo):
            B[k, _ext_index(2 * k + fb.lo_start + t, n, boundary)] += tap
        for t, tap in enumerate(fb.dec_hi):
            B[m + k, _ext_index(2 * k + fb.hi_phase + fb.hi_start + t, n, boundary)] += tap
    if 2 * m == n:
        S = np.linalg.inv(B)
    else:
        S = np.linalg.pinv(B)
    _matrix_cache[key] = (B, S)
    return B, S


def _apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def _validate(filter: str, boundary: str) -> None:
    if filter not in FILTERS:
        raise UnsupportedFilter(f"filter must be one of {sorted(FILTERS)}, got {filter!r}")
    if boundary not in BOUNDARIES:
        raise UnsupportedFilter(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")


def _check_levels(dims: tuple[int, int, int], levels: int) -> None:
    if levels < 1:
        raise TooManyLevels("levels must be >= 1")
    if any(-(-d // (1 << (levels - 1))) < 2 for d in dims):
        raise TooManyLevels(
            f"{levels} levels leave fewer than 2 samples per axis on dims {dims}"
        )


def dwt3(channel: np.ndarray, levels: int, filter: str = "bior4.4",
         boundary: str = "symmetric") -> WaveletPyramid:
    """Separable J-level analysis of one scalar channel."""
    _validate(filter, boundary)
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 3:
        raise ValueError("dwt3 expects a 3D array")
    dims = channel.shape
    _check_levels(dims, levels)
    # dims may fall below the filter support; the extension folding in the
    # analysis matrices keeps the operator full-rank down to 2 samples

    bands: dict[BandKey, np.ndarray] = {}
    current = channel
    for level in range(1, levels + 1):
        stacked = current
        ms = []
        for axis in range(3):
            n = stacked.shape[axis]
            B, _ = _axis_ops(n, filter, boundary)
            stacked = _apply_axis(B, stacked, axis)
            ms.append((n + 1) // 2)
        for o in ORIENTATIONS:
            sl = tuple(
                slice(0, m) if c == "L" else slice(m, 2 * m)
                for c, m in zip(o, ms)
            )
            if o == ("L", "L", "L"):
                current = stacked[sl]
                if level == levels:
                    bands[BandKey(level, o)] = current.copy()
            else:
                bands[BandKey(level, o)] = stacked[sl].copy()
    return WaveletPyramid(tuple(dims), levels, filter, boundary, bands)


def idwt3(pyramid: WaveletPyramid) -> np.ndarray:
    """Exact synthesis inverse of dwt3 for the recorded filter/boundary."""
    _validate(pyramid.filter, pyramid.boundary)
    pyramid.check()
    current = pyramid.bands[BandKey(pyramid.levels, ("L", "L", "L"))]
    for level in range(pyramid.levels, 0, -1):
        out_dims = (
            pyramid.source_dims if level == 1
            else band_shape(pyramid.source_dims, level - 1)
        )
        ms = [(d + 1) // 2 for d in out_dims]
        stacked = np.zeros((2 * ms[0], 2 * ms[1], 2 * ms[2]))
        for o in ORIENTATIONS:
            sl = tuple(
                slice(0, m) if c == "L" else slice(m, 2 * m)
                for c, m in zip(o, ms)
            )
            band = current if o == ("L", "L", "L") else pyramid.bands[BandKey(level, o)]
            stacked[sl] = band
        for axis in range(3):
            _, S = _axis_ops(out_dims[axis], pyramid.filter, pyramid.boundary)
            stacked = _apply_axis(S, stacked, axis)
        current = stacked
    return current


def impulse_pyramid(source_dims: tuple[int, int, int], levels: int, filter: str,
                    boundary: str, band: BandKey, k: tuple[int, int, int]) -> WaveletPyramid:
    """Pyramid that is zero everywhere except value 1 at index k of `band`."""
    _validate(filter, boundary)
    _check_levels(source_dims, levels)
    keys = band_list(levels)
    if band not in keys:
        raise InvalidBand(f"band {band} invalid for {levels} levels")
    bands = {key: np.zeros(band_shape(source_dims, key.level)) for key in keys}
    shape = bands[band].shape
    k = tuple(int(v) for v in k)
    if any(not 0 <= v < s for v, s in zip(k, shape)):
        raise IndexOutOfRange(f"index {k} outside band extent {shape}")
    bands[band][k] = 1.0
    return WaveletPyramid(tuple(source_dims), levels, filter, boundary, bands)


def zero_pyramid(source_dims, levels, filter, boundary) -> WaveletPyramid:
    bands = {key: np.zeros(band_shape(source_dims, key.level)) for key in band_list(levels)}
    return WaveletPyramid(tuple(source_dims), levels, filter, boundary, bands)


_MAGIC = b"WSPYRA1\n"


def save_pyramid(pyramid: WaveletPyramid, path: str | Path) -> None:
    """JSON header + contiguous little-endian f32 band payloads in band order."""
    pyramid.check()
    keys = band_list(pyramid.levels)
    header = {
        "dims": list(pyramid.source_dims),
        "levels": pyramid.levels,
        "filter": pyramid.filter,
        "boundary": pyramid.boundary,
        "bands": [
            {"level": key.level, "orientation": "".join(key.orientation),
             "shape": list(pyramid.bands[key].shape)}
            for key in keys
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for key in keys:
            f.write(np.ascontiguousarray(pyramid.bands[key], dtype="<f4").tobytes())


def load_pyramid(path: str | Path) -> WaveletPyramid:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise InconsistentPyramid(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        bands = {}
        for rec in header["bands"]:
            key = BandKey(rec["level"], tuple(rec["orientation"]))
            shape = tuple(rec["shape"])
            count = shape[0] * shape[1] * shape[2]
            data = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
            bands[key] = data.reshape(shape)
    pyr = WaveletPyramid(tuple(header["dims"]), header["levels"], header["filter"],
                         header["boundary"], bands)
    pyr.check()
    return pyr
