"""Wavelet-to-Gaussian transition bank.

For each subband, synthesize the canonical kernel (unit impulse at the band
center), fit a single Gaussian to its dominant magnitude lobe by weighted
moments over a relative-threshold region of interest, and attach a scalar
energy weight from a closed-form ridge regression of the kernel magnitude
against the Gaussian envelope.  Kernels at other coefficient indices are
reached by translation with stride 2^level, so one entry per band suffices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGaussian,
    EmptyKernel,
    IndexOutOfRange,
    InvalidBand,
    UnknownBand,
)
from .wavelet import (
    BandKey,
    band_list,
    band_shape,
    idwt3,
    impulse_pyramid,
)

COV_EPSILON = 1e-4  # voxel^2 floor added to fitted covariances
DEFAULT_TAU = 0.1
DEFAULT_RIDGE_LAMBDA = 1e-6
DEFAULT_DELTA = (0.5, 0.5, 0.5)  # index -> voxel-center continuum shift


@dataclass
class CanonicalKernel:
    """Spatial response of a unit impulse placed at `anchor` of `band`."""

    band: BandKey
    values: np.ndarray
    anchor: tuple[int, int, int]


@dataclass
class GaussianGeom:
    """Gaussian center (voxel coordinates) and covariance (voxel^2)."""

    center: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)


@dataclass
class TransitionEntry:
    band: BandKey
    geom: GaussianGeom
    weight: np.ndarray          # scalar broadcast to 4 channels
    stride: int
    subpixel_offset: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(4)
        self.subpixel_offset = np.asarray(self.subpixel_offset, dtype=np.float64).reshape(3)


@dataclass
class TransitionBank:
    source_dims: tuple[int, int, int]
    levels: int
    filter: str
    boundary: str
    tau: float
    ridge_lambda: float
    entries: dict[BandKey, TransitionEntry]


def canonical_kernel(dims, levels, filter, boundary, band: BandKey) -> CanonicalKernel:
    """Synthesize the band's kernel for an impulse at the band-center index.

    Centering (rather than index 0) keeps the fitted lobe away from boundary
    distortion; lookups subtract the anchor so translation is unaffected.
    """
    if band not in band_list(levels):
        raise InvalidBand(f"band {band} invalid for {levels} levels")
    extent = band_shape(dims, band.level)
    anchor = tuple(e // 2 for e in extent)
    values = idwt3(impulse_pyramid(dims, levels, filter, boundary, band, anchor))
    return CanonicalKernel(band, values, anchor)


def _roi_weights(values: np.ndarray, tau: float):
    mag = np.abs(values)
    total = mag.sum()
    if total == 0.0:
        raise EmptyKernel("kernel is identically zero")
    W = mag / total
    roi = W > tau * W.max()
    return W, roi


def fit_dominant_lobe(kernel: CanonicalKernel, tau: float = DEFAULT_TAU) -> GaussianGeom:
    """Weighted-moment Gaussian fit of the kernel's dominant magnitude lobe.

    W is the normalized magnitude; the ROI keeps voxels with W above
    tau * max(W).  Center and covariance are the W-weighted first and second
    central moments over the ROI, with an epsilon·I floor on the covariance.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0,1), got {tau}")
    W, roi = _roi_weights(kernel.values, tau)
    coords = np.argwhere(roi).astype(np.float64)
    w = W[roi]
    wsum = w.sum()
    center = (w[:, None] * coords).sum(axis=0) / wsum
    d = coords - center
    cov = (w[:, None, None] * d[:, :, None] * d[:, None, :]).sum(axis=0) / wsum
    cov = 0.5 * (cov + cov.T) + COV_EPSILON * np.eye(3)
    return GaussianGeom(center, cov)


def _gaussian_at(geom: GaussianGeom, coords: np.ndarray) -> np.ndarray:
    d = coords - geom.center
    prec = np.linalg.inv(geom.covariance)
    return np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, prec, d))


def _ridge_weight(y_abs: np.ndarray, g: np.ndarray, ridge_lambda: float) -> float:
    denom = float(np.dot(g, g)) + ridge_lambda
    if denom == 0.0:
        raise DegenerateGaussian("Gaussian envelope is zero over the ROI")
    return float(np.dot(g, y_abs)) / denom


def fit_energy_weight(kernel: CanonicalKernel, geom: GaussianGeom,
                      ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
                      tau: float = DEFAULT_TAU) -> float:
    """Closed-form ridge fit of |kernel| against the unit-peak Gaussian.

    Minimizes sum_i (|y_i| - w g_i)^2 + lambda w^2 over ROI samples, i.e.
    w = sum(g|y|) / (sum(g^2) + lambda).
    """
    _, roi = _roi_weights(kernel.values, tau)
    coords = np.argwhere(roi).astype(np.float64)
    y_abs = np.abs(kernel.values[roi])
    g = _gaussian_at(geom, coords)
    return _ridge_weight(y_abs, g, ridge_lambda)


def fit_residual(kernel: CanonicalKernel, geom: GaussianGeom, weight: float,
                 tau: float = DEFAULT_TAU) -> float:
    """RMS of |kernel| - weight·g over the ROI (diagnostic printed by the CLI)."""
    _, roi = _roi_weights(kernel.values, tau)
    coords = np.argwhere(roi).astype(np.float64)
    y_abs = np.abs(kernel.values[roi])
    g = _gaussian_at(geom, coords)
    return float(np.sqrt(np.mean((y_abs - weight * g) ** 2)))


def build_bank(dims, levels, filter: str = "bior4.4", boundary: str = "symmetric",
               tau: float = DEFAULT_TAU,
               ridge_lambda: float = DEFAULT_RIDGE_LAMBDA) -> TransitionBank:
    """Fit one transition entry per subband."""
    entries: dict[BandKey, TransitionEntry] = {}
    for band in band_list(levels):
        try:
            kernel = canonical_kernel(dims, levels, filter, boundary, band)
            geom = fit_dominant_lobe(kernel, tau)
            w = fit_energy_weight(kernel, geom, ridge_lambda, tau)
        except Exception as e:
            raise type(e)(f"band {band}: {e}") from e
        entries[band] = TransitionEntry(
            band=band,
            geom=geom,
            weight=np.full(4, w),
            stride=1 << band.level,
            subpixel_offset=np.array(DEFAULT_DELTA),
        )
    return TransitionBank(tuple(dims), levels, filter, boundary, tau, ridge_lambda, entries)


def lookup(bank: TransitionBank, band: BandKey, k) -> GaussianGeom:
    """Geometry for coefficient index k: canonical entry translated by the stride.

    center = canonical center + stride·(k − anchor) + δ, covariance unchanged.
    The δ term moves integer index coordinates onto the voxel-center continuum.
    """
    entry = bank.entries.get(band)
    if entry is None:
        raise UnknownBand(f"band {band} not in bank")
    extent = band_shape(bank.source_dims, band.level)
    k = np.asarray(k)
    if k.shape != (3,) or np.any(k < 0) or np.any(k >= np.array(extent)):
        raise IndexOutOfRange(f"index {tuple(k)} outside band extent {extent}")
    kernel_anchor = np.array(band_anchor(bank, band), dtype=np.float64)
    center = (entry.geom.center
              + entry.stride * (k.astype(np.float64) - kernel_anchor)
              + entry.subpixel_offset)
    return GaussianGeom(center, entry.geom.covariance.copy())


def band_anchor(bank: TransitionBank, band: BandKey) -> tuple[int, int, int]:
    extent = band_shape(bank.source_dims, band.level)
    return tuple(e // 2 for e in extent)


_MAGIC = b"WSBANK1\n"
_ORIENT_NUM = {"L": 0.0, "H": 1.0}


def save_bank(bank: TransitionBank, path: str | Path) -> None:
    """JSON header + per-band little-endian f64 records in band order.

    Record layout (17 doubles): level, orientation (3, L=0/H=1), anchor (3),
    center (3), covariance upper triangle (6, row-major), weight scalar.
    """
    header = {
        "dims": list(bank.source_dims),
        "levels": bank.levels,
        "filter": bank.filter,
        "boundary": bank.boundary,
        "tau": bank.tau,
        "ridge_lambda": bank.ridge_lambda,
        "delta": list(DEFAULT_DELTA),
        "record_doubles": 17,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for band in band_list(bank.levels):
            e = bank.entries[band]
            cov = e.geom.covariance
            rec = [float(band.level)]
            rec += [_ORIENT_NUM[c] for c in band.orientation]
            rec += [float(v) for v in band_anchor(bank, band)]
            rec += list(e.geom.center)
            rec += [cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]]
            rec.append(float(e.weight[0]))
            f.write(struct.pack("<17d", *rec))


def load_bank(path: str | Path) -> TransitionBank:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise UnknownBand(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        dims = tuple(header["dims"])
        levels = header["levels"]
        delta = np.array(header["delta"])
        entries = {}
        for band in band_list(levels):
            rec = struct.unpack("<17d", f.read(17 * 8))
            level = int(rec[0])
            orientation = tuple("H" if v else "L" for v in rec[1:4])
            key = BandKey(level, orientation)
            if key != band:
                raise UnknownBand(f"{path}: band order corrupt at {band}")
            center = np.array(rec[7:10])
            c = rec[10:16]
            cov = np.array([[c[0], c[1], c[2]],
                            [c[1], c[3], c[4]],
                            [c[2], c[4], c[5]]])
            entries[key] = TransitionEntry(
                band=key,
                geom=GaussianGeom(center, cov),
                weight=np.full(4, rec[16]),
                stride=1 << level,
                subpixel_offset=delta.copy(),
            )
    return TransitionBank(dims, levels, header["filter"], header["boundary"],
                          header["tau"], header["ridge_lambda"], entries)
