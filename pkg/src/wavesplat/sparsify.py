"""Adaptive coefficient filter: budget allocation, robust thresholding, top-K.

The global coefficient budget is split across subbands proportionally to
S = E^a_E · N^b_N (reference-channel energy, band cardinality), each band
thresholds the joint 4-channel magnitude at a MAD-based noise floor, and the
survivors are truncated to the band's allocation.  Selection is performed on
the joint norm so a location is kept or dropped coherently across channels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySequence, StructureMismatch
from .wavelet import BandKey, WaveletPyramid, band_list

MAD_CONSISTENCY = 0.6745  # MAD of a standard normal


@dataclass
class BandStats:
    band: BandKey
    energy: float
    count: int


@dataclass
class SparseBand:
    """Retained coefficient locations (lexicographically sorted) and 4-channel values."""

    band: BandKey
    indices: np.ndarray  # (n, 3) int
    values: np.ndarray   # (n, 4) float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 4)
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values length mismatch")


@dataclass
class SparsifyConfig:
    k_total: int
    energy_exp: float = 0.7
    count_exp: float = 0.3
    mad_multiplier: float = 3.0
    reference_channel: int = 3  # alpha
    floor: int = 10

    def __post_init__(self):
        if self.k_total < 1:
            raise ValueError("k_total must be >= 1")
        if self.mad_multiplier <= 0:
            raise ValueError("mad_multiplier must be positive")
        if not 0 <= self.reference_channel <= 3:
            raise ValueError("reference_channel must index an RGBA channel")
        if self.floor < 1:
            raise ValueError("floor must be a positive integer")


def _check_structure(pyramids: Sequence[WaveletPyramid]) -> WaveletPyramid:
    if len(pyramids) != 4:
        raise StructureMismatch(f"expected 4 channel pyramids, got {len(pyramids)}")
    first = pyramids[0]
    for p in pyramids[1:]:
        if (p.source_dims, p.levels, p.filter, p.boundary) != (
            first.source_dims, first.levels, first.filter, first.boundary
        ):
            raise StructureMismatch("channel pyramids disagree on structure")
    for p in pyramids:
        p.check()
    return first


def band_stats(pyramids: Sequence[WaveletPyramid], ref: int = 3) -> list[BandStats]:
    """Per-band reference-channel energy and coefficient cardinality."""
    first = _check_structure(pyramids)
    out = []
    for band in band_list(first.levels):
        arr = pyramids[ref].bands[band]
        out.append(BandStats(band, float(np.sum(arr.astype(np.float64) ** 2)), arr.size))
    return out


def allocate_budget(stats: Sequence[BandStats], config: SparsifyConfig) -> dict[BandKey, int]:
    """Distribute k_total across bands by S = E^a · N^b with a floor.

    The per-band floor can push the naive sum past the budget; a trim pass
    then removes allocation from bands in ascending-S order (ties trimmed in
    reverse band order) until the total fits.  The budget is binding.
    """
    bands = [st.band for st in stats]
    S = np.array([
        (st.energy ** config.energy_exp) * (st.count ** config.count_exp)
        for st in stats
    ])
    total = S.sum()
    if total == 0.0:
        # uniform fallback: even split in band order, remainder to earlier bands
        base, rem = divmod(config.k_total, len(bands))
        return {b: base + (1 if i < rem else 0) for i, b in enumerate(bands)}
    alloc = {
        b: max(config.floor, int(config.k_total * (s / total)))
        for b, s in zip(bands, S)
    }
    deficit = sum(alloc.values()) - config.k_total
    if deficit > 0:
        order = sorted(range(len(bands)), key=lambda i: (S[i], -i))
        for i in order:
            if deficit <= 0:
                break
            cut = min(alloc[bands[i]], deficit)
            alloc[bands[i]] -= cut
            deficit -= cut
    return alloc


def joint_magnitude(values4) -> float:
    """Euclidean norm across the four channels at one location."""
    v = np.asarray(values4, dtype=np.float64)
    return float(np.sqrt(np.sum(v * v)))


def mad_sigma(v) -> float:
    """Robust spread estimate: median absolute deviation / 0.6745."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptySequence("mad_sigma of an empty sequence")
    med = np.median(v)
    return float(np.median(np.abs(v - med)) / MAD_CONSISTENCY)


def select(v: np.ndarray, threshold: float, k: int) -> np.ndarray:
    """Indices with v >= threshold, truncated to the k largest by v.

    Ties at the cutoff keep the lexicographically smallest indices; the
    result is returned in lexicographic index order, so the output is
    independent of any traversal order.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    cand = np.flatnonzero(flat >= threshold)
    if cand.size == 0 or k == 0:
        return np.empty((0, 3), dtype=np.int64)
    order = np.lexsort((cand, -flat[cand]))  # value desc, then flat index asc
    keep = np.sort(cand[order[:k]])
    return np.stack(np.unravel_index(keep, v.shape), axis=1).astype(np.int64)


def sparsify_pyramid(pyramids: Sequence[WaveletPyramid],
                     config: SparsifyConfig) -> dict[BandKey, SparseBand]:
    """Full adaptive filter over a 4-channel pyramid set.

    Per band: joint magnitude field, threshold = mad_multiplier · mad_sigma,
    allocation from allocate_budget, then select.  Exact-zero joint norms are
    never retained (they carry no signal).  Stored values are the signed
    original coefficients for all four channels.
    """
    first = _check_structure(pyramids)
    stats = band_stats(pyramids, config.reference_channel)
    alloc = allocate_budget(stats, config)
    out: dict[BandKey, SparseBand] = {}
    for band in band_list(first.levels):
        stack = np.stack([p.bands[band] for p in pyramids], axis=-1)
        v = np.sqrt(np.sum(stack.astype(np.float64) ** 2, axis=-1))
        t = config.mad_multiplier * mad_sigma(v)
        idx = select(v, t, alloc[band])
        if len(idx):
            nz = v[idx[:, 0], idx[:, 1], idx[:, 2]] > 0.0
            idx = idx[nz]
        vals = stack[idx[:, 0], idx[:, 1], idx[:, 2]] if len(idx) else np.empty((0, 4))
        out[band] = SparseBand(band, idx, vals)
    return out


_MAGIC = b"WSSPAR1\n"


def save_sparse(sparse: dict[BandKey, SparseBand], pyramid_like, path: str | Path) -> None:
    """JSON header + per-band u32 index triples and f32 4-vectors, band order."""
    keys = band_list(pyramid_like.levels)
    header = {
        "dims": list(pyramid_like.source_dims),
        "levels": pyramid_like.levels,
        "filter": pyramid_like.filter,
        "boundary": pyramid_like.boundary,
        "bands": [
            {"level": b.level, "orientation": "".join(b.orientation),
             "count": int(len(sparse[b].indices))}
            for b in keys
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for b in keys:
            sb = sparse[b]
            f.write(np.ascontiguousarray(sb.indices, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(sb.values, dtype="<f4").tobytes())


def load_sparse(path: str | Path):
    """Returns (header dict, {BandKey: SparseBand})."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise StructureMismatch(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        sparse = {}
        for rec in header["bands"]:
            key = BandKey(rec["level"], tuple(rec["orientation"]))
            n = rec["count"]
            idx = np.frombuffer(f.read(12 * n), dtype="<u4").reshape(n, 3).astype(np.int64)
            vals = np.frombuffer(f.read(16 * n), dtype="<f4").reshape(n, 4).astype(np.float64)
            sparse[key] = SparseBand(key, idx, vals)
    return header, sparse
