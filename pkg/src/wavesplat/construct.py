"""Map sparse wavelet coefficients through the transition bank into splats.

Each retained coefficient looks up its band's canonical Gaussian, translates
it to the coefficient position, scales the geometry into world units, and
modulates the bank's energy weight by the coefficient's RGBA magnitudes (or
signed values for volume-domain reconstruction).  The resulting mixture can
be evaluated on a grid or exported as a binary 3DGS-style PLY.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import GaussianGeom, TransitionBank, lookup
from .errors import (
    IoError,
    NonExportableSplat,
    NotPD,
    SingularCovariance,
    UnknownBand,
)
from .sparsify import SparseBand
from .volume import (
    RadianceVolume,
    VolumeMeta,
    continuum_to_world,
    world_box,
    world_scale,
    world_to_continuum,
)
from .wavelet import BandKey, band_list

SH_C0 = 0.28209479177387814  # degree-0 spherical harmonic basis constant

GAIN_MODES = ("fitted", "paper")
SIGN_MODES = ("magnitude", "signed")

AMP_SKIP = 1e-12


@dataclass
class Splat:
    center: np.ndarray       # world units
    covariance: np.ndarray   # world^2 units, symmetric PD
    amplitude: np.ndarray    # rgba
    band_tag: BandKey

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64).reshape(4)


@dataclass
class SplatSet:
    splats: list[Splat]
    world_box: np.ndarray
    gain_mode: str = "fitted"
    sign_mode: str = "magnitude"

    def __len__(self):
        return len(self.splats)

    def arrays(self):
        """Stacked (centers, covariances, amplitudes) for vectorized evaluation."""
        if not self.splats:
            return (np.empty((0, 3)), np.empty((0, 3, 3)), np.empty((0, 4)))
        return (
            np.stack([s.center for s in self.splats]),
            np.stack([s.covariance for s in self.splats]),
            np.stack([s.amplitude for s in self.splats]),
        )


def _default_meta(bank: TransitionBank) -> VolumeMeta:
    return VolumeMeta(dims=bank.source_dims, sample_type="f32le", value_range=(0.0, 1.0))


def _paper_gain(bank: TransitionBank, band: BandKey) -> float:
    # coarsest level maps to scale index 0, finest to levels-1
    j = bank.levels - band.level
    return 2.0 ** (-1.5 * j)


def coeff_to_splat(bank: TransitionBank, band: BandKey, k, A,
                   gain_mode: str = "fitted", sign_mode: str = "magnitude",
                   meta: VolumeMeta | None = None) -> Splat | None:
    """One retained coefficient to one splat; returns None for negligible ones.

    The RGBA modulation is |A|⊙w (magnitude mode) or A⊙w (signed mode); the
    scale prefactor is 1 in fitted mode and 2^(-3j/2) in paper mode, which
    re-applies the multirate decay the fitted weight already absorbed.
    """
    if gain_mode not in GAIN_MODES:
        raise ValueError(f"gain_mode must be one of {GAIN_MODES}")
    if sign_mode not in SIGN_MODES:
        raise ValueError(f"sign_mode must be one of {SIGN_MODES}")
    if band not in bank.entries:
        raise UnknownBand(f"band {band} not in bank")
    if meta is None:
        meta = _default_meta(bank)
    A = np.asarray(A, dtype=np.float64).reshape(4)
    w = bank.entries[band].weight
    p = (np.abs(A) if sign_mode == "magnitude" else A) * w
    if np.max(np.abs(p)) < AMP_SKIP:
        return None
    s = _paper_gain(bank, band) if gain_mode == "paper" else 1.0
    geom = lookup(bank, band, k)
    f = world_scale(meta)
    center = continuum_to_world(meta, geom.center)
    cov = geom.covariance * np.outer(f, f)
    return Splat(center, cov, s * p, band)


def build_splats(sparse: dict[BandKey, SparseBand], bank: TransitionBank,
                 gain_mode: str = "fitted", sign_mode: str = "magnitude",
                 meta: VolumeMeta | None = None) -> SplatSet:
    """Concatenate coeff_to_splat over all bands in deterministic order."""
    if meta is None:
        meta = _default_meta(bank)
    splats = []
    for band in band_list(bank.levels):
        sb = sparse.get(band)
        if sb is None:
            continue
        for idx, vals in zip(sb.indices, sb.values):
            s = coeff_to_splat(bank, band, idx, vals, gain_mode, sign_mode, meta)
            if s is not None:
                splats.append(s)
    return SplatSet(splats, world_box(meta), gain_mode, sign_mode)


def _cull_radius(amp_max: float, n_splats: int, tol: float | None) -> float:
    """Mahalanobis radius combining the 3σ floor with the truncation tolerance."""
    if tol is None or amp_max <= 0.0:
        return 3.0
    share = tol / max(n_splats, 1)
    if amp_max <= share:
        return 0.0  # splat can never contribute above tolerance
    return max(3.0, np.sqrt(2.0 * np.log(amp_max / share)))


def eval_field(splats: SplatSet, meta: VolumeMeta, tol: float | None = 1e-6) -> np.ndarray:
    """Raw signed RGBA mixture field on the voxel grid of `meta`.

    Each splat is evaluated only inside its culling box: at least the 3σ
    bound of its covariance, widened so the omitted mass stays below `tol`
    (pass tol=None for the bare 3σ box).
    """
    dims = meta.dims
    out = np.zeros(dims + (4,))
    if not len(splats):
        return out
    centers, covs, amps = splats.arrays()
    # continuum_to_world maps per-axis independently; build 1D world axes
    axes = []
    for a, d in enumerate(dims):
        v = np.full((d, 3), 0.5)
        v[:, a] = np.arange(d) + 0.5
        axes.append(continuum_to_world(meta, v)[:, a])
    n = len(splats)
    for i in range(n):
        cov = covs[i]
        try:
            prec = np.linalg.inv(cov)
        except np.linalg.LinAlgError as e:
            raise SingularCovariance(f"splat {i}: {e}") from e
        r = _cull_radius(float(np.max(np.abs(amps[i]))), n, tol)
        if r == 0.0:
            continue
        half = r * np.sqrt(np.clip(np.diag(cov), 0.0, None))
        lo_w, hi_w = centers[i] - half, centers[i] + half
        lo_v = np.maximum(np.ceil(world_to_continuum(meta, lo_w) - 0.5), 0).astype(int)
        hi_v = np.minimum(np.floor(world_to_continuum(meta, hi_w) - 0.5), np.array(dims) - 1).astype(int)
        if np.any(hi_v < lo_v):
            continue
        xs = axes[0][lo_v[0]:hi_v[0] + 1] - centers[i][0]
        ys = axes[1][lo_v[1]:hi_v[1] + 1] - centers[i][1]
        zs = axes[2][lo_v[2]:hi_v[2] + 1] - centers[i][2]
        dx, dy, dz = np.meshgrid(xs, ys, zs, indexing="ij")
        q = (prec[0, 0] * dx * dx + prec[1, 1] * dy * dy + prec[2, 2] * dz * dz
             + 2 * prec[0, 1] * dx * dy + 2 * prec[0, 2] * dx * dz
             + 2 * prec[1, 2] * dy * dz)
        g = np.exp(-0.5 * q)
        out[lo_v[0]:hi_v[0] + 1, lo_v[1]:hi_v[1] + 1, lo_v[2]:hi_v[2] + 1] += (
            g[..., None] * amps[i]
        )
    return out


def eval_mixture(splats: SplatSet, meta: VolumeMeta, tol: float | None = 1e-6) -> RadianceVolume:
    """Displayable RGBA volume: the raw mixture field clamped to [0,1]."""
    return RadianceVolume(meta, np.clip(eval_field(splats, meta, tol), 0.0, 1.0))


def volume_psnr(field: np.ndarray, reference: np.ndarray, cap: float = 100.0) -> float:
    """PSNR (dB, peak 1) between a raw mixture field and a reference RGBA grid."""
    mse = float(np.mean((np.asarray(field) - np.asarray(reference)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def cov_to_scale_rot(covariance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Σ = R·diag(s²)·Rᵀ factorization for 3DGS export.

    Returns (scales descending, unit quaternion (w,x,y,z) with w >= 0).
    Eigenvector signs are canonicalized (largest component positive) and the
    rotation determinant forced to +1 by flipping the last column if needed.
    """
    cov = np.asarray(covariance, dtype=np.float64)
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise NotPD("covariance not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.min() <= 0.0:
        raise NotPD(f"covariance not positive definite (min eigenvalue {vals.min():.3e})")
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    R = vecs[:, order]
    for c in range(3):
        j = int(np.argmax(np.abs(R[:, c])))
        if R[j, c] < 0:
            R[:, c] = -R[:, c]
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
    return np.sqrt(vals), _rot_to_quat(R)


def _rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w,x,y,z), w >= 0 (Shepperd)."""
    t = np.trace(R)
    if t > 0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        x = (R[2, 1] - R[1, 2]) / (2 * r)
        y = (R[0, 2] - R[2, 0]) / (2 * r)
        z = (R[1, 0] - R[0, 1]) / (2 * r)
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.zeros(4)
        q[1 + i] = 0.5 * r
        q[0] = (R[k, j] - R[j, k]) / (2 * r)
        q[1 + j] = (R[j, i] + R[i, j]) / (2 * r)
        q[1 + k] = (R[k, i] + R[i, k]) / (2 * r)
        w, x, y, z = q
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


PLY_PROPS = [
    "x", "y", "z", "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]


def export_ply(splats: SplatSet, path: str | Path,
               sidecar: dict | None = None) -> None:
    """Binary little-endian 3DGS point PLY, one vertex per splat.

    Amplitudes are globally rescaled so the largest exported opacity is 0.99;
    rgb enters f_dc as (rgb-0.5)/C0, opacity as logit, scales as log, rotation
    as a (w,x,y,z) quaternion.  A JSON sidecar (<path>.json) records modes,
    bank parameters, and per-band provenance counts.
    """
    n = len(splats)
    rows = np.zeros((n, len(PLY_PROPS)), dtype="<f4")
    counts: dict[str, int] = {}
    if n:
        amps = np.stack([s.amplitude for s in splats.splats])
        a_max = float(amps[:, 3].max())
        rescale = 0.99 / a_max if a_max > 0 else 1.0
        for i, s in enumerate(splats.splats):
            try:
                scales, quat = cov_to_scale_rot(s.covariance)
            except NotPD as e:
                raise NonExportableSplat(f"splat {i}: {e}") from e
            rgb = np.clip(s.amplitude[:3] * rescale, 0.0, 1.0)
            a = np.clip(s.amplitude[3] * rescale, 1e-5, 1.0 - 1e-5)
            rows[i, 0:3] = s.center
            rows[i, 6:9] = (rgb - 0.5) / SH_C0
            rows[i, 9] = _logit(a)
            rows[i, 10:13] = np.log(scales)
            rows[i, 13:17] = quat
            tag = f"{s.band_tag.level},{''.join(s.band_tag.orientation)}"
            counts[tag] = counts.get(tag, 0) + 1
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        + "".join(f"property float {p}\n" for p in PLY_PROPS)
        + "end_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(rows.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    meta = {
        "gain_mode": splats.gain_mode,
        "sign_mode": splats.sign_mode,
        "splat_count": n,
        "band_counts": counts,
        "world_box": np.asarray(splats.world_box).tolist(),
    }
    if sidecar:
        meta.update(sidecar)
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def import_ply(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a PLY written by export_ply back into parameter arrays.

    Returns centers (n,3), scales (n,3), quats (n,4), rgb (n,3) and
    opacity (n,) with the log/logit/DC encodings inverted.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise IoError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    n = 0
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if props != PLY_PROPS:
        raise IoError(f"{path}: unexpected property layout {props}")
    rows = np.frombuffer(
        data[end + len(b"end_header\n"):], dtype="<f4"
    ).reshape(n, len(PLY_PROPS)).astype(np.float64)
    quats = rows[:, 13:17]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    return {
        "centers": rows[:, 0:3],
        "scales": np.exp(rows[:, 10:13]),
        "quats": quats / np.where(norms > 0, norms, 1.0),
        "rgb": rows[:, 6:9] * SH_C0 + 0.5,
        "opacity": 1.0 / (1.0 + np.exp(-rows[:, 9])),
    }


def splats_from_ply_arrays(arrays: dict[str, np.ndarray],
                           world_box_arr: np.ndarray | None = None) -> SplatSet:
    """Rebuild a renderable SplatSet from import_ply output."""
    splats = []
    n = len(arrays["centers"])
    for i in range(n):
        R = quat_to_rot(arrays["quats"][i])
        cov = R @ np.diag(arrays["scales"][i] ** 2) @ R.T
        amp = np.concatenate([arrays["rgb"][i], [arrays["opacity"][i]]])
        splats.append(Splat(arrays["centers"][i], cov, amp, BandKey(1, ("L", "L", "H"))))
    if world_box_arr is None:
        world_box_arr = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    return SplatSet(splats, world_box_arr)
