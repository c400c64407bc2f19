"""Reference volume integrator, orthographic splat renderer, and image metrics.

The DVR path produces ground-truth images by ray marching a radiance volume
with emission-absorption compositing.  The splat path projects Gaussians
orthographically (so no Jacobian linearization is needed), sorts front to
back, and composites with the same recurrence.  Both share the camera rig.
The compositing core can record its intermediate state so the fine-tuning
stage can backpropagate through exactly the computation that ran forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .construct import SplatSet
from .errors import ResolutionMismatch, SingularCovariance, TooSmall
from .volume import RadianceVolume, world_scale, world_to_continuum

PSNR_CAP = 100.0
DEFAULT_ALPHA_CLAMP = 0.99
DEFAULT_T_MIN = 1e-4


@dataclass
class Camera:
    """Orthographic camera looking along `forward` with orthonormal triad."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    half_extent: float
    resolution: tuple[int, int]  # (width, height)
    near: float
    far: float

    def __post_init__(self):
        for name in ("position", "forward", "up", "right"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        triad = np.stack([self.right, self.up, self.forward])
        if not np.allclose(triad @ triad.T, np.eye(3), atol=1e-9):
            raise ValueError("camera triad must be orthonormal")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    @property
    def basis(self) -> np.ndarray:
        """World-to-camera rotation; rows are right, up, forward."""
        return np.stack([self.right, self.up, self.forward])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Camera-frame (x, y) coordinates of pixel centers, shape (H, W)."""
        w, h = self.resolution
        px = 2.0 * self.half_extent / max(w, h)
        xs = (np.arange(w) + 0.5) * px - w * px / 2.0
        ys = h * px / 2.0 - (np.arange(h) + 0.5) * px
        return np.meshgrid(xs, ys, indexing="xy")


@dataclass
class Image:
    resolution: tuple[int, int]
    pixels: np.ndarray  # (H, W, 3) in [0,1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        w, h = self.resolution
        if self.pixels.shape != (h, w, 3):
            raise ValueError(f"pixels shape {self.pixels.shape} != (H,W,3)=({h},{w},3)")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")


def camera_rig(count: int, radius: float, resolution: tuple[int, int] = (256, 256),
               half_extent: float = 1.8) -> list[Camera]:
    """Fibonacci-sphere rig of `count` cameras at `radius`, all looking at the origin."""
    if count < 1:
        raise ValueError("count must be >= 1")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    margin = 1.05 * np.sqrt(3.0)
    cams = []
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        pos = radius * np.array([r * np.cos(theta), r * np.sin(theta), z])
        forward = -pos / np.linalg.norm(pos)
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up_hint) > 0.999:
            up_hint = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        cams.append(Camera(pos, forward, up, right, half_extent, resolution,
                           near=max(0.0, radius - margin), far=radius + margin))
    return cams


def render_dvr(vol: RadianceVolume, cam: Camera, step: float) -> Image:
    """Front-to-back emission-absorption ray marching with trilinear sampling.

    Opacity is corrected for the step length: alpha_hat = 1-(1-a)^(step/voxel),
    with `voxel` the smallest world-space voxel extent.  Marching stops once
    transmittance drops below 1e-4; the background is black.
    """
    voxel = float(world_scale(vol.meta).min())
    if step > 0.5 * voxel + 1e-12:
        raise ValueError(f"step {step} exceeds half the voxel size {voxel}")
    w, h = cam.resolution
    xg, yg = cam.pixel_grid()
    origins = (cam.position[None, :]
               + xg.reshape(-1, 1) * cam.right[None, :]
               + yg.reshape(-1, 1) * cam.up[None, :])
    n_steps = int(np.ceil((cam.far - cam.near) / step))
    color = np.zeros((h * w, 3))
    trans = np.ones(h * w)
    exponent = step / voxel
    for i in range(n_steps):
        active = trans >= DEFAULT_T_MIN
        if not active.any():
            break
        t = cam.near + (i + 0.5) * step
        pos = origins[active] + t * cam.forward[None, :]
        rgba = _sample_trilinear(vol, pos)
        a_hat = 1.0 - (1.0 - rgba[:, 3]) ** exponent
        color[active] += (trans[active] * a_hat)[:, None] * rgba[:, :3]
        trans[active] *= 1.0 - a_hat
    return Image(cam.resolution, np.clip(color.reshape(h, w, 3), 0.0, 1.0))


def _sample_trilinear(vol: RadianceVolume, pos_world: np.ndarray) -> np.ndarray:
    """RGBA at world positions; zero outside the grid.

    Color is interpolated premultiplied by opacity and unpremultiplied after,
    so opacity boundaries fade without darkening the emitted color.
    """
    dims = np.array(vol.meta.dims)
    # index coordinates: sample i sits at p = i
    p = world_to_continuum(vol.meta, pos_world) - 0.5
    rgba = np.zeros((len(p), 4))
    inside = np.all((p > -1.0) & (p < dims[None, :]), axis=1)
    if not inside.any():
        return rgba
    p = p[inside]
    pm = np.concatenate([vol.rgba[..., :3] * vol.rgba[..., 3:4], vol.rgba[..., 3:4]],
                        axis=-1)
    # zero-pad by one voxel so border samples fade to black
    padded = np.pad(pm, ((1, 1), (1, 1), (1, 1), (0, 0)))
    q = p + 1.0
    i0 = np.floor(q).astype(int)
    f = q - i0
    i0 = np.clip(i0, 0, dims + 0)  # padded dims are dims+2; i0+1 <= dims+1
    out = np.zeros((len(p), 4))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                out += wgt[:, None] * padded[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    alpha = out[:, 3]
    safe = np.where(alpha > 1e-12, alpha, 1.0)
    out[:, :3] /= safe[:, None]
    out[alpha <= 1e-12, :3] = 0.0
    rgba[inside] = out
    return rgba


# ---------------------------------------------------------------------------
# splat compositing core (shared by render_splats and the fine-tuner)

@dataclass
class SplatRecord:
    """Per-splat forward state needed to replay compositing in reverse."""

    splat_index: int
    pixels: np.ndarray      # flat pixel indices touched while active
    d: np.ndarray           # (n_px, 2) pixel minus projected center
    g: np.ndarray           # Gaussian footprint values
    alpha: np.ndarray       # clamped opacity actually composited
    clamp_gate: np.ndarray  # 1 where the opacity clamp was inactive
    t_before: np.ndarray    # transmittance entering this splat
    prec2: np.ndarray       # (2,2) inverse of the 2D covariance


@dataclass
class CompositeResult:
    image: np.ndarray       # (H, W, 3) raw accumulation (unclipped)
    order: np.ndarray
    records: list[SplatRecord] = field(default_factory=list)


def composite_splats(mu2: np.ndarray, depth: np.ndarray, cov2: np.ndarray,
                     rgb: np.ndarray, alpha: np.ndarray, cam: Camera,
                     cull_sigma: float | None = 3.0,
                     alpha_clamp: float = DEFAULT_ALPHA_CLAMP,
                     t_min: float = DEFAULT_T_MIN,
                     record: bool = False) -> CompositeResult:
    """Front-to-back composite of projected 2D Gaussians.

    Splats are sorted by camera depth (ties broken on center/opacity/color so
    the result is independent of input order).  Each splat touches only the
    pixels inside its cull_sigma Mahalanobis ellipse (all pixels when None),
    and pixels stop accumulating once transmittance falls below t_min.
    """
    w, h = cam.resolution
    px = 2.0 * cam.half_extent / max(w, h)
    xs = (np.arange(w) + 0.5) * px - w * px / 2.0
    ys = h * px / 2.0 - (np.arange(h) + 0.5) * px
    n = len(mu2)
    order = np.lexsort((rgb[:, 2], rgb[:, 1], rgb[:, 0], alpha,
                        mu2[:, 1], mu2[:, 0], depth))
    color = np.zeros((h * w, 3))
    trans = np.ones(h * w)
    records: list[SplatRecord] = []
    empty = SplatRecord(0, np.empty(0, dtype=int), np.empty((0, 2)), np.empty(0),
                        np.empty(0), np.empty(0), np.empty(0), np.eye(2))
    for i in order:
        try:
            prec = np.linalg.inv(cov2[i])
        except np.linalg.LinAlgError as e:
            raise SingularCovariance(f"splat {i}: singular 2D covariance") from e
        if cull_sigma is None:
            c0, c1, r0, r1 = 0, w, 0, h
        else:
            half = cull_sigma * np.sqrt(np.clip(np.diag(cov2[i]), 0.0, None))
            c0 = int(np.searchsorted(xs, mu2[i, 0] - half[0], side="left"))
            c1 = int(np.searchsorted(xs, mu2[i, 0] + half[0], side="right"))
            # ys is descending; convert via symmetric bounds
            r0 = int(np.searchsorted(-ys, -(mu2[i, 1] + half[1]), side="left"))
            r1 = int(np.searchsorted(-ys, -(mu2[i, 1] - half[1]), side="right"))
        if c0 >= c1 or r0 >= r1:
            if record:
                records.append(empty)
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1), indexing="xy")
        flat = (rows * w + cols).ravel()
        d = np.stack([xs[cols.ravel()] - mu2[i, 0], ys[rows.ravel()] - mu2[i, 1]], axis=1)
        m2 = (prec[0, 0] * d[:, 0] ** 2
              + 2.0 * prec[0, 1] * d[:, 0] * d[:, 1]
              + prec[1, 1] * d[:, 1] ** 2)
        mask = trans[flat] > t_min
        if cull_sigma is not None:
            mask &= m2 <= cull_sigma * cull_sigma
        if not mask.any():
            if record:
                records.append(empty)
            continue
        idx = flat[mask]
        g = np.exp(-0.5 * m2[mask])
        a_raw = alpha[i] * g
        a = np.clip(a_raw, 0.0, alpha_clamp)
        gate = (a_raw < alpha_clamp).astype(np.float64)
        t_before = trans[idx].copy()
        color[idx] += (t_before * a)[:, None] * rgb[i]
        trans[idx] = t_before * (1.0 - a)
        if record:
            records.append(SplatRecord(i, idx, d[mask], g, a, gate, t_before, prec))
    return CompositeResult(color.reshape(h, w, 3), order, records)


def composite_backward(result: CompositeResult, d_image: np.ndarray,
                       rgb: np.ndarray, alpha: np.ndarray):
    """Gradients of the compositing output wrt mu2, cov2, rgb, alpha.

    Walks the records in reverse depth order maintaining the per-pixel suffix
    of contributions behind the current splat.  The depth ordering, footprint
    masks, and early-exit set are the frozen discrete choices of the forward
    pass.
    """
    n = len(rgb)
    h, w, _ = d_image.shape
    dC = d_image.reshape(h * w, 3)
    suffix = np.zeros((h * w, 3))
    g_mu2 = np.zeros((n, 2))
    g_cov2 = np.zeros((n, 2, 2))
    g_rgb = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    for rec in reversed(result.records):
        i = rec.splat_index
        idx = rec.pixels
        if idx.size == 0:
            continue
        dC_px = dC[idx]
        t = rec.t_before
        a = rec.alpha
        # color: C += T a rho
        g_rgb[i] += (t * a) @ dC_px
        grad_a = (dC_px * rgb[i]).sum(axis=1) * t
        grad_a -= (dC_px * suffix[idx]).sum(axis=1) / (1.0 - a)
        suffix[idx] += (t * a)[:, None] * rgb[i]
        # alpha = clamp(alpha_i * g)
        grad_araw = grad_a * rec.clamp_gate
        g_alpha[i] += float(grad_araw @ rec.g)
        grad_g = grad_araw * alpha[i]
        grad_m2 = -0.5 * rec.g * grad_g
        ld = rec.d @ rec.prec2.T  # Lambda d per pixel
        grad_d = 2.0 * grad_m2[:, None] * ld
        g_mu2[i] += -grad_d.sum(axis=0)
        grad_lam = np.einsum("p,pi,pj->ij", grad_m2, rec.d, rec.d)
        g_cov2[i] += -rec.prec2 @ grad_lam @ rec.prec2
    return g_mu2, g_cov2, g_rgb, g_alpha


def project_splats(centers: np.ndarray, covs: np.ndarray, cam: Camera):
    """Camera-frame 2D centers, depths, and 2x2 covariances (orthographic)."""
    R = cam.basis
    t = (centers - cam.position) @ R.T
    cov_cam = np.einsum("ab,nbc,dc->nad", R, covs, R)
    return t[:, :2], t[:, 2], cov_cam[:, :2, :2]


def render_splats(splats: SplatSet, cam: Camera, cull_sigma: float | None = 3.0,
                  alpha_clamp: float = DEFAULT_ALPHA_CLAMP,
                  t_min: float = DEFAULT_T_MIN) -> Image:
    """Orthographic forward rendering of a splat set (opacities clipped to >= 0)."""
    if not len(splats):
        w, h = cam.resolution
        return Image(cam.resolution, np.zeros((h, w, 3)))
    centers, covs, amps = splats.arrays()
    mu2, depth, cov2 = project_splats(centers, covs, cam)
    rgb = np.clip(amps[:, :3], 0.0, 1.0)
    alpha = np.clip(amps[:, 3], 0.0, None)
    res = composite_splats(mu2, depth, cov2, rgb, alpha, cam,
                           cull_sigma=cull_sigma, alpha_clamp=alpha_clamp, t_min=t_min)
    return Image(cam.resolution, np.clip(res.image, 0.0, 1.0))


# ---------------------------------------------------------------------------
# metrics

def _check_same(a: Image, b: Image) -> None:
    if a.resolution != b.resolution:
        raise ResolutionMismatch(f"{a.resolution} vs {b.resolution}")


def psnr(a: Image, b: Image) -> float:
    """10·log10(1/MSE) on [0,1] pixels; identical images return the 100 dB cap."""
    _check_same(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _win_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with the 1D window g along both axes."""
    t = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(t, len(g), axis=1) @ g


def _win_filter_adjoint(up: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = len(g) - 1
    return _win_filter(np.pad(up, pad), g)


SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray, with_grad: bool):
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _win_filter(x, g)
    mu_y = _win_filter(y, g)
    sxx = _win_filter(x * x, g)
    syy = _win_filter(y * y, g)
    sxy = _win_filter(x * y, g)
    var_x = sxx - mu_x * mu_x
    var_y = syy - mu_y * mu_y
    cov = sxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    s = (a1 * a2) / (b1 * b2)
    if not with_grad:
        return s, None
    # partials of s wrt the window statistics (mu_x, sxx, sxy independent)
    inv = 1.0 / (b1 * b2)
    d_a1 = a2 * inv
    d_a2 = a1 * inv
    d_b1 = -s / b1
    d_b2 = -s / b2
    d_mu_x = d_a1 * 2 * mu_y + d_a2 * (-2 * mu_y) + d_b1 * 2 * mu_x + d_b2 * (-2 * mu_x)
    d_sxx = d_b2
    d_sxy = d_a2 * 2
    grad = (_win_filter_adjoint(d_mu_x, g)
            + 2 * x * _win_filter_adjoint(d_sxx, g)
            + y * _win_filter_adjoint(d_sxy, g))
    return s, grad


def ssim(a: Image, b: Image) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
    dynamic range 1, channel-averaged mean over valid windows."""
    val, _ = ssim_and_grad(a, b, with_grad=False)
    return val


def ssim_and_grad(a: Image, b: Image, with_grad: bool = True):
    """SSIM value and, optionally, its gradient wrt the first image's pixels."""
    _check_same(a, b)
    w, h = a.resolution
    if min(w, h) < SSIM_WIN:
        raise TooSmall(f"images must be at least {SSIM_WIN} px per side")
    g = _gaussian_window(SSIM_WIN, SSIM_SIGMA)
    total = 0.0
    grad = np.zeros_like(a.pixels) if with_grad else None
    n_win = (h - SSIM_WIN + 1) * (w - SSIM_WIN + 1)
    for c in range(3):
        s, gc = _ssim_channel(a.pixels[:, :, c], b.pixels[:, :, c], g, with_grad)
        total += float(s.mean())
        if with_grad:
            grad[:, :, c] = gc / (n_win * 3)
    return total / 3.0, grad


# ---------------------------------------------------------------------------
# image files

def save_ppm(img: Image, path: str | Path) -> None:
    w, h = img.resolution
    data = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path: str | Path) -> Image:
    import re

    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(m.group(k)) for k in (1, 2, 3))
    pixels = np.frombuffer(data[m.end():m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return Image((w, h), pixels.astype(np.float64) / maxval)


def save_png(img: Image, path: str | Path) -> None:
    """Optional PNG output (requires pillow)."""
    from PIL import Image as PILImage

    data = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(str(path))
