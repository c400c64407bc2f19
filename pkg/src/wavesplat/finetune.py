"""Image-space refinement of splat parameters with analytic gradients and Adam.

Splats are reparameterized for unconstrained optimization: covariance as
rotation quaternion + log scales (PD by construction), color and opacity
through sigmoids.  The loss is (1-λ)·L1 + λ·(1-SSIM) against reference
images; gradients flow through compositing, the orthographic 2D projection,
and the reparameterizations.  Depth order, footprint masks, and the
transmittance early-exit are frozen per step (standard practice for splat
rasterizers).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .construct import Splat, SplatSet, cov_to_scale_rot, quat_to_rot
from .errors import NonFiniteLoss, ResolutionMismatch
from .render import (
    Camera,
    Image,
    composite_backward,
    composite_splats,
    psnr,
    ssim_and_grad,
)
from .wavelet import BandKey

PARAM_GROUPS = ("centers", "log_scales", "quats", "rgb_logits", "opacity_logits")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_LOGIT_EPS = 1e-5


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


@dataclass
class SplatParams:
    """Optimization-space splat parameters (one row per splat)."""

    centers: np.ndarray         # (n, 3)
    log_scales: np.ndarray      # (n, 3)
    quats: np.ndarray           # (n, 4), normalized on use
    rgb_logits: np.ndarray      # (n, 3), sigmoid-mapped on use
    opacity_logits: np.ndarray  # (n,)

    def __post_init__(self):
        for name in PARAM_GROUPS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.centers)
        if (self.log_scales.shape != (n, 3) or self.quats.shape != (n, 4)
                or self.rgb_logits.shape != (n, 3) or self.opacity_logits.shape != (n,)):
            raise ValueError("parameter group shapes disagree")

    def __len__(self):
        return len(self.centers)

    def copy(self) -> "SplatParams":
        return SplatParams(*(getattr(self, g).copy() for g in PARAM_GROUPS))


@dataclass
class OptState:
    """Adam moment accumulators and per-group learning rates."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    rates: dict[str, float]

    @classmethod
    def fresh(cls, params: SplatParams, rates: dict[str, float]) -> "OptState":
        return cls(
            m={g: np.zeros_like(getattr(params, g)) for g in PARAM_GROUPS},
            v={g: np.zeros_like(getattr(params, g)) for g in PARAM_GROUPS},
            step=0,
            rates=dict(rates),
        )


def default_rates(scene_extent: float) -> dict[str, float]:
    return {
        "centers": 2e-4 * scene_extent,
        "rgb_logits": 2.5e-3,
        "opacity_logits": 5e-2,
        "log_scales": 5e-3,
        "quats": 1e-3,
    }


def params_from_splats(splats: SplatSet) -> SplatParams:
    """Reparameterize renderable splats (rgb/opacity expected in (0,1))."""
    n = len(splats)
    centers = np.zeros((n, 3))
    log_scales = np.zeros((n, 3))
    quats = np.zeros((n, 4))
    rgb = np.zeros((n, 3))
    op = np.zeros(n)
    for i, s in enumerate(splats.splats):
        scales, quat = cov_to_scale_rot(s.covariance)
        centers[i] = s.center
        log_scales[i] = np.log(scales)
        quats[i] = quat
        rgb[i] = s.amplitude[:3]
        op[i] = s.amplitude[3]
    return SplatParams(centers, log_scales, quats, _logit(rgb), _logit(op))


def splats_to_render(params: SplatParams, world_box: np.ndarray) -> SplatSet:
    """Materialize parameters into a renderable SplatSet."""
    splats = []
    tag = BandKey(1, ("L", "L", "H"))
    for i in range(len(params)):
        R = quat_to_rot(params.quats[i])
        cov = R @ np.diag(np.exp(2.0 * params.log_scales[i])) @ R.T
        amp = np.concatenate([
            _sigmoid(params.rgb_logits[i]),
            [_sigmoid(params.opacity_logits[i])],
        ])
        splats.append(Splat(params.centers[i], cov, amp, tag))
    return SplatSet(splats, world_box)


def loss(pred: Image, gt: Image, lambda_ssim: float = 0.2) -> float:
    """(1-λ)·L1 + λ·(1-SSIM)."""
    if pred.resolution != gt.resolution:
        raise ResolutionMismatch(f"{pred.resolution} vs {gt.resolution}")
    if not 0.0 <= lambda_ssim <= 1.0:
        raise ValueError("lambda_ssim must lie in [0,1]")
    l1 = float(np.mean(np.abs(pred.pixels - gt.pixels)))
    if lambda_ssim == 0.0:
        return l1
    s, _ = ssim_and_grad(pred, gt, with_grad=False)
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)


# quaternion derivative helpers: dR/d(component) for unit quaternion (w,x,y,z)
def _drot_dquat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dw, dx, dy, dz])


@dataclass
class _Forward:
    pred: Image
    loss: float
    grads: SplatParams


def _loss_and_grads(params: SplatParams, cam: Camera, gt: Image,
                    lambda_ssim: float = 0.2, cull_sigma: float | None = 3.0,
                    t_min: float = 1e-4) -> _Forward:
    n = len(params)
    norms = np.linalg.norm(params.quats, axis=1)
    qhat = params.quats / norms[:, None]
    Rs = np.stack([quat_to_rot(q) for q in qhat])
    s = np.exp(params.log_scales)
    A = Rs * s[:, None, :]                       # R @ diag(s)
    covs = A @ np.transpose(A, (0, 2, 1))
    rgb = _sigmoid(params.rgb_logits)
    a = _sigmoid(params.opacity_logits)

    Rc = cam.basis
    t = (params.centers - cam.position) @ Rc.T
    mu2, depth = t[:, :2], t[:, 2]
    cov_cam = np.einsum("ab,nbc,dc->nad", Rc, covs, Rc)
    cov2 = cov_cam[:, :2, :2]

    result = composite_splats(mu2, depth, cov2, rgb, a, cam,
                              cull_sigma=cull_sigma, t_min=t_min, record=True)
    if not np.all(np.isfinite(result.image)):
        raise NonFiniteLoss("rendered image contains non-finite values")
    pred = Image(cam.resolution, result.image)

    n_px = pred.pixels.size
    diff = pred.pixels - gt.pixels
    l1 = float(np.mean(np.abs(diff)))
    d_pixels = (1.0 - lambda_ssim) * np.sign(diff) / n_px
    total = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0.0:
        s_val, s_grad = ssim_and_grad(pred, gt)
        total += lambda_ssim * (1.0 - s_val)
        d_pixels = d_pixels - lambda_ssim * s_grad

    g_mu2, g_cov2, g_rgb, g_alpha = composite_backward(result, d_pixels, rgb, a)

    # projection: mu2 = (Rc (c - pos))[:2], cov2 = M covs M^T with M = Rc[:2]
    M = Rc[:2, :]
    g_centers = g_mu2 @ M
    g_covs = np.einsum("ka,nkl,lb->nab", M, g_cov2, M)

    # covs = A A^T with independent-entry gradients
    g_A = (g_covs + np.transpose(g_covs, (0, 2, 1))) @ A
    g_log_scales = np.einsum("nba,nbk->nak", Rs, g_A)
    g_log_scales = np.stack([np.diag(m) for m in g_log_scales]) * s
    g_R = g_A * s[:, None, :]

    g_quats = np.zeros((n, 4))
    for i in range(n):
        dR = _drot_dquat(qhat[i])
        g_qhat = np.einsum("kab,ab->k", dR, g_R[i])
        g_quats[i] = (g_qhat - qhat[i] * (qhat[i] @ g_qhat)) / norms[i]

    grads = SplatParams(
        centers=g_centers,
        log_scales=g_log_scales,
        quats=g_quats,
        rgb_logits=g_rgb * rgb * (1.0 - rgb),
        opacity_logits=g_alpha * a * (1.0 - a),
    )
    return _Forward(pred, total, grads)


def backward(params: SplatParams, cam: Camera, gt: Image,
             lambda_ssim: float = 0.2, cull_sigma: float | None = 3.0,
             t_min: float = 1e-4) -> SplatParams:
    """Gradients of loss(render(params, cam), gt) for every parameter group."""
    return _loss_and_grads(params, cam, gt, lambda_ssim, cull_sigma, t_min).grads


def forward_loss(params: SplatParams, cam: Camera, gt: Image,
                 lambda_ssim: float = 0.2, cull_sigma: float | None = 3.0,
                 t_min: float = 1e-4) -> float:
    """Loss of the rendered image only (used by finite-difference checks)."""
    f = _loss_and_grads(params, cam, gt, lambda_ssim=0.0, cull_sigma=cull_sigma,
                        t_min=t_min)
    if lambda_ssim == 0.0:
        return f.loss
    return loss(f.pred, gt, lambda_ssim)


@dataclass
class OptimizeResult:
    params: SplatParams
    history: list[dict] = field(default_factory=list)


def optimize(params: SplatParams, views: list[tuple[Camera, Image]], iters: int,
             rates: dict[str, float] | None = None, lambda_ssim: float = 0.2,
             seed: int = 0, cull_sigma: float | None = 3.0,
             t_min: float = 1e-4) -> OptimizeResult:
    """Adam refinement against one uniformly random view per step (seeded)."""
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if not views:
        raise ValueError("views must be nonempty")
    if rates is None:
        span = params.centers.max(axis=0) - params.centers.min(axis=0) if len(params) else np.zeros(3)
        extent = float(np.linalg.norm(span))
        rates = default_rates(extent if extent > 0 else 1.0)
    params = params.copy()
    state = OptState.fresh(params, rates)
    rng = np.random.default_rng(seed)
    history: list[dict] = []
    for it in range(iters):
        view = int(rng.integers(len(views)))
        cam, gt = views[view]
        f = _loss_and_grads(params, cam, gt, lambda_ssim, cull_sigma, t_min)
        if not np.isfinite(f.loss):
            raise NonFiniteLoss(f"non-finite loss {f.loss} at iteration {it}, view {view}")
        state.step += 1
        bc1 = 1.0 - ADAM_BETA1 ** state.step
        bc2 = 1.0 - ADAM_BETA2 ** state.step
        for g in PARAM_GROUPS:
            grad = getattr(f.grads, g)
            state.m[g] = ADAM_BETA1 * state.m[g] + (1.0 - ADAM_BETA1) * grad
            state.v[g] = ADAM_BETA2 * state.v[g] + (1.0 - ADAM_BETA2) * grad * grad
            update = (state.rates[g] * (state.m[g] / bc1)
                      / (np.sqrt(state.v[g] / bc2) + ADAM_EPS))
            setattr(params, g, getattr(params, g) - update)
        history.append({
            "iter": it,
            "view": view,
            "loss": f.loss,
            "psnr": psnr(f.pred, gt),
        })
    return OptimizeResult(params, history)


def mean_view_loss(params: SplatParams, views: list[tuple[Camera, Image]],
                   lambda_ssim: float = 0.2, cull_sigma: float | None = 3.0) -> float:
    vals = []
    for cam, gt in views:
        f = _loss_and_grads(params, cam, gt, lambda_ssim=0.0, cull_sigma=cull_sigma)
        vals.append(loss(f.pred, gt, lambda_ssim) if lambda_ssim > 0 else f.loss)
    return float(np.mean(vals))


def mean_view_psnr(params: SplatParams, views: list[tuple[Camera, Image]],
                   cull_sigma: float | None = 3.0) -> float:
    vals = []
    for cam, gt in views:
        f = _loss_and_grads(params, cam, gt, lambda_ssim=0.0, cull_sigma=cull_sigma)
        vals.append(psnr(f.pred, gt))
    return float(np.mean(vals))


def write_log(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iter", "view", "loss", "psnr"])
        writer.writeheader()
        writer.writerows(history)
