import numpy as np
import pytest

from wavesplat.volume import ScalarVolume, TransferFunction, VolumeMeta, apply_tf


def gaussian_sum_volume(dims=(64, 64, 64), n_blobs=20, seed=7):
    """Synthetic scalar field: sum of known anisotropic Gaussians, scaled to [0,1]."""
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    field = np.zeros(dims)
    for _ in range(n_blobs):
        center = rng.uniform(-0.6, 0.6, 3)
        # random SPD covariance with axis scales in [0.06, 0.25]
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        scales = rng.uniform(0.06, 0.25, 3)
        prec = q @ np.diag(1.0 / scales**2) @ q.T
        d = pts - center
        m2 = np.einsum("...i,ij,...j->...", d, prec, d)
        field += rng.uniform(0.3, 1.0) * np.exp(-0.5 * m2)
    field -= field.min()
    field /= field.max()
    return field


def grayish_tf():
    """Fixed TF used by the synthetic-volume tests: warm ramp, opacity ramp."""
    return TransferFunction([
        (0.0, (0.0, 0.0, 0.0, 0.0)),
        (0.35, (0.1, 0.2, 0.5, 0.05)),
        (0.7, (0.9, 0.5, 0.2, 0.45)),
        (1.0, (1.0, 0.9, 0.7, 0.9)),
    ])


@pytest.fixture(scope="session")
def synthetic_radiance_64():
    """64^3 radiance volume from the fixed Gaussian-sum field and fixed TF."""
    meta = VolumeMeta((64, 64, 64), "f32le", (0.0, 1.0))
    vol = ScalarVolume(meta, gaussian_sum_volume())
    return apply_tf(vol, grayish_tf())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
