from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from .errors import DomainError, ShapeError

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0


@dataclass(frozen=True)
class MetricReport:
    mean: float
    stderr: float
    worst_case: float
    per_sample: tuple

    @property
    def count(self):
        return len(self.per_sample)


def _pair(xhat, x):
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.shape != x.shape:
        raise ShapeError(f"Can not compare images of shape {xhat.shape} and {x.shape}")
    return xhat, x


def _global_ssim(a, b):
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )


def ssim(xhat, x):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and unit data range.

    Images with a side shorter than the window are scored with a single
    window spanning the whole image.
    """
    xhat, x = _pair(xhat, x)
    if xhat.ndim != 2:
        raise ShapeError(f"ssim expects 2-D images, got shape {xhat.shape}")
    if min(x.shape) < WINDOW:
        return float(_global_ssim(xhat, x))
    return float(
        structural_similarity(
            xhat,
            x,
            data_range=DATA_RANGE,
            gaussian_weights=True,
            sigma=SIGMA,
            use_sample_covariance=False,
            K1=K1,
            K2=K2,
        )
    )


def mse(xhat, x):
    xhat, x = _pair(xhat, x)
    return float(np.mean((xhat - x) ** 2))


def ssim_batch(xhats, xs):
    xhats, xs = _pair(xhats, xs)
    return np.array([ssim(a, b) for a, b in zip(xhats, xs)])


def mse_batch(xhats, xs):
    xhats, xs = _pair(xhats, xs)
    return ((xhats - xs) ** 2).reshape(len(xs), -1).mean(axis=1)


def report(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DomainError("Can not summarize an empty set of metric values")
    stderr = 0.0
    if values.size > 1:
        stderr = float(values.std(ddof=1) / np.sqrt(values.size))
    return MetricReport(
        mean=float(values.mean()),
        stderr=stderr,
        worst_case=float(values.min()),
        per_sample=tuple(float(v) for v in values),
    )
