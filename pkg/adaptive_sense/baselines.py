"""ISTA reconstruction from non-adaptive Gaussian measurements.

Solves the lasso  1/2 ||A x - y||^2 + lambda ||x||_1  in the pixel basis by
iterative soft-thresholding, starting from x = 0.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import metrics
from .errors import ConfigError, DomainError, NonFiniteError, ShapeError

POWER_ITERATIONS = 50
# Power iteration approaches L from below.
STEP_MARGIN = 1.001


@dataclass(frozen=True)
class IstaConfig:
    lam: float = 1e-3
    max_iters: int = 1000
    tol: float = 1e-6
    step: object = "auto"

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"ISTA lambda must be positive, got {self.lam}")
        if self.max_iters < 1:
            raise ConfigError(f"ISTA needs at least one iteration, got {self.max_iters}")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ConfigError(f"ISTA step must be 'auto' or a positive number, got {self.step!r}")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        data.pop("measurements", None)
        return cls(**data)


def soft_threshold(v, tau):
    if np.any(np.asarray(tau) < 0):
        raise DomainError(f"Threshold must not be negative, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def lipschitz_constant(A, iterations=POWER_ITERATIONS):
    """Largest eigenvalue of A^T A by power iteration."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    v = np.random.default_rng(0).standard_normal(A.shape[1])
    estimate = 0.0
    for _ in range(iterations):
        w = A.T @ (A @ v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        estimate = float(v @ w / (v @ v))
        v = w / norm
    return max(estimate, float(v @ (A.T @ (A @ v))))


def objective(A, y, x, lam):
    residual = A @ x - y
    return 0.5 * float(np.sum(residual**2)) + lam * float(np.sum(np.abs(x)))


def _check_inputs(A, y):
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if A.ndim != 2 or y.shape[0] != A.shape[0] or y.ndim not in (1, 2):
        raise ShapeError(f"Measurements {y.shape} do not fit a {A.shape} matrix")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
        raise NonFiniteError("ISTA inputs must be finite")
    return A, y


def resolve_step(A, step):
    lipschitz = lipschitz_constant(A)
    if step == "auto":
        return 1.0 / (STEP_MARGIN * lipschitz) if lipschitz > 0 else 1.0
    if lipschitz > 0 and step > 2.0 / lipschitz:
        raise DomainError(
            f"ISTA step {step} exceeds 2/L = {2.0 / lipschitz:.6g} and would diverge"
        )
    return float(step)


def ista_iterates(A, y, lam, step, max_iters, tol):
    """Yield successive iterates; stops once an update is shorter than ``tol``."""
    x = np.zeros((A.shape[1],) + y.shape[1:])
    for _ in range(max_iters):
        new = soft_threshold(x - step * (A.T @ (A @ x - y)), step * lam)
        delta = np.linalg.norm(new - x)
        x = new
        yield x
        if delta < tol:
            return


def ista_solve(A, y, config=IstaConfig()):
    """Lasso estimate for ``y`` (one column per signal when 2-D)."""
    A, y = _check_inputs(A, y)
    if A.shape[0] == 0:
        return np.zeros((A.shape[1],) + y.shape[1:])
    step = resolve_step(A, config.step)
    x = np.zeros((A.shape[1],) + y.shape[1:])
    count = 0
    for count, x in enumerate(
        ista_iterates(A, y, config.lam, step, config.max_iters, config.tol), start=1
    ):
        pass
    logging.debug("ISTA stopped after %d iterations (step %.4g)", count, step)
    return x


def gaussian_matrix(n_rows, n_cols, rng):
    """Gaussian measurement rows scaled to unit norm."""
    A = rng.standard_normal((n_rows, n_cols))
    return A / np.linalg.norm(A, axis=1, keepdims=True)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    measurements: int
    mse: metrics.MetricReport


def ista_sweep(images, measurements, config, rng):
    """Per-pixel MSE of ISTA reconstructions for each measurement count.

    Every count uses the leading rows of one shared Gaussian matrix, so the
    measurement sets are nested.
    """
    images = np.asarray(images, dtype=np.float64)
    n_pixels = images.shape[1] * images.shape[2]
    counts = sorted(set(int(m) for m in measurements))
    if counts and (counts[0] < 0 or counts[-1] > n_pixels):
        raise ConfigError(f"Measurement counts must lie in [0, {n_pixels}]")
    X = images.reshape(len(images), -1).T
    A_full = gaussian_matrix(counts[-1], n_pixels, rng) if counts and counts[-1] else None
    rows = []
    for m in counts:
        A = A_full[:m] if m else np.zeros((0, n_pixels))
        estimate = ista_solve(A, A @ X, config)
        per_image = np.mean((estimate - X) ** 2, axis=0)
        report = metrics.report(per_image)
        logging.info(
            "ISTA lambda=%g m=%d: per-pixel MSE %.5f +- %.5f",
            config.lam, m, report.mean, report.stderr,
        )
        rows.append(SweepRow(config.lam, m, report))
    return rows
