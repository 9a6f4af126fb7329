"""Parallel-beam projections of square images.

The projection at angle theta rotates the image about its center with
bilinear interpolation and sums every row, so it yields one value per row.
Samples falling outside the image read as zero.
"""

import numpy as np
from skimage import transform

from . import SensingOperator
from ..errors import DomainError, ShapeError

MAX_SCALED_OBSERVATION = np.sqrt(2.0)


def rotate(x, theta):
    """Rotate ``x`` counter-clockwise by ``theta`` radians about its center."""
    return transform.rotate(
        np.array(x, dtype=float),
        np.degrees(theta),
        order=1,
        mode="constant",
        cval=0.0,
        clip=False,
        preserve_range=True,
    )


def radon_measure(theta, x):
    theta = float(theta)
    if not -np.pi <= theta <= np.pi:
        raise DomainError(f"Projection angle {theta} is outside [-pi, pi]")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"Radon projections need a square image, got {x.shape}")
    return rotate(x, theta).sum(axis=1)


def scale_radon_io(theta, y, width=None):
    """Bring an angle to [-1, 1] and a projection to [0, sqrt(2)]."""
    y = np.asarray(y, dtype=float)
    width = y.shape[-1] if width is None else width
    if width <= 0:
        raise DomainError(f"Image width must be positive, got {width}")
    return np.asarray(theta) / np.pi, np.clip(y / width, 0.0, MAX_SCALED_OBSERVATION)


class RadonOperator(SensingOperator):
    kind = "radon"
    policy_head = "von_mises"

    def __init__(self, height, width):
        super().__init__(height, width)
        if height != width:
            raise ShapeError(f"Radon operator needs square images, got {height}x{width}")

    @property
    def action_dim(self):
        return 1

    @property
    def observation_dim(self):
        return self.height

    def measure(self, actions, images):
        actions = self.check(actions, images)
        return np.stack(
            [radon_measure(theta, x) for theta, x in zip(actions[:, 0], images)]
        )

    def encoder_inputs(self, actions, observations):
        angles, projections = scale_radon_io(actions, observations, self.width)
        return np.concatenate([angles, projections], axis=1)

    def random_action(self, rng, batch):
        return rng.uniform(-np.pi, np.pi, size=(batch, 1))

    def summarize_action(self, actions):
        return np.asarray(actions)[:, 0].astype(float)
