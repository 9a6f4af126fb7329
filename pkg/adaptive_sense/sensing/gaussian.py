import numpy as np

from . import SensingOperator
from ..errors import NormalizationError, ShapeError

EPSILON = 1e-8


def normalize_action(a):
    """Scale ``a`` (or each row of a batch) to unit L2 norm."""
    a = np.asarray(a, dtype=float)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norm <= EPSILON):
        raise NormalizationError(
            f"Can not normalize a measurement vector with norm below {EPSILON}"
        )
    return a / norm


def gaussian_measure(a, x):
    a = np.ravel(a)
    x = np.ravel(x)
    if a.shape != x.shape:
        raise ShapeError(f"Measurement vector has {a.size} entries, image has {x.size}")
    return float(np.dot(a, x))


class GaussianOperator(SensingOperator):
    """y = <a, x> with a the normalized measurement vector."""

    kind = "gaussian"
    policy_head = "gaussian"

    @property
    def action_dim(self):
        return self.height * self.width

    @property
    def observation_dim(self):
        return 1

    def measure(self, actions, images):
        actions = self.check(actions, images)
        flat = np.asarray(images).reshape(actions.shape[0], -1)
        return np.einsum("bn,bn->b", normalize_action(actions), flat)[:, None]

    def encoder_inputs(self, actions, observations):
        return np.concatenate([normalize_action(actions), observations], axis=1)

    def random_action(self, rng, batch):
        return rng.standard_normal((batch, self.action_dim))

    def summarize_action(self, actions):
        # Pixel the measurement leans on the most.
        return np.argmax(np.abs(actions), axis=1).astype(float)
