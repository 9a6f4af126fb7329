from importlib.metadata import entry_points

import numpy as np

from ..errors import ShapeError, UnsupportedError


def wrap_angle(theta):
    """Map angles into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


class SensingOperator:
    """Base class for measurement operators F(a, x) on h x w images.

    Subclasses set ``kind`` and implement ``measure``, ``encoder_inputs``,
    ``random_action`` and ``summarize_action`` over batches: actions are
    (B, action_dim), images (B, h, w), observations (B, observation_dim).
    """

    kind = None
    # Which policy head can drive this operator.
    policy_head = None

    def __init__(self, height, width):
        if height <= 0 or width <= 0:
            raise ShapeError(f"Image dimensions must be positive, got {height}x{width}")
        self.height = height
        self.width = width

    def __repr__(self):
        return f"{type(self).__name__}({self.height}x{self.width})"

    @property
    def action_dim(self):
        raise NotImplementedError

    @property
    def observation_dim(self):
        raise NotImplementedError

    @property
    def input_dim(self):
        """Width of one encoder input row: action and observation side by side."""
        return self.action_dim + self.observation_dim

    def check(self, actions, images=None):
        actions = np.asarray(actions)
        if actions.ndim != 2 or actions.shape[1] != self.action_dim:
            raise ShapeError(
                f"{self.kind} operator expects actions of shape (B, {self.action_dim}), "
                f"got {actions.shape}"
            )
        if images is not None:
            images = np.asarray(images)
            if images.shape != (actions.shape[0], self.height, self.width):
                raise ShapeError(
                    f"{self.kind} operator expects images of shape "
                    f"({actions.shape[0]}, {self.height}, {self.width}), got {images.shape}"
                )
        return actions

    def measure(self, actions, images):
        raise NotImplementedError

    def encoder_inputs(self, actions, observations):
        raise NotImplementedError

    def random_action(self, rng, batch):
        raise NotImplementedError

    def summarize_action(self, actions):
        raise NotImplementedError


def _builtin():
    from .gaussian import GaussianOperator
    from .radon import RadonOperator

    return {"gaussian": GaussianOperator, "radon": RadonOperator}


def load():
    """Operator classes by name: built-ins plus installed entry points."""
    group = "adaptive_sense.operators"
    try:
        # Python 3.10+
        eps = entry_points(group=group)
    except TypeError:
        # Python 3.9
        eps = entry_points().get(group, [])
    operators = _builtin()
    operators.update({ep.name: ep.load() for ep in eps})
    return operators


def create(kind, height, width):
    try:
        cls = load()[kind]
    except KeyError:
        raise UnsupportedError(f"Unknown sensing operator: {kind}")
    return cls(height, width)


def batch_measure(A, x):
    """Full observation of ``x`` under a fixed measurement set.

    A 2-D ``A`` holds one Gaussian measurement vector per row; a 1-D ``A``
    holds Radon angles. The result stacks the single measurements.
    """
    from .gaussian import gaussian_measure
    from .radon import radon_measure

    A = np.asarray(A)
    if A.ndim == 2:
        return np.array([gaussian_measure(a, x) for a in A])
    if A.ndim == 1:
        return np.stack([radon_measure(theta, x) for theta in A])
    raise ShapeError(f"Measurement set must be 1-D or 2-D, got shape {A.shape}")
