"""Episodes of sequential measurement.

The hidden state of an episode is a batch of images that never changes. At
each step an action is measured, the encoder folds the measurement into its
hidden state and the decoder produces a new reconstruction. The reward for
the step is the SSIM gain over the previous reconstruction.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import metrics, models
from .errors import EpisodeError, NonFiniteError, ShapeError

REWARD_MODES = ("per_step", "final_only")
ACTION_MODES = ("sample", "mean")
TRAJECTORY_COLUMNS = ["episode_id", "t", "reward", "ssim", "action_summary"]


@dataclass(frozen=True)
class EpisodeState:
    x: np.ndarray
    hidden: list
    t: int
    horizon: int
    last_quality: np.ndarray
    policy_input: dc.Array

    @property
    def batch(self):
        return self.x.shape[0]

    @property
    def done(self):
        return self.t >= self.horizon


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    latent: object
    reconstruction: dc.Array
    quality: np.ndarray
    reward: np.ndarray
    state: EpisodeState


@dataclass
class Trajectory:
    """Per-step records of a batch of episodes; every list has one entry per step."""

    actions: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    latents: list = field(default_factory=list)
    reconstructions: list = field(default_factory=list)
    qualities: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    policy_inputs: list = field(default_factory=list)
    rewards: np.ndarray = None

    @property
    def horizon(self):
        return len(self.actions)

    @property
    def batch(self):
        return self.actions[0].shape[0]

    def quality_matrix(self):
        """(B, T) SSIM of each reconstruction against its image."""
        return np.stack(self.qualities, axis=1)

    def log_prob_matrix(self):
        if not self.log_probs or any(lp is None for lp in self.log_probs):
            raise EpisodeError("Trajectory has no action log-probabilities")
        return dc.concat([dc.reshape(lp, (self.batch, 1)) for lp in self.log_probs], axis=1)

    def value_matrix(self):
        if not self.values or any(v is None for v in self.values):
            raise EpisodeError("Trajectory has no value estimates")
        return dc.concat([dc.reshape(v, (self.batch, 1)) for v in self.values], axis=1)

    def action_tensor(self):
        """(B, T, action_dim) array of the actions taken."""
        return np.stack(self.actions, axis=1)


def reset(x, encoder, horizon):
    """Start a batch of episodes on images ``x`` of shape (B, h, w)."""
    x = np.array(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"Expected a batch of images (B, h, w), got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise EpisodeError("Image pixels must lie in [0, 1]")
    if horizon < 1:
        raise EpisodeError(f"Episodes need at least one step, got horizon {horizon}")
    x.flags.writeable = False
    batch = x.shape[0]
    return EpisodeState(
        x=x,
        hidden=encoder.initial_state(batch),
        t=0,
        horizon=horizon,
        last_quality=np.zeros(batch),
        policy_input=models.initial_policy_input(
            batch, encoder.latent, encoder.variational, encoder.dtype
        ),
    )


def decoding_latent(latent, rng=None, sample_latent=False):
    """The latent handed to the decoder: z itself, a belief sample, or its mean."""
    if not isinstance(latent, models.Belief):
        return latent
    if sample_latent:
        return models.reparam_sample(latent, rng)
    return latent.mean


def step(state, actions, encoder, decoder, operator, tape=None, rng=None, sample_latent=False):
    if state.done:
        raise EpisodeError(f"Episode is exhausted after {state.horizon} steps")
    actions = operator.check(actions, state.x)
    observation = operator.measure(actions, state.x)
    inputs = operator.encoder_inputs(actions, observation)
    latent, hidden = encoder.encode_step(inputs, state.hidden, tape)
    reconstruction = decoder.decode(decoding_latent(latent, rng, sample_latent), tape)
    quality = metrics.ssim_batch(reconstruction.value, state.x)
    reward = quality - state.last_quality
    new_state = EpisodeState(
        x=state.x,
        hidden=hidden,
        t=state.t + 1,
        horizon=state.horizon,
        last_quality=quality,
        policy_input=models.policy_input(latent),
    )
    return StepResult(observation, latent, reconstruction, quality, reward, new_state)


def rollout(
    networks,
    operator,
    x,
    horizon,
    rng,
    reward_mode="per_step",
    action_mode="sample",
    tape=None,
    sample_latent=False,
    random_policy=False,
):
    """Run B episodes for ``horizon`` steps and collect the Trajectory.

    Actions come from ``networks.policy`` unless it is absent or
    ``random_policy`` is set, in which case they are drawn at random and carry
    no log-probabilities. Policy, value and reconstruction nodes go on
    ``tape`` when one is given.
    """
    if reward_mode not in REWARD_MODES:
        raise EpisodeError(f"Unknown reward mode: {reward_mode}")
    if action_mode not in ACTION_MODES:
        raise EpisodeError(f"Unknown action mode: {action_mode}")
    state = reset(x, networks.encoder, horizon)
    use_policy = networks.policy is not None and not random_policy
    trajectory = Trajectory()

    while not state.done:
        policy_input = state.policy_input
        log_prob = value = None
        if use_policy:
            actions, log_prob = models.sample_action(
                networks.policy(policy_input, tape), action_mode, rng
            )
            if networks.value is not None:
                value = networks.value(policy_input, tape)
        else:
            actions = models.random_action(operator, rng, state.batch)

        result = step(
            state, actions, networks.encoder, networks.decoder, operator,
            tape=tape, rng=rng, sample_latent=sample_latent,
        )
        trajectory.actions.append(np.asarray(actions))
        trajectory.observations.append(result.observation)
        trajectory.latents.append(result.latent)
        trajectory.reconstructions.append(result.reconstruction)
        trajectory.qualities.append(result.quality)
        trajectory.log_probs.append(log_prob)
        trajectory.values.append(value)
        trajectory.policy_inputs.append(policy_input)
        state = result.state

    qualities = trajectory.quality_matrix()
    if reward_mode == "per_step":
        rewards = np.diff(qualities, axis=1, prepend=0.0)
    else:
        rewards = np.zeros_like(qualities)
        rewards[:, -1] = qualities[:, -1]
    if not np.all(np.isfinite(rewards)):
        raise NonFiniteError("Rollout produced non-finite rewards")
    trajectory.rewards = rewards
    logging.debug(
        "Rolled out %d episodes of %d steps, final SSIM %.4f",
        state.batch, horizon, qualities[:, -1].mean(),
    )
    return trajectory


def write_trajectory(path, trajectory, operator, first_episode_id=0, actions_path=None):
    """Dump one CSV row per (episode, step); optionally save full actions as .npy."""
    summaries = np.stack(
        [operator.summarize_action(a) for a in trajectory.actions], axis=1
    )
    qualities = trajectory.quality_matrix()
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for b in range(trajectory.batch):
            for t in range(trajectory.horizon):
                writer.writerow(
                    {
                        "episode_id": first_episode_id + b,
                        "t": t + 1,
                        "reward": repr(float(trajectory.rewards[b, t])),
                        "ssim": repr(float(qualities[b, t])),
                        "action_summary": repr(float(summaries[b, t])),
                    }
                )
    if actions_path:
        np.save(actions_path, trajectory.action_tensor())
    logging.info("Wrote trajectory of %d episodes to %s", trajectory.batch, path)
