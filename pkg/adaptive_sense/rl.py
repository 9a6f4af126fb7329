"""Policy-gradient losses over batches of collected trajectories.

Arrays of per-step quantities are laid out (B, T): one row per episode. The
surrogate losses are normalized by the number of episodes B, so that the
gradient of ``vpg_loss`` is the negated batch policy-gradient estimate.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DomainError, EpisodeError, ShapeError


@dataclass(frozen=True)
class ReturnsTable:
    rewards_to_go: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray


def reward_to_go(rewards, gamma):
    """Discounted suffix sums along the last axis."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"Discount factor must lie in [0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim == 0 or rewards.shape[-1] < 1:
        raise EpisodeError("Need at least one reward")
    out = np.empty_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in reversed(range(rewards.shape[-1])):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out


def advantages(rtg, values, normalize=False):
    rtg = np.asarray(rtg, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rtg.shape != values.shape:
        raise ShapeError(f"Rewards-to-go {rtg.shape} and values {values.shape} differ")
    adv = rtg - values
    if normalize:
        adv = adv - adv.mean()
        std = adv.std()
        if std > 0:
            adv = adv / std
    return adv


def returns_table(rewards, values, gamma, normalize=False):
    rtg = reward_to_go(rewards, gamma)
    return ReturnsTable(
        rewards_to_go=rtg,
        advantages=advantages(rtg, values, normalize),
        value_targets=rtg,
    )


def _check(log_probs, adv, what):
    if log_probs is None:
        raise EpisodeError(f"{what} needs action log-probabilities")
    adv = np.asarray(adv)
    if log_probs.shape != adv.shape or log_probs.ndim != 2:
        raise ShapeError(
            f"{what}: log-probabilities {log_probs.shape} and advantages {adv.shape} "
            "must both be (B, T)"
        )
    return adv.astype(log_probs.dtype)


def vpg_loss(log_probs, adv):
    """-(1/B) sum_b sum_t log pi(a_t) * A_t, with A held constant."""
    adv = _check(log_probs, adv, "vpg_loss")
    return -dc.sum_(log_probs * dc.constant(adv)) / float(adv.shape[0])


def value_loss(values, rtg):
    rtg = np.asarray(rtg)
    if values.shape != rtg.shape:
        raise ShapeError(f"Values {values.shape} and targets {rtg.shape} differ")
    return dc.mean(dc.square(values - dc.constant(rtg.astype(values.dtype))))


def ppo_loss(log_probs, old_log_probs, adv, clip_eps, reduction="batch"):
    """Clipped surrogate with ratio exp(log_probs - old_log_probs).

    ``reduction="batch"`` divides by B like vpg_loss; ``"mean"`` averages
    over all B * T steps.
    """
    adv = _check(log_probs, adv, "ppo_loss")
    if old_log_probs is None:
        raise EpisodeError("ppo_loss needs the log-probabilities recorded at collection")
    if clip_eps <= 0:
        raise DomainError(f"PPO clip range must be positive, got {clip_eps}")
    old = np.asarray(old_log_probs.value if isinstance(old_log_probs, dc.Array) else old_log_probs)
    if old.shape != adv.shape:
        raise ShapeError(f"Old log-probabilities {old.shape} do not match {adv.shape}")
    ratio = dc.exp(log_probs - dc.constant(old.astype(log_probs.dtype)))
    adv_c = dc.constant(adv)
    surrogate = dc.minimum(ratio * adv_c, dc.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv_c)
    if reduction == "batch":
        return -dc.sum_(surrogate) / float(adv.shape[0])
    if reduction == "mean":
        return -dc.mean(surrogate)
    raise DomainError(f"Unknown reduction: {reduction}")
