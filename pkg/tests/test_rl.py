import numpy as np
import pytest

from adaptive_sense import diffcore as dc
from adaptive_sense import models, rl
from adaptive_sense.errors import DomainError, EpisodeError, ShapeError


def _brute_force_rtg(rewards, gamma):
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        for k in range(t, T):
            out[t] += gamma ** (k - t) * rewards[k]
    return out


@pytest.mark.parametrize(
    "rewards,gamma,expected",
    [
        pytest.param([1, 1, 1], 0.5, [1.75, 1.5, 1.0], id="half"),
        pytest.param([0.3, -0.2, 0.9], 0.0, [0.3, -0.2, 0.9], id="greedy"),
        pytest.param([1, 2, 3], 1.0, [6, 5, 3], id="suffix-sums"),
    ],
)
def test_reward_to_go_examples(rewards, gamma, expected):
    np.testing.assert_allclose(rl.reward_to_go(rewards, gamma), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.9, 1.0])
@pytest.mark.parametrize("T", [1, 7, 64])
def test_reward_to_go_matches_brute_force(gamma, T):
    rewards = np.random.default_rng(T).normal(size=T)
    np.testing.assert_allclose(
        rl.reward_to_go(rewards, gamma), _brute_force_rtg(rewards, gamma), rtol=0, atol=1e-12
    )


def test_reward_to_go_batched_rows():
    rewards = np.random.default_rng(1).normal(size=(3, 5))
    out = rl.reward_to_go(rewards, 0.9)
    for row, expected in zip(out, rewards):
        np.testing.assert_allclose(row, _brute_force_rtg(expected, 0.9), atol=1e-12)


@pytest.mark.parametrize("gamma", [-0.1, 1.01])
def test_reward_to_go_rejects_gamma(gamma):
    with pytest.raises(DomainError):
        rl.reward_to_go([1.0], gamma)


def test_reward_to_go_rejects_empty():
    with pytest.raises(EpisodeError):
        rl.reward_to_go([], 0.5)


def test_advantages_examples():
    rtg = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(rl.advantages(rtg, rtg), np.zeros((2, 2)))
    np.testing.assert_array_equal(rl.advantages(rtg, np.zeros((2, 2))), rtg)


def test_advantages_normalized():
    rng = np.random.default_rng(2)
    adv = rl.advantages(rng.normal(3.0, 2.0, size=(8, 5)), rng.normal(size=(8, 5)), normalize=True)
    assert adv.mean() == pytest.approx(0.0, abs=1e-9)
    assert adv.std() == pytest.approx(1.0, abs=1e-9)


def test_advantages_length_mismatch():
    with pytest.raises(ShapeError):
        rl.advantages(np.zeros(3), np.zeros(4))


def test_returns_table():
    table = rl.returns_table([[1.0, 1.0, 1.0]], [[0.5, 0.5, 0.5]], 0.5)
    np.testing.assert_allclose(table.rewards_to_go, [[1.75, 1.5, 1.0]])
    np.testing.assert_allclose(table.advantages, [[1.25, 1.0, 0.5]])
    np.testing.assert_array_equal(table.value_targets, table.rewards_to_go)


def _policy_log_probs(mu, sigma, actions, tape):
    """(B, 1) log-densities of a 1-D Gaussian policy with parameter ``mu``."""
    n = actions.shape[0]
    mean = tape.watch(mu) + np.zeros((n, 1))
    dist = models.GaussianDistribution(mean, dc.constant(np.full((n, 1), sigma)))
    return dc.reshape(dist.log_prob(actions), (n, 1))


def _vpg_gradient(mu, sigma, actions, adv):
    tape = dc.Tape()
    mu.zero_grad()
    loss = rl.vpg_loss(_policy_log_probs(mu, sigma, actions, tape), adv)
    return -tape.backward(loss)["mu"]


def test_vpg_zero_advantages_give_zero_gradient():
    mu = dc.Parameter("mu", np.array([0.2]))
    actions = np.random.default_rng(3).normal(size=(10, 1))
    np.testing.assert_array_equal(_vpg_gradient(mu, 1.0, actions, np.zeros((10, 1))), [0.0])


def test_vpg_gradient_scales_with_advantages():
    rng = np.random.default_rng(4)
    mu = dc.Parameter("mu", np.array([0.2]))
    actions = rng.normal(size=(10, 1))
    adv = rng.normal(size=(10, 1))
    g1 = _vpg_gradient(mu, 0.7, actions, adv)
    g3 = _vpg_gradient(mu, 0.7, actions, 3.0 * adv)
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=0, atol=1e-10)


def test_vpg_is_unbiased_on_quadratic_bandit():
    n = 1_000_000
    target, sigma = 1.5, 0.8
    mu = dc.Parameter("mu", np.array([0.3]))
    rng = np.random.default_rng(5)
    actions = mu.value + sigma * rng.standard_normal((n, 1))
    rewards = -((actions - target) ** 2)

    estimate = _vpg_gradient(mu, sigma, actions, rewards)[0]
    analytic = -2.0 * (mu.value[0] - target)
    per_sample = (actions - mu.value) / sigma**2 * rewards
    stderr = per_sample.std() / np.sqrt(n)
    assert abs(estimate - analytic) < 4 * stderr


def test_vpg_baseline_shift_has_no_expected_effect():
    n = 1_000_000
    sigma, shift = 0.5, 2.0
    mu = dc.Parameter("mu", np.array([-0.4]))
    rng = np.random.default_rng(6)
    actions = mu.value + sigma * rng.standard_normal((n, 1))
    adv = rng.normal(size=(n, 1))
    delta = _vpg_gradient(mu, sigma, actions, adv + shift) - _vpg_gradient(mu, sigma, actions, adv)
    score = (actions - mu.value) / sigma**2
    assert abs(delta[0]) < 4 * shift * score.std() / np.sqrt(n)


def test_vpg_missing_log_probs():
    with pytest.raises(EpisodeError):
        rl.vpg_loss(None, np.zeros((1, 1)))


@pytest.mark.parametrize(
    "values,rtg,expected",
    [
        pytest.param([[1.0, 2.0]], [[1.0, 2.0]], 0.0, id="perfect"),
        pytest.param([[0.0]], [[2.0]], 4.0, id="single-step"),
    ],
)
def test_value_loss_examples(values, rtg, expected):
    assert rl.value_loss(dc.constant(np.array(values)), np.array(rtg)).item() == expected


def test_value_loss_matches_loop():
    rng = np.random.default_rng(7)
    values, rtg = rng.normal(size=(2, 4, 3))
    total = 0.0
    for b in range(4):
        for t in range(3):
            total += (values[b, t] - rtg[b, t]) ** 2
    assert rl.value_loss(dc.constant(values), rtg).item() == pytest.approx(total / 12, abs=1e-12)


def test_value_loss_length_mismatch():
    with pytest.raises(ShapeError):
        rl.value_loss(dc.constant(np.zeros((2, 3))), np.zeros((2, 4)))


def test_ppo_at_collection_point_is_minus_mean_advantage():
    adv = np.random.default_rng(8).normal(size=(4, 3))
    log_probs = dc.constant(np.random.default_rng(9).normal(size=(4, 3)))
    loss = rl.ppo_loss(log_probs, log_probs.value, adv, 0.2, reduction="mean")
    assert loss.item() == pytest.approx(-adv.mean(), abs=1e-12)


def test_ppo_hand_case():
    loss = rl.ppo_loss(
        dc.constant(np.array([[np.log(1.5)]])), np.zeros((1, 1)), np.ones((1, 1)), 0.2
    )
    assert loss.item() == pytest.approx(-1.2, abs=1e-12)


def test_ppo_clipped_branch_has_no_gradient():
    p = dc.Parameter("logp", np.array([[np.log(1.5)]]))
    tape = dc.Tape()
    grads = tape.backward(rl.ppo_loss(tape.watch(p), np.zeros((1, 1)), np.ones((1, 1)), 0.2))
    np.testing.assert_array_equal(grads["logp"], [[0.0]])


def test_ppo_without_clipping_matches_vpg_gradient():
    rng = np.random.default_rng(10)
    mu = dc.Parameter("mu", np.array([0.1]))
    actions = rng.normal(size=(6, 1))
    adv = rng.normal(size=(6, 1))

    tape = dc.Tape()
    log_probs = _policy_log_probs(mu, 0.9, actions, tape)
    ppo_grad = tape.backward(rl.ppo_loss(log_probs, log_probs.value, adv, 1e9))["mu"]

    np.testing.assert_allclose(-ppo_grad, _vpg_gradient(mu, 0.9, actions, adv), rtol=0, atol=1e-10)


@pytest.mark.parametrize(
    "kwargs,error",
    [
        pytest.param({"old_log_probs": None}, EpisodeError, id="missing-old"),
        pytest.param({"clip_eps": 0.0}, DomainError, id="zero-clip"),
        pytest.param({"reduction": "sum"}, DomainError, id="reduction"),
    ],
)
def test_ppo_errors(kwargs, error):
    args = {
        "log_probs": dc.constant(np.zeros((1, 2))),
        "old_log_probs": np.zeros((1, 2)),
        "adv": np.ones((1, 2)),
        "clip_eps": 0.2,
    }
    args.update(kwargs)
    with pytest.raises(error):
        rl.ppo_loss(**args)
