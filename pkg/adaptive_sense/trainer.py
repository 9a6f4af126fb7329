"""Training strategies for the acquisition models.

Strategy names combine a model family with a training mode:

  AE-*   deterministic latent, reconstruction loss is the MSE
  VAE-*  belief over the latent, reconstruction loss is the negated ELBO

  *-R    random acquisition; only the reconstruction model is trained
  *-P    reconstruction pre-trained with random acquisition, then frozen
         while the policy is trained
  *-E2E  policy and reconstruction are trained together from scratch

Each batch is rolled out once under the current parameters and used for
one reconstruction update and one policy update (or ``ppo_epochs`` updates
with PPO). The policy and value networks only see detached latents, so the
policy loss never reaches the encoder.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint, diffcore as dc, environment, metrics, models, rl, sensing, utils
from .errors import CheckpointError, ConfigError, DomainError, EpisodeError, ShapeError
from .results import metrics_rows

STRATEGIES = ("AE-R", "AE-P", "AE-E2E", "VAE-R", "VAE-P", "VAE-E2E")
ALGORITHMS = ("VPG", "PPO")
DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str
    operator: str
    T: int
    gamma: float = 0.9
    beta: float = 1.0
    epochs: int = 100
    batch: int = 128
    lr_recon: float = 1e-3
    lr_policy: float = 1e-4
    lr_value: float = 1e-3
    reward_mode: str = "per_step"
    algorithm: str = "VPG"
    seed: int = 0
    ppo_clip: float = 0.2
    ppo_epochs: int = 4
    normalize_advantages: bool = False
    pretrain_epochs: int = None
    stop_prior_gradient: bool = True
    checkpoint_every: int = 10
    dtype: str = "float64"

    def __post_init__(self):
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"unknown strategy {self.strategy!r}")
        if self.algorithm not in ALGORITHMS:
            problems.append(f"unknown algorithm {self.algorithm!r}")
        if self.reward_mode not in environment.REWARD_MODES:
            problems.append(f"unknown reward mode {self.reward_mode!r}")
        if self.dtype not in DTYPES:
            problems.append(f"unsupported dtype {self.dtype!r}")
        if self.T < 1:
            problems.append(f"T must be at least 1, got {self.T}")
        if self.beta < 0:
            problems.append(f"beta must not be negative, got {self.beta}")
        if not 0 <= self.gamma <= 1:
            problems.append(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.epochs < 0 or self.batch < 1:
            problems.append("epochs must be >= 0 and batch >= 1")
        if problems:
            raise ConfigError("Invalid training configuration: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown training keys: {', '.join(unknown)}")
        missing = [k for k in ("strategy", "operator", "T") if k not in data]
        if missing:
            raise ConfigError(f"Missing required training keys: {', '.join(missing)}")
        return cls(**data)

    def as_dict(self):
        return asdict(self)

    @property
    def variational(self):
        return self.strategy.startswith("VAE")

    @property
    def mode(self):
        return self.strategy.split("-", 1)[1]

    @property
    def trains_policy(self):
        return self.mode in ("P", "E2E")

    @property
    def trains_reconstruction(self):
        return self.mode in ("R", "E2E")

    @property
    def needs_pretraining(self):
        return self.mode == "P"

    @property
    def numpy_dtype(self):
        return np.dtype(self.dtype)


def recon_loss(trajectory, x):
    """(1/T) sum_t of the per-pixel MSE between x and each reconstruction."""
    reconstructions = getattr(trajectory, "reconstructions", trajectory)
    if not reconstructions:
        raise EpisodeError("Reconstruction loss needs a complete trajectory")
    x = dc.constant(np.asarray(x, dtype=reconstructions[0].dtype))
    total = dc.constant(np.zeros((), dtype=x.dtype))
    for recon in reconstructions:
        if recon.shape != x.shape:
            raise ShapeError(f"Reconstruction {recon.shape} does not match images {x.shape}")
        total = total + dc.mean(dc.square(x - recon))
    return total / float(len(reconstructions))


def kl_diag_gaussian(q_mean, q_std, p_mean, p_std):
    """KL(q || p) of diagonal Gaussians, summed over the last axis."""
    q_mean, q_std, p_mean, p_std = (
        v if isinstance(v, dc.Array) else dc.constant(v) for v in (q_mean, q_std, p_mean, p_std)
    )
    if np.any(q_std.value <= 0) or np.any(p_std.value <= 0):
        raise DomainError("Standard deviations must be positive")
    ratio = dc.square(q_std / p_std)
    per_dim = (ratio + dc.square((q_mean - p_mean) / p_std) - 1.0 - dc.log(ratio)) * 0.5
    return dc.sum_(per_dim, axis=-1)


def elbo_loss(trajectory, x, beta, stop_prior_grad=True):
    """Negated ELBO, averaged over the batch.

    sum_t [ 1/2 ||x - x_t||^2 + beta * KL(q_t || prior_t) ], where x_t is
    decoded from a sample of belief q_t, prior_1 is N(0, I) and prior_t is
    q_{t-1} for t > 1. Constant terms of the likelihood are dropped.
    """
    beliefs = trajectory.latents
    if not beliefs or not all(isinstance(b, models.Belief) for b in beliefs):
        raise EpisodeError("ELBO needs a trajectory of beliefs")
    x = np.asarray(x)
    batch = x.shape[0]
    target = dc.constant(x.reshape(batch, -1).astype(beliefs[0].mean.dtype))
    prior = models.prior_belief(batch, beliefs[0].mean.shape[-1], beliefs[0].mean.dtype)
    total = dc.constant(np.zeros(batch, dtype=target.dtype))
    for belief, recon in zip(beliefs, trajectory.reconstructions):
        residual = target - dc.reshape(recon, (batch, -1))
        nll = dc.sum_(dc.square(residual), axis=-1) * 0.5
        kl = kl_diag_gaussian(belief.mean, belief.std, prior.mean, prior.std)
        total = total + nll + kl * float(beta)
        prior = belief.detach() if stop_prior_grad else belief
    return dc.mean(total)


@dataclass
class AdamState:
    m: dict
    v: dict
    steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def optimizer_step(params, grads, lr, state):
    """One Adam update of name -> array ``params``; returns the new arrays."""
    state.steps += 1
    b1, b2 = state.beta1, state.beta2
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} does not match {value.shape}")
        m = b1 * state.m[name] + (1 - b1) * grad
        v = b2 * state.v[name] + (1 - b2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1**state.steps)
        v_hat = v / (1 - b2**state.steps)
        updated[name] = (value - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
    return updated


class Adam:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros_like({p.name: p.value for p in self.params})

    def step(self):
        updated = optimizer_step(
            {p.name: p.value for p in self.params},
            {p.name: p.grad for p in self.params},
            self.lr,
            self.state,
        )
        for p in self.params:
            p.value = updated[p.name]

    def state_arrays(self, prefix):
        out = {}
        for name in sorted(self.state.m):
            out[f"{prefix}/m/{name}"] = self.state.m[name]
            out[f"{prefix}/v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, prefix, arrays, steps):
        for p in self.params:
            try:
                self.state.m[p.name] = np.array(arrays[f"{prefix}/m/{p.name}"])
                self.state.v[p.name] = np.array(arrays[f"{prefix}/v/{p.name}"])
            except KeyError as exc:
                raise CheckpointError(f"Checkpoint lacks optimizer state {exc}")
        self.state.steps = steps


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    recon_loss: float
    policy_loss: float
    final_ssim: metrics.MetricReport
    final_mse: float
    reward_sum: float


@dataclass(frozen=True)
class EvalResult:
    """Per-step reports over an evaluation set (index t-1 for step t)."""

    ssim: list
    mse: list
    reward_sum: metrics.MetricReport

    @property
    def final(self):
        return self.ssim[-1]


class Trainer:
    def __init__(self, config, model_config, operator, datasets):
        self.config = config
        self.model_config = model_config
        self.operator = operator
        self.datasets = datasets
        self.rng = np.random.default_rng(config.seed)
        self.models = models.build_models(
            operator,
            model_config,
            config.variational,
            config.trains_policy,
            self.rng,
            config.numpy_dtype,
        )
        self.optimizers = {
            "recon": Adam(
                self.models.encoder.parameters() + self.models.decoder.parameters(),
                config.lr_recon,
            )
        }
        if self.models.policy is not None:
            self.optimizers["policy"] = Adam(self.models.policy.parameters(), config.lr_policy)
            self.optimizers["value"] = Adam(self.models.value.parameters(), config.lr_value)
        self.epoch = 0
        self.pretrained = not config.needs_pretraining

    def _images(self, split):
        try:
            return self.datasets[split].images
        except KeyError:
            raise ConfigError(f"No {split} split available")

    def _zero_grad(self):
        for module in self.models.all_modules():
            module.zero_grad()

    def train_batch(self, x, update_policy=None, update_recon=None, random_policy=False):
        """Roll out one batch and apply the configured updates.

        Returns (recon loss, policy loss, trajectory) with the losses
        evaluated before the update.
        """
        cfg = self.config
        if update_policy is None:
            update_policy = cfg.trains_policy and self.pretrained
        if update_recon is None:
            update_recon = cfg.trains_reconstruction
        random_policy = random_policy or self.models.policy is None
        update_policy = update_policy and not random_policy

        self._zero_grad()
        tape = dc.Tape()
        trajectory = environment.rollout(
            self.models,
            self.operator,
            x,
            cfg.T,
            self.rng,
            reward_mode=cfg.reward_mode,
            action_mode="sample",
            tape=tape,
            sample_latent=cfg.variational,
            random_policy=random_policy,
        )

        terms = []
        if cfg.variational:
            loss_r = elbo_loss(trajectory, x, cfg.beta, cfg.stop_prior_gradient)
        else:
            loss_r = recon_loss(trajectory, x)
        if update_recon:
            terms.append(loss_r)

        loss_p = None
        table = None
        if update_policy:
            values = trajectory.value_matrix()
            table = rl.returns_table(
                trajectory.rewards, values.value, cfg.gamma, cfg.normalize_advantages
            )
            if cfg.algorithm == "VPG":
                loss_p = rl.vpg_loss(trajectory.log_prob_matrix(), table.advantages)
                terms.extend([loss_p, rl.value_loss(values, table.value_targets)])

        if terms:
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            if total.tape is tape:
                tape.backward(total)
        if update_recon:
            self.optimizers["recon"].step()
        if update_policy and cfg.algorithm == "VPG":
            self.optimizers["policy"].step()
            self.optimizers["value"].step()
        if update_policy and cfg.algorithm == "PPO":
            loss_p = self._ppo_updates(trajectory, table)

        return (
            loss_r.item(),
            None if loss_p is None else loss_p.item(),
            trajectory,
        )

    def _ppo_updates(self, trajectory, table):
        old = trajectory.log_prob_matrix().value
        first_loss = None
        for _ in range(self.config.ppo_epochs):
            for module in self.models.policy_modules():
                module.zero_grad()
            tape = dc.Tape()
            log_probs, values = [], []
            for policy_input, actions in zip(trajectory.policy_inputs, trajectory.actions):
                dist = self.models.policy(policy_input, tape)
                log_probs.append(dc.reshape(dist.log_prob(actions), (len(actions), 1)))
                values.append(dc.reshape(self.models.value(policy_input, tape), (len(actions), 1)))
            loss = rl.ppo_loss(
                dc.concat(log_probs, axis=1), old, table.advantages, self.config.ppo_clip
            )
            tape.backward(loss + rl.value_loss(dc.concat(values, axis=1), table.value_targets))
            self.optimizers["policy"].step()
            self.optimizers["value"].step()
            if first_loss is None:
                first_loss = loss
        return first_loss

    def _check_models(self):
        if self.config.trains_policy and self.models.policy is None:
            raise ConfigError(f"Strategy {self.config.strategy} needs a policy network")
        if not self.config.trains_policy and self.models.policy is not None:
            raise ConfigError(f"Strategy {self.config.strategy} does not use a policy network")

    def _run_epoch(self, images, **kwargs):
        order = self.rng.permutation(len(images))
        recon, policy, finals, mses, rewards = [], [], [], [], []
        for start in range(0, len(images), self.config.batch):
            x = images[order[start:start + self.config.batch]]
            loss_r, loss_p, trajectory = self.train_batch(x, **kwargs)
            recon.append(loss_r * len(x))
            if loss_p is not None:
                policy.append(loss_p * len(x))
            finals.extend(trajectory.qualities[-1])
            mses.extend(metrics.mse_batch(trajectory.reconstructions[-1].value, x))
            rewards.extend(trajectory.rewards.sum(axis=1))
        n = len(images)
        return EpochStats(
            epoch=self.epoch,
            recon_loss=float(np.sum(recon) / n),
            policy_loss=float(np.sum(policy) / n) if policy else float("nan"),
            final_ssim=metrics.report(finals),
            final_mse=float(np.mean(mses)),
            reward_sum=float(np.mean(rewards)),
        )

    def pretrain(self):
        """Train the reconstruction model with random acquisition, then freeze it."""
        epochs = self.config.pretrain_epochs
        if epochs is None:
            epochs = self.config.epochs
        images = self._images("train")
        for i in range(epochs):
            stats = self._run_epoch(
                images, update_policy=False, update_recon=True, random_policy=True
            )
            logging.info(
                "Pre-training epoch %d/%d: recon loss %.5f, final SSIM %.4f",
                i + 1, epochs, stats.recon_loss, stats.final_ssim.mean,
            )
        self.pretrained = True

    def train_epoch(self):
        self._check_models()
        if not self.pretrained:
            raise ConfigError(
                f"Strategy {self.config.strategy} needs pre-training before policy training"
            )
        images = self._images("train")
        self.epoch += 1
        stats = self._run_epoch(images)
        logging.info(
            "Epoch %d/%d: recon loss %.5f, policy loss %.5f, final SSIM %.4f",
            self.epoch, self.config.epochs, stats.recon_loss, stats.policy_loss,
            stats.final_ssim.mean,
        )
        return stats

    def _evaluate_chunk(self, images, index, action_mode):
        rng = np.random.default_rng([self.config.seed, self.epoch, index])
        trajectory = environment.rollout(
            self.models,
            self.operator,
            images,
            self.config.T,
            rng,
            reward_mode=self.config.reward_mode,
            action_mode=action_mode,
        )
        mse = np.stack(
            [metrics.mse_batch(r.value, images) for r in trajectory.reconstructions], axis=1
        )
        return trajectory.quality_matrix(), mse, trajectory.rewards.sum(axis=1)

    def evaluate(self, split="val", action_mode="mean", threads=None):
        """Per-step SSIM/MSE reports over a split.

        Images are processed in chunks of ``batch``; each chunk has its own
        random stream, so results do not depend on the number of threads.
        """
        images = self._images(split) if isinstance(split, str) else np.asarray(split)
        if len(images) == 0:
            raise ConfigError("Can not evaluate on an empty split")
        chunks = [
            (images[start:start + self.config.batch], i)
            for i, start in enumerate(range(0, len(images), self.config.batch))
        ]
        threads = threads or utils.thread_count()
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(
                    pool.map(lambda c: self._evaluate_chunk(c[0], c[1], action_mode), chunks)
                )
        else:
            results = [self._evaluate_chunk(c, i, action_mode) for c, i in chunks]
        quality = np.concatenate([r[0] for r in results])
        mse = np.concatenate([r[1] for r in results])
        rewards = np.concatenate([r[2] for r in results])
        return EvalResult(
            ssim=[metrics.report(quality[:, t]) for t in range(quality.shape[1])],
            mse=[metrics.report(mse[:, t]) for t in range(mse.shape[1])],
            reward_sum=metrics.report(rewards),
        )

    def fit(self, run=None):
        """Pre-train if needed, train the remaining epochs, evaluate on test.

        With a RunDirectory, metric rows and periodic checkpoints are written
        into it as training progresses.
        """
        self._check_models()
        if not self.pretrained:
            self.pretrain()
        history = []
        while self.epoch < self.config.epochs:
            stats = self.train_epoch()
            history.append(stats)
            val = self.evaluate("val") if "val" in self.datasets else None
            if run is not None:
                run.append_metrics(
                    metrics_rows(run.run_id, self.config, self.epoch, "train",
                                 final=(stats.final_ssim, stats.final_mse, stats.reward_sum))
                )
                if val is not None:
                    run.append_metrics(metrics_rows(run.run_id, self.config, self.epoch, "val",
                                                    result=val))
                every = self.config.checkpoint_every
                if self.epoch % every == 0 or self.epoch == self.config.epochs:
                    self.save_checkpoint(run.checkpoint_path(self.epoch))
        if self.config.epochs > 0 and "test" in self.datasets:
            test = self.evaluate("test")
            logging.info(
                "Test SSIM after %d steps: %.4f +- %.4f (worst %.4f)",
                self.config.T, test.final.mean, test.final.stderr, test.final.worst_case,
            )
            if run is not None:
                run.append_metrics(
                    metrics_rows(run.run_id, self.config, self.epoch, "test", result=test,
                                 per_step=True)
                )
        return history

    # Checkpoint state

    def state(self):
        arrays = {}
        for module in self.models.all_modules():
            for name, value in module.state_dict().items():
                arrays[f"param/{name}"] = value
        for group, opt in self.optimizers.items():
            arrays.update(opt.state_arrays(f"adam/{group}"))
        meta = {
            "config": self.config.as_dict(),
            "model": asdict(self.model_config),
            "operator": self.operator.kind,
            "image_shape": [self.operator.height, self.operator.width],
            "epoch": self.epoch,
            "pretrained": self.pretrained,
            "rng": self.rng.bit_generator.state,
            "adam_steps": {group: opt.state.steps for group, opt in self.optimizers.items()},
        }
        return arrays, meta

    def load_state(self, arrays, meta):
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        try:
            for module in self.models.all_modules():
                module.load_state_dict(params)
        except ShapeError as exc:
            raise CheckpointError(f"Checkpoint does not fit the model: {exc}")
        for group, opt in self.optimizers.items():
            opt.load_state_arrays(f"adam/{group}", arrays, meta["adam_steps"][group])
        self.epoch = meta["epoch"]
        self.pretrained = meta["pretrained"]
        self.rng.bit_generator.state = meta["rng"]

    def save_checkpoint(self, path):
        arrays, meta = self.state()
        checkpoint.save(path, arrays, meta)
        logging.info("Saved checkpoint for epoch %d to %s", self.epoch, path)

    @classmethod
    def from_checkpoint(cls, path, datasets, operator=None):
        arrays, meta = checkpoint.load(path)
        try:
            config = TrainConfig(**meta["config"])
            model_config = models.ModelConfig.from_dict(meta["model"])
            if operator is None:
                operator = sensing.create(meta["operator"], *meta["image_shape"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"Checkpoint {path} has incomplete metadata: {exc}")
        trainer = cls(config, model_config, operator, datasets)
        trainer.load_state(arrays, meta)
        return trainer
