"""The networks: recurrent encoder, decoder, policy heads and value baseline.

Every network is a diffcore.Module. Calling one with ``tape=None`` runs it
without recording anything, which is how evaluation rollouts use them.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import DomainError, SamplerError, ShapeError, UnsupportedError
from .sensing import wrap_angle

SIGMA_MIN = 1e-4
KAPPA_MIN = 1e-2
LOG_2PI = float(np.log(2 * np.pi))
MAX_SAMPLER_ROUNDS = 1000


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    latent: int = 128
    gru_layers: int = 1
    decoder_channels: tuple = (128, 64)
    policy_hidden: int = 256
    value_hidden: int = 256

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "decoder_channels" in data:
            data["decoder_channels"] = tuple(data["decoder_channels"])
        return cls(**data)


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


class Dense(dc.Module):
    def __init__(self, name, in_dim, out_dim, rng, dtype=np.float64):
        super().__init__(name)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self.add_parameter(
            "weight", he_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        )
        self.bias = self.add_parameter("bias", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x, tape):
        p = self.bind(tape)
        return dc.dense(x, p["weight"], p["bias"])


class ConvTranspose(dc.Module):
    """Stride-2 transposed convolution, kernel 4, padding 1: doubles H and W."""

    KERNEL = 4

    def __init__(self, name, c_in, c_out, rng, dtype=np.float64):
        super().__init__(name)
        fan_in = c_in * self.KERNEL * self.KERNEL
        self.kernel = self.add_parameter(
            "kernel", he_uniform(rng, (c_in, c_out, self.KERNEL, self.KERNEL), fan_in, dtype)
        )
        self.bias = self.add_parameter("bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x, tape):
        p = self.bind(tape)
        return dc.conv_transpose2d(x, p["kernel"], stride=2, padding=1, bias=p["bias"])


class MLP(dc.Module):
    """One hidden ReLU layer."""

    def __init__(self, name, in_dim, hidden, out_dim, rng, dtype=np.float64):
        super().__init__(name)
        self.hidden = self.add_module(Dense(f"{name}.hidden", in_dim, hidden, rng, dtype))
        self.out = self.add_module(Dense(f"{name}.out", hidden, out_dim, rng, dtype))

    def __call__(self, x, tape):
        return self.out(dc.relu(self.hidden(x, tape)), tape)


class GRULayer(dc.Module):
    def __init__(self, name, in_dim, hidden, rng, dtype=np.float64):
        super().__init__(name)
        self.hidden = hidden
        self.add_parameter("w_ih", he_uniform(rng, (3 * hidden, in_dim), in_dim, dtype))
        self.add_parameter(
            "w_hh", np.concatenate([orthogonal(rng, hidden, dtype) for _ in range(3)])
        )
        self.add_parameter("b_ih", np.zeros(3 * hidden, dtype=dtype))
        self.add_parameter("b_hh", np.zeros(3 * hidden, dtype=dtype))

    def __call__(self, x, h, tape):
        p = self.bind(tape)
        return dc.gru_cell(x, h, p["w_ih"], p["w_hh"], p["b_ih"], p["b_hh"])


@dataclass(frozen=True)
class Belief:
    """Diagonal Gaussian over the latent: mean and strictly positive std."""

    mean: dc.Array
    std: dc.Array

    def as_input(self):
        return dc.concat([self.mean, self.std], axis=-1)

    def detach(self):
        return Belief(dc.detach(self.mean), dc.detach(self.std))


def prior_belief(batch, latent, dtype=np.float64):
    return Belief(
        dc.constant(np.zeros((batch, latent), dtype=dtype)),
        dc.constant(np.ones((batch, latent), dtype=dtype)),
    )


class Encoder(dc.Module):
    """Stacked GRU over (action, observation) rows plus a dense latent head.

    The variational encoder's head has twice the latent width and its output
    is split into the belief mean and a softplus-parameterized std.
    """

    def __init__(self, input_dim, config, variational, rng, dtype=np.float64):
        super().__init__("encoder")
        self.input_dim = input_dim
        self.hidden_size = config.hidden
        self.latent = config.latent
        self.variational = variational
        self.dtype = dtype
        self.layers = []
        in_dim = input_dim
        for i in range(config.gru_layers):
            self.layers.append(
                self.add_module(GRULayer(f"encoder.gru{i}", in_dim, config.hidden, rng, dtype))
            )
            in_dim = config.hidden
        out_dim = 2 * config.latent if variational else config.latent
        self.head = self.add_module(Dense("encoder.head", config.hidden, out_dim, rng, dtype))

    def initial_state(self, batch):
        return [np.zeros((batch, self.hidden_size), dtype=self.dtype) for _ in self.layers]

    def encode_step(self, inputs, hidden, tape=None):
        """Returns (latent or Belief, next hidden state list)."""
        if isinstance(inputs, np.ndarray):
            inputs = dc.constant(inputs.astype(self.dtype, copy=False))
        if inputs.shape[-1] != self.input_dim:
            raise ShapeError(
                f"Encoder expects {self.input_dim} input features, got {inputs.shape[-1]}"
            )
        if len(hidden) != len(self.layers):
            raise ShapeError(
                f"Encoder has {len(self.layers)} layers, got {len(hidden)} hidden states"
            )
        x = inputs
        new_hidden = []
        for layer, h in zip(self.layers, hidden):
            x = layer(x, h, tape)
            new_hidden.append(x)
        out = self.head(x, tape)
        if not self.variational:
            return out, new_hidden
        mean = out[..., :self.latent]
        std = dc.softplus(out[..., self.latent:]) + SIGMA_MIN
        return Belief(mean, std), new_hidden


class ConvTrunk(dc.Module):
    """Dense projection to a coarse feature map, then one ConvTranspose per
    entry of ``channels``; the last one emits ``out_channels`` maps.
    """

    def __init__(self, name, in_dim, height, width, out_channels, channels, rng,
                 dtype=np.float64):
        super().__init__(name)
        factor = 2 ** len(channels)
        if height % factor or width % factor:
            raise ShapeError(
                f"Image size {height}x{width} is not divisible by {factor} "
                f"({len(channels)} upsampling layers)"
            )
        self.height = height
        self.width = width
        self.out_channels = out_channels
        self.base = (channels[0], height // factor, width // factor)
        self.project = self.add_module(
            Dense(f"{name}.project", in_dim, int(np.prod(self.base)), rng, dtype)
        )
        widths = list(channels) + [out_channels]
        self.convs = [
            self.add_module(ConvTranspose(f"{name}.conv{i}", c_in, c_out, rng, dtype))
            for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, x, tape):
        batch = x.shape[0]
        out = dc.relu(dc.reshape(self.project(x, tape), (batch,) + self.base))
        for i, conv in enumerate(self.convs):
            out = conv(out, tape)
            if i < len(self.convs) - 1:
                out = dc.relu(out)
        return out


class Decoder(dc.Module):
    def __init__(self, height, width, config, rng, dtype=np.float64):
        super().__init__("decoder")
        self.latent = config.latent
        self.trunk = self.add_module(
            ConvTrunk("decoder.trunk", config.latent, height, width, 1,
                      config.decoder_channels, rng, dtype)
        )

    def decode(self, z, tape=None):
        if z.shape[-1] != self.latent:
            raise ShapeError(f"Decoder expects latent width {self.latent}, got {z.shape[-1]}")
        out = self.trunk(z, tape)
        return dc.sigmoid(dc.reshape(out, (z.shape[0], self.trunk.height, self.trunk.width)))

    __call__ = decode


class GaussianDistribution:
    def __init__(self, mean, std):
        self.mean = mean
        self.std = std

    def log_prob(self, actions):
        actions = np.asarray(actions)
        if actions.shape != self.mean.shape:
            raise ShapeError(f"Actions {actions.shape} do not match policy {self.mean.shape}")
        scaled = (dc.constant(actions.astype(self.mean.dtype)) - self.mean) / self.std
        per_dim = dc.square(scaled) * -0.5 - dc.log(self.std) - 0.5 * LOG_2PI
        return dc.sum_(per_dim, axis=-1)

    def sample(self, rng):
        eps = rng.standard_normal(self.mean.shape)
        return self.mean.value + self.std.value * eps

    def mode(self):
        return np.array(self.mean.value)


class VonMisesDistribution:
    def __init__(self, loc, concentration):
        self.loc = loc
        self.concentration = concentration

    def log_prob(self, actions):
        actions = np.asarray(actions)
        if actions.shape != self.loc.shape + (1,):
            raise ShapeError(f"Actions {actions.shape} do not match policy {self.loc.shape}")
        angle = dc.constant(actions[:, 0].astype(self.loc.dtype))
        kappa = self.concentration
        return kappa * dc.cos(angle - self.loc) - LOG_2PI - dc.log_i0(kappa)

    def sample(self, rng):
        return sample_von_mises(self.loc.value, self.concentration.value, rng)[:, None]

    def mode(self):
        return np.array(self.loc.value)[:, None]


def sample_von_mises(loc, kappa, rng, max_rounds=MAX_SAMPLER_ROUNDS):
    """Best-Fisher rejection sampler, vectorized over a batch of angles."""
    loc = np.asarray(loc, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    tau = 1.0 + np.sqrt(1.0 + 4.0 * kappa**2)
    rho = (tau - np.sqrt(2.0 * tau)) / (2.0 * kappa)
    r = (1.0 + rho**2) / (2.0 * rho)

    out = np.empty_like(loc)
    pending = np.ones(loc.shape, dtype=bool)
    for _ in range(max_rounds):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            break
        u1, u2, u3 = rng.uniform(size=(3, idx.size))
        z = np.cos(np.pi * u1)
        f = (1.0 + r[idx] * z) / (r[idx] + z)
        c = kappa[idx] * (r[idx] - f)
        with np.errstate(divide="ignore"):
            accept = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
        theta = loc[idx] + np.sign(u3 - 0.5) * np.arccos(np.clip(f, -1.0, 1.0))
        out[idx[accept]] = theta[accept]
        pending[idx[accept]] = False
    if pending.any():
        raise SamplerError(
            f"Von Mises sampler did not accept {pending.sum()} draws in {max_rounds} rounds"
        )
    return wrap_angle(out)


class GaussianPolicy(dc.Module):
    """Transposed-convolution policy with a mean channel and a std channel."""

    def __init__(self, in_dim, height, width, config, rng, dtype=np.float64):
        super().__init__("policy")
        self.in_dim = in_dim
        self.action_dim = height * width
        self.trunk = self.add_module(
            ConvTrunk("policy.trunk", in_dim, height, width, 2,
                      config.decoder_channels, rng, dtype)
        )
        # A zero input maps to the uniform measurement rather than a zero vector.
        self.trunk.convs[-1].bias.value[0] = 1.0

    def forward(self, inputs, tape=None):
        out = self.trunk(inputs, tape)
        batch = inputs.shape[0]
        mean = dc.reshape(out[:, 0], (batch, self.action_dim))
        std = dc.softplus(dc.reshape(out[:, 1], (batch, self.action_dim))) + SIGMA_MIN
        return GaussianDistribution(mean, std)

    __call__ = forward


def von_mises_from_outputs(out):
    """(B, 3) raw outputs (sin, cos, raw concentration) -> distribution."""
    loc = dc.atan2(out[:, 0], out[:, 1])
    concentration = dc.softplus(out[:, 2]) + KAPPA_MIN
    return VonMisesDistribution(loc, concentration)


class VonMisesPolicy(dc.Module):
    """MLP producing (sin, cos, raw concentration) of the next angle."""

    def __init__(self, in_dim, config, rng, dtype=np.float64):
        super().__init__("policy")
        self.in_dim = in_dim
        self.action_dim = 1
        self.mlp = self.add_module(MLP("policy.mlp", in_dim, config.policy_hidden, 3, rng, dtype))
        # The cos output starts at 1 so the mean angle is defined for a zero input.
        self.mlp.out.bias.value[1] = 1.0

    def forward(self, inputs, tape=None):
        return von_mises_from_outputs(self.mlp(inputs, tape))

    __call__ = forward


class ValueNetwork(dc.Module):
    def __init__(self, in_dim, config, rng, dtype=np.float64):
        super().__init__("value")
        self.in_dim = in_dim
        self.mlp = self.add_module(MLP("value.mlp", in_dim, config.value_hidden, 1, rng, dtype))

    def value(self, inputs, tape=None):
        if inputs.shape[-1] != self.in_dim:
            raise ShapeError(f"Value network expects {self.in_dim} features, got {inputs.shape[-1]}")
        out = self.mlp(inputs, tape)
        return dc.reshape(out, (inputs.shape[0],))

    __call__ = value


def sample_action(dist, mode, rng):
    """Returns (action array, log-density Array at that action)."""
    if mode == "sample":
        action = dist.sample(rng)
    elif mode == "mean":
        action = dist.mode()
    else:
        raise DomainError(f"Unknown action mode: {mode}")
    return action, dist.log_prob(action)


def random_action(operator, rng, batch=1):
    """Draw actions the way the random acquisition baseline does."""
    return operator.random_action(rng, batch)


def reparam_sample(belief, rng):
    eps = rng.standard_normal(belief.mean.shape).astype(belief.mean.dtype)
    return belief.mean + belief.std * eps


def policy_input(latent):
    """What the policy and value networks see: detached latent or (mean, std)."""
    if isinstance(latent, Belief):
        return dc.detach(latent.as_input())
    return dc.detach(latent)


def initial_policy_input(batch, latent, variational, dtype=np.float64):
    if variational:
        return policy_input(prior_belief(batch, latent, dtype))
    return dc.constant(np.zeros((batch, latent), dtype=dtype))


@dataclass
class Models:
    encoder: Encoder
    decoder: Decoder
    policy: object = None
    value: ValueNetwork = None
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def variational(self):
        return self.encoder.variational

    def reconstruction_modules(self):
        return [self.encoder, self.decoder]

    def policy_modules(self):
        return [m for m in (self.policy, self.value) if m is not None]

    def all_modules(self):
        return self.reconstruction_modules() + self.policy_modules()


def build_models(operator, config, variational, with_policy, rng, dtype=np.float64):
    encoder = Encoder(operator.input_dim, config, variational, rng, dtype)
    decoder = Decoder(operator.height, operator.width, config, rng, dtype)
    policy = value = None
    if with_policy:
        in_dim = 2 * config.latent if variational else config.latent
        if operator.policy_head == "gaussian":
            policy = GaussianPolicy(in_dim, operator.height, operator.width, config, rng, dtype)
        elif operator.policy_head == "von_mises":
            policy = VonMisesPolicy(in_dim, config, rng, dtype)
        else:
            raise UnsupportedError(
                f"No policy head for {operator.kind} operator ({operator.policy_head})"
            )
        if policy.action_dim != operator.action_dim:
            raise UnsupportedError(
                f"Policy emits {policy.action_dim} values, operator takes {operator.action_dim}"
            )
        value = ValueNetwork(in_dim, config, rng, dtype)
    models = Models(encoder, decoder, policy, value, config)
    logging.debug(
        "Built models with %d parameters",
        sum(p.value.size for m in models.all_modules() for p in m.parameters()),
    )
    return models
