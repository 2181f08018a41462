"""Parameterized networks: the encoder, latent dynamics, amortized inference
net and action decoder, plus the VAE and one-step inverse-model baselines.

Every network accepts a single example or a batch with a leading axis.
All randomness comes from explicitly passed noise tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ArchConfig
from .losses import kl_standard_normal

SIGMA_FLOOR = 1e-4

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class Module:
    """Owns trainable tensors; nested modules and lists are walked in order."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            items = value if isinstance(value, list) else [value]
            for i, item in enumerate(items):
                key = f"{name}.{i}" if isinstance(value, list) else name
                if isinstance(item, Tensor) and item.requires_grad:
                    out[key] = item
                elif isinstance(item, Module):
                    for sub, t in item.named_parameters().items():
                        out[f"{key}.{sub}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = _uniform(rng, n_in, (n_in, n_out))
        self.b = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return (x.reshape(1, x.shape[0]) @ self.w + self.b).reshape(self.b.shape[0])
        return x @ self.w + self.b


class MLP(Module):
    """Fully-connected layers with a hidden activation and linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "tanh"):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def _as_rows(x, dim: int, what: str) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.shape[-1] != dim:
        raise ShapeError(f"{what}: expected last dimension {dim}, got shape {x.shape}")
    if x.ndim == 1:
        return x.reshape(1, dim), True
    return x, False


class ConvEncoder(Module):
    """Conv stack (5x5, ReLU between layers) followed by spatial soft-argmax."""

    def __init__(self, obs_shape: tuple[int, int, int], arch: ArchConfig, rng: np.random.Generator):
        self.obs_shape = tuple(obs_shape)
        self.strides = list(arch.conv_strides)
        self.temperature = arch.temperature
        self.kernels = []
        self.biases = []
        cin = obs_shape[0]
        for cout in arch.conv_channels:
            self.kernels.append(_uniform(rng, cin * 25, (cout, cin, 5, 5)))
            self.biases.append(ad.parameter(np.zeros(cout)))
            cin = cout

    @property
    def latent_dim(self) -> int:
        return 2 * self.kernels[-1].shape[0]

    def features(self, obs) -> Tensor:
        h = ad.as_tensor(obs)
        if h.shape[-3:] != self.obs_shape:
            raise ShapeError(f"encoder expects observations of shape {self.obs_shape}, got {h.shape}")
        n = len(self.kernels)
        for i, (k, b, s) in enumerate(zip(self.kernels, self.biases, self.strides)):
            h = ad.conv2d(h, k, b, stride=s)
            if i < n - 1:
                h = ad.relu(h)
        return h

    def __call__(self, obs) -> Tensor:
        return ad.spatial_soft_argmax(self.features(obs), self.temperature)


def encode(obs, encoder: ConvEncoder) -> Tensor:
    """Latent state of an observation ([C,H,W] -> [2C'], or batched)."""
    return encoder(obs)


class Dynamics(Module):
    """x_{t+1} = g(x_t, z_t): a 2-layer MLP on the concatenated inputs."""

    def __init__(self, x_dim: int, z_dim: int, hidden: int, rng: np.random.Generator):
        self.x_dim, self.z_dim = x_dim, z_dim
        self.net = MLP([x_dim + z_dim, hidden, x_dim], rng)

    def __call__(self, x, z) -> Tensor:
        x, sx = _as_rows(x, self.x_dim, "dynamics state")
        z, sz = _as_rows(z, self.z_dim, "dynamics action")
        if x.shape[0] != z.shape[0]:
            raise ShapeError(f"dynamics: batch sizes differ ({x.shape[0]} vs {z.shape[0]})")
        out = self.net(ad.concat([x, z], axis=-1))
        return out.reshape(self.x_dim) if sx and sz else out


def dynamics_step(x, z_prime, dyn: Dynamics) -> Tensor:
    return dyn(x, z_prime)


@dataclass
class PosteriorGaussian:
    means: Tensor
    stds: Tensor


class InferenceNet(Module):
    """q(z_t | a_t): shared per-timestep trunk with mean and std heads."""

    def __init__(self, action_dim: int, z_dim: int, hidden: int, rng: np.random.Generator):
        self.action_dim, self.z_dim = action_dim, z_dim
        self.trunk = Linear(action_dim, hidden, rng)
        self.mu = Linear(hidden, z_dim, rng)
        self.sigma = Linear(hidden, z_dim, rng)

    def __call__(self, actions) -> PosteriorGaussian:
        a = ad.as_tensor(actions)
        if a.shape[-1] != self.action_dim:
            raise ShapeError(f"inference net expects action dim {self.action_dim}, got {a.shape}")
        h = ad.tanh(self.trunk(a))
        return PosteriorGaussian(self.mu(h), ad.softplus(self.sigma(h)) + SIGMA_FLOOR)


def infer_posterior(actions, inference: InferenceNet) -> PosteriorGaussian:
    return inference(actions)


def sample_latents(post: PosteriorGaussian, noise) -> Tensor:
    """Reparameterized sample mu + sigma * noise."""
    noise = ad.as_tensor(noise)
    if noise.shape != post.means.shape:
        raise ShapeError(f"noise shape {noise.shape} != posterior shape {post.means.shape}")
    return post.means + post.stds * noise


class ActionDecoder(Module):
    """Mean of N(a_t, I) from one latent action; applied per timestep."""

    def __init__(self, z_dim: int, action_dim: int, hidden: int, rng: np.random.Generator):
        self.z_dim = z_dim
        self.net = MLP([z_dim, hidden, action_dim], rng)

    def __call__(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.z_dim:
            raise ShapeError(f"decoder expects latent dim {self.z_dim}, got {z.shape}")
        return self.net(z)


def decode_actions(z_prime, decoder: ActionDecoder) -> Tensor:
    return decoder(z_prime)


class DpnModel(Module):
    """All trainable pieces: encoder, dynamics, decoder, step sizes and q_phi."""

    def __init__(self, obs_shape, action_dim: int, arch: ArchConfig, n_p: int,
                 alpha_init: float, rng: np.random.Generator):
        z_dim = arch.z_dim or action_dim
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.z_dim = z_dim
        self.encoder = ConvEncoder(obs_shape, arch, rng)
        self.dynamics = Dynamics(self.encoder.latent_dim, z_dim, arch.dyn_hidden, rng)
        self.decoder = ActionDecoder(z_dim, action_dim, arch.dec_hidden, rng)
        self.alphas = ad.parameter(np.full(n_p, float(alpha_init)))
        self.inference = InferenceNet(action_dim, z_dim, arch.inf_hidden, rng)

    @property
    def n_p(self) -> int:
        return self.alphas.shape[0]


class UpnModel(Module):
    """Deterministic planner over raw actions (no latents, no decoder)."""

    def __init__(self, obs_shape, action_dim: int, arch: ArchConfig, n_p: int,
                 alpha_init: float, rng: np.random.Generator):
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.encoder = ConvEncoder(obs_shape, arch, rng)
        self.dynamics = Dynamics(self.encoder.latent_dim, action_dim, arch.dyn_hidden, rng)
        self.alphas = ad.parameter(np.full(n_p, float(alpha_init)))

    @property
    def n_p(self) -> int:
        return self.alphas.shape[0]


class VAE(Module):
    """Conv/soft-argmax encoder with Gaussian latent and a 4-layer deconv decoder."""

    def __init__(self, obs_shape, arch: ArchConfig, rng: np.random.Generator):
        C, H, W = obs_shape
        self.obs_shape = tuple(obs_shape)
        self.encoder = ConvEncoder(obs_shape, arch, rng)
        d, k = arch.vae_latent, arch.vae_channels
        self.mu = Linear(self.encoder.latent_dim, d, rng)
        self.sigma = Linear(self.encoder.latent_dim, d, rng)
        self.sizes = [(-(-H // 4), -(-W // 4)), (-(-H // 2), -(-W // 2)), (H, W), (H, W), (H, W)]
        self.base_channels = k
        h0, w0 = self.sizes[0]
        self.project = Linear(d, k * h0 * w0, rng)
        self.dec_strides = [2, 2, 1, 1]
        chans = [k, k, k, k, C]
        self.dec_kernels = [_uniform(rng, chans[i] * 25, (chans[i], chans[i + 1], 5, 5))
                            for i in range(4)]
        self.dec_biases = [ad.parameter(np.zeros(chans[i + 1])) for i in range(4)]

    @property
    def latent_dim(self) -> int:
        return self.mu.w.shape[1]

    def posterior(self, obs) -> PosteriorGaussian:
        f = self.encoder(obs)
        return PosteriorGaussian(self.mu(f), ad.softplus(self.sigma(f)) + SIGMA_FLOOR)

    def decode(self, z) -> Tensor:
        z, single = _as_rows(z, self.latent_dim, "vae latent")
        h0, w0 = self.sizes[0]
        h = ad.relu(self.project(z)).reshape(z.shape[0], self.base_channels, h0, w0)
        for i, (k, b, s) in enumerate(zip(self.dec_kernels, self.dec_biases, self.dec_strides)):
            h = ad.conv_transpose2d(h, k, b, stride=s, out_hw=self.sizes[i + 1])
            h = ad.relu(h) if i < 3 else ad.sigmoid(h)
        return h.reshape(self.obs_shape) if single else h

    def embed(self, obs) -> Tensor:
        return self.posterior(obs).means


def vae_forward(obs, vae: VAE, noise) -> tuple[Tensor, Tensor, Tensor]:
    """(reparameterized latent, reconstruction, KL to N(0, I))."""
    post = vae.posterior(obs)
    z = sample_latents(post, noise)
    return z, vae.decode(z), kl_standard_normal(post.means, post.stds)


class InverseModel(Module):
    """Siamese encoder, action head on concatenated embeddings, forward head."""

    def __init__(self, obs_shape, action_dim: int, arch: ArchConfig, rng: np.random.Generator):
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.encoder = ConvEncoder(obs_shape, arch, rng)
        e = self.encoder.latent_dim
        self.action_head = MLP([2 * e, arch.inverse_hidden, action_dim], rng, activation="relu")
        self.forward_head = MLP([e + action_dim, arch.inverse_hidden, e], rng, activation="relu")

    def embed(self, obs) -> Tensor:
        return self.encoder(obs)


def inverse_forward(o_t, o_next, model: InverseModel, action=None):
    """Embeddings of both frames, the predicted action and predicted next embedding.

    The forward head consumes ``action`` when given (training) and the
    predicted action otherwise.
    """
    e_t, e_next = model.encoder(o_t), model.encoder(o_next)
    predicted = model.action_head(ad.concat([e_t, e_next], axis=-1))
    drive = predicted if action is None else ad.as_tensor(action)
    if drive.shape != predicted.shape:
        raise ShapeError(f"action shape {drive.shape} != predicted action shape {predicted.shape}")
    next_hat = model.forward_head(ad.concat([e_t, drive], axis=-1))
    return e_t, e_next, predicted, next_hat
