"""Dense beta-VAE on 32x32 images, trained with the autodiff engine."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .factorgen import N_PIXELS, Dataset, LabeledImage

log = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, reconstruction: float, kl: float):
        self.reconstruction = reconstruction
        self.kl = kl
        super().__init__(f"non-finite loss (reconstruction={reconstruction}, kl={kl})")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, cause: Exception | None = None):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {cause}")


class EncodingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    n_latent: int = 8
    beta: float = 1.0
    hidden: tuple[int, ...] = (256, 64)
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_latent <= 0:
            raise ValueError("n_latent must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class LatentStats:
    """Posterior parameters; 1-D for one image or (N, n_latent) for a batch."""

    mu: np.ndarray
    logvar: np.ndarray


def layer_sizes(config: VaeConfig) -> tuple[list[tuple[str, int, int]], list[tuple[str, int, int]]]:
    enc_dims = [N_PIXELS, *config.hidden]
    enc = [(f"enc{i}", a, b) for i, (a, b) in enumerate(zip(enc_dims, enc_dims[1:]))]
    enc.append(("enc_out", enc_dims[-1], 2 * config.n_latent))
    dec_dims = [config.n_latent, *reversed(config.hidden)]
    dec = [(f"dec{i}", a, b) for i, (a, b) in enumerate(zip(dec_dims, dec_dims[1:]))]
    dec.append(("dec_out", dec_dims[-1], N_PIXELS))
    return enc, dec


@dataclass
class VaeModel:
    config: VaeConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: VaeConfig, rng: np.random.Generator | None = None) -> "VaeModel":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        params = {}
        enc, dec = layer_sizes(config)
        for name, fan_in, fan_out in enc + dec:
            params[f"{name}.W"] = nx.glorot_uniform(rng, fan_in, fan_out)
            params[f"{name}.b"] = np.zeros(fan_out)
        return cls(config, params)

    @property
    def n_latent(self) -> int:
        return self.config.n_latent

    def parameter_tensors(self) -> dict[str, nx.Tensor]:
        """Graph leaves sharing storage with ``params``."""
        return {k: nx.Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def constant_tensors(self) -> dict[str, nx.Tensor]:
        return {k: nx.Tensor(v) for k, v in self.params.items()}


def _dense(t: Mapping[str, nx.Tensor], name: str, x: nx.Tensor) -> nx.Tensor:
    return x @ t[f"{name}.W"] + t[f"{name}.b"]


def encoder_graph(config: VaeConfig, t: Mapping[str, nx.Tensor], x) -> tuple[nx.Tensor, nx.Tensor]:
    h = nx.as_tensor(x)
    enc, _ = layer_sizes(config)
    for name, _, _ in enc[:-1]:
        h = _dense(t, name, h).relu()
    out = _dense(t, "enc_out", h)
    n = config.n_latent
    mu = nx.columns(out, 0, n)
    logvar = nx.clip(nx.columns(out, n, 2 * n), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def decoder_graph(config: VaeConfig, t: Mapping[str, nx.Tensor], z) -> nx.Tensor:
    h = nx.as_tensor(z)
    _, dec = layer_sizes(config)
    for name, _, _ in dec[:-1]:
        h = _dense(t, name, h).relu()
    return _dense(t, "dec_out", h).sigmoid()


def reparameterize(mu, logvar, noise) -> nx.Tensor:
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    return nx.add(mu, nx.mul(nx.exp(nx.mul(logvar, 0.5)), noise))


def kl_divergence(mu, logvar) -> nx.Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, 1)), elementwise."""
    mu, logvar = nx.as_tensor(mu), nx.as_tensor(logvar)
    # expm1(lv) >= lv holds after rounding, so the result is never negative
    return (mu.square() + (nx.expm1(logvar) - logvar)) * 0.5


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, LabeledImage):
        x = x.pixels
    elif isinstance(x, Dataset):
        return x.flat()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, N_PIXELS)


def encode_batch(model: VaeModel, x) -> LatentStats:
    mu, logvar = encoder_graph(model.config, model.constant_tensors(), _as_matrix(x))
    if not (np.all(np.isfinite(mu.value)) and np.all(np.isfinite(logvar.value))):
        raise EncodingError("non-finite encoder activation")
    return LatentStats(mu.value, logvar.value)


def encode(model: VaeModel, image) -> LatentStats:
    """Posterior mean and log-variance for one image."""
    stats = encode_batch(model, image)
    return LatentStats(stats.mu[0], stats.logvar[0])


def decode(model: VaeModel, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return decoder_graph(model.config, model.constant_tensors(), z).value


def elbo_loss(model: VaeModel, batch, noise, tensors: Mapping[str, nx.Tensor] | None = None,
              beta: float | None = None) -> tuple[nx.Tensor, dict[str, float]]:
    """Negative beta-ELBO averaged over the batch.

    Per image: squared error summed over the 1024 pixels plus beta times the
    KL summed over latents.  Pass ``tensors`` (from ``parameter_tensors``) to
    differentiate with respect to the parameters.
    """
    x = _as_matrix(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    beta = model.config.beta if beta is None else beta
    t = model.constant_tensors() if tensors is None else tensors
    mu, logvar = encoder_graph(model.config, t, x)
    z = reparameterize(mu, logvar, np.asarray(noise, dtype=np.float64).reshape(mu.shape))
    xhat = decoder_graph(model.config, t, z)
    scale = 1.0 / len(x)
    recon = (xhat - x).square().sum() * scale
    kl = kl_divergence(mu, logvar).sum() * scale
    loss = recon + kl * beta
    parts = {"reconstruction": float(recon.value), "kl": float(kl.value)}
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(parts["reconstruction"], parts["kl"])
    return loss, parts


def train(config: VaeConfig, train_set: Dataset) -> tuple[VaeModel, list[float]]:
    """Fit a model by Adam on shuffled mini-batches; returns model and epoch-mean losses."""
    x = _as_matrix(train_set)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = VaeModel.initialize(config, rng)
    tensors = model.parameter_tensors()
    state = nx.AdamState(learning_rate=config.learning_rate)
    trace: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        try:
            for start in range(0, len(x), config.batch_size):
                idx = order[start:start + config.batch_size]
                noise = rng.standard_normal((len(idx), config.n_latent))
                loss, _ = elbo_loss(model, x[idx], noise, tensors)
                grads = nx.backward(loss, tensors.values())
                nx.adam_step(model.params, {k: grads[v] for k, v in tensors.items()}, state)
                total += float(loss.value) * len(idx)
        except (FloatingPointError, nx.NonFiniteGradientError) as exc:
            raise TrainingDivergedError(epoch, exc) from exc
        mean_loss = total / len(x)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        trace.append(mean_loss)
        log.debug("beta=%g n_latent=%d epoch %d loss %.4f", config.beta, config.n_latent,
                  epoch, mean_loss)
    return model, trace


def reconstruct(model: VaeModel, data) -> np.ndarray:
    """Decode the posterior mean (no sampling)."""
    return decode(model, encode_batch(model, data).mu)


def reconstruction_errors(model: VaeModel, data) -> np.ndarray:
    """Per-image mean squared pixel error of the mean reconstruction."""
    x = _as_matrix(data)
    return ((reconstruct(model, x) - x) ** 2).mean(axis=1)


def reconstruction_mse(model: VaeModel, data) -> float:
    x = _as_matrix(data)
    if len(x) == 0:
        raise ValueError("empty dataset")
    return float(reconstruction_errors(model, x).mean())
