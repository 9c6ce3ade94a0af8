"""Mean-field variational deep image prior under a temperature-scaled ELBO.

The network is a small noise-fed autoencoder whose weights carry factorized
Gaussian posteriors q(w) = N(mu, softplus(rho)^2).  The training objective is

    loss = T * KL[q || p_T] + 1/2 ||F[x_hat(w)] - y||^2

with the prior spread scaled along with the temperature (sigma_T = sqrt(T) *
sigma by default), so T = 1 recovers the plain negative ELBO exactly.  A
partial mode reweights the KL term by a bare factor lambda against an
unscaled prior, and a deterministic mode drops sampling and KL entirely
(the classic deep-image-prior baseline).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import Image, Rng, uniform_noise_image
from .metrics import psnr
from .radon import ProjectionGeometry, Sinogram, get_operator

# softplus(RHO_INIT) = 1e-3: weight spreads start small so early training
# behaves almost deterministically.
_RHO_INIT = math.log(math.expm1(1e-3))
_SIGMA_SCALINGS = ("sqrt_t", "inv_sqrt_t")


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss; carries the last finite iteration."""

    def __init__(self, iteration: int, last_good: int):
        super().__init__(
            f"non-finite loss at iteration {iteration}; last good iteration {last_good}"
        )
        self.iteration = iteration
        self.last_good_iteration = last_good


@dataclass(frozen=True)
class TemperedPrior:
    """Zero-mean Gaussian weight prior whose spread tracks the temperature.

    scaling "sqrt_t" sets sigma_T = sqrt(T)*sigma (variance T*sigma^2); the
    alternative "inv_sqrt_t" (sigma_T = sigma/sqrt(T)) is exposed because the
    two conventions circulate in the literature — outputs must record which
    one was used.
    """

    sigma: float
    temperature: float = 1.0
    scaling: str = "sqrt_t"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"prior sigma must be > 0, got {self.sigma}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.scaling not in _SIGMA_SCALINGS:
            raise ValueError(f"scaling must be one of {_SIGMA_SCALINGS}, got {self.scaling!r}")

    @property
    def sigma_t(self) -> float:
        if self.scaling == "sqrt_t":
            return math.sqrt(self.temperature) * self.sigma
        return self.sigma / math.sqrt(self.temperature)


class VariationalParams:
    """Per-weight Gaussian posterior parameters.

    ``means`` and ``rhos`` map tensor names to arrays; storage is two flat
    backing vectors with per-tensor views, so the optimizer and the loss graph
    touch each group as a single array while callers see named tensors.
    """

    def __init__(self, means: dict, rhos: dict):
        if set(means) != set(rhos):
            raise ValueError("means and rhos must cover the same tensors")
        self.names = sorted(means)
        self.index = []
        offset = 0
        for name in self.names:
            if means[name].shape != rhos[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: mu {means[name].shape}, rho {rhos[name].shape}"
                )
            self.index.append((name, offset, means[name].shape))
            offset += means[name].size
        self.flat_mu = np.empty(offset)
        self.flat_rho = np.empty(offset)
        self.means, self.rhos = {}, {}
        for name, start, shape in self.index:
            size = int(np.prod(shape))
            self.flat_mu[start : start + size] = np.asarray(means[name], dtype=np.float64).ravel()
            self.flat_rho[start : start + size] = np.asarray(rhos[name], dtype=np.float64).ravel()
            self.means[name] = self.flat_mu[start : start + size].reshape(shape)
            self.rhos[name] = self.flat_rho[start : start + size].reshape(shape)

    def sigma_w(self, name: str) -> np.ndarray:
        return np.logaddexp(0.0, self.rhos[name])

    def num_weights(self) -> int:
        return self.flat_mu.size

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.means, self.rhos)


# Loss modes ----------------------------------------------------------------


@dataclass(frozen=True)
class FullyTempered:
    """T * KL against the temperature-scaled prior, plus the data term."""

    temperature: float
    sigma: float
    scaling: str = "sqrt_t"

    def prior(self) -> TemperedPrior:
        return TemperedPrior(self.sigma, self.temperature, self.scaling)


@dataclass(frozen=True)
class PartialLambda:
    """lambda * KL against the unscaled prior, plus the data term."""

    lam: float
    sigma: float

    def prior(self) -> TemperedPrior:
        return TemperedPrior(self.sigma, 1.0)


@dataclass(frozen=True)
class Deterministic:
    """Point-estimate network, squared-error data term only (plain DIP)."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    learning_rate: float = 3e-3
    mc_train_samples: int = 1
    mode: object = Deterministic()
    history_every: int = 50

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.mc_train_samples < 1:
            raise ValueError("mc_train_samples must be >= 1")


class HistoryRow(NamedTuple):
    iteration: int
    loss: float
    psnr: Optional[float]


class DipNetwork:
    """Noise-fed convolutional autoencoder producing one (0,1) image.

    Three stride-2 encoder convs, two mid convs, three upsample+conv stages
    and a 1x1 sigmoid head, all at a fixed channel width; every 3x3 conv is
    followed by per-channel normalization, without which coherent early
    optimizer steps inflate the layer gains multiplicatively until the
    sigmoid head saturates and all gradients die.  The normalization is
    affine-free (the next conv absorbs scale, the layer bias absorbs shift)
    and the bias is added after it, where mean subtraction cannot cancel it.
    The input noise tensor is drawn once at construction and stays fixed for
    the network's lifetime (the optimization variable is the weights, never
    the input).
    """

    def __init__(self, image_size: int, rng: Rng, channels: int = 32, in_channels: int = 32):
        if image_size % 8 != 0 or image_size < 16:
            raise ValueError(f"image_size must be a multiple of 8 and >= 16, got {image_size}")
        if channels < 1 or in_channels < 1:
            raise ValueError("channel counts must be positive")
        self.image_size = image_size
        self.channels = channels
        self.in_channels = in_channels
        self.noise = uniform_noise_image(rng, in_channels, image_size)
        c = channels
        # (name, in_channels, out_channels, stride, upsample_first)
        self.conv_layers = (
            ("enc1", in_channels, c, 2, False),
            ("enc2", c, c, 2, False),
            ("enc3", c, c, 2, False),
            ("mid1", c, c, 1, False),
            ("mid2", c, c, 1, False),
            ("up1", c, c, 1, True),
            ("up2", c, c, 1, True),
            ("up3", c, c, 1, True),
        )

    def describe(self) -> str:
        stages = [
            f"{n}:conv3x3({ci}->{co},s{s}{',up2x' if up else ''})+norm"
            for n, ci, co, s, up in self.conv_layers
        ]
        stages.append(f"head:conv1x1({self.channels}->1)+sigmoid")
        return " ".join(stages)

    def param_shapes(self) -> dict:
        shapes = {}
        for name, c_in, c_out, _, _ in self.conv_layers:
            shapes[f"{name}.w"] = (c_out, c_in, 3, 3)
            shapes[f"{name}.b"] = (c_out,)
        shapes["head.w"] = (1, self.channels)
        shapes["head.b"] = (1,)
        return shapes

    def init_params(self, rng: Rng) -> VariationalParams:
        """He-style means (std sqrt(2/fan_in)), spreads softplus(rho) = 1e-3."""
        means, rhos = {}, {}
        for name, shape in sorted(self.param_shapes().items()):
            if name.endswith(".b"):
                means[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                means[name] = rng.normal(shape) * math.sqrt(2.0 / fan_in)
            rhos[name] = np.full(shape, _RHO_INIT)
        return VariationalParams(means, rhos)

    def forward(self, weights: dict) -> Tensor:
        """Run the network on its fixed noise input; weights maps name -> Tensor."""
        h = Tensor(self.noise, name="noise_input")
        for name, _, c_out, stride, upsample in self.conv_layers:
            if upsample:
                h = ad.upsample_nearest(h)
            h = ad.channel_norm(ad.conv2d(h, weights[f"{name}.w"], stride=stride))
            h = ad.leaky_relu(h + ad.reshape(weights[f"{name}.b"], (c_out, 1, 1)))
        n = self.image_size
        flat = ad.reshape(h, (self.channels, n * n))
        out = ad.matmul(weights["head.w"], flat) + ad.reshape(weights["head.b"], (1, 1))
        return ad.reshape(ad.sigmoid(out), (n, n))


# Sampling and loss ---------------------------------------------------------


def _split_weights(flat: Tensor, params: VariationalParams) -> dict:
    """Slice a flat weight tensor back into named, shaped tensors."""
    weights = {}
    for name, start, shape in params.index:
        size = int(np.prod(shape))
        weights[name] = ad.reshape(ad.narrow(flat, start, size), shape)
    return weights


def _constant_weights(params: VariationalParams, flat: np.ndarray) -> dict:
    return {
        name: Tensor(flat[start : start + int(np.prod(shape))].reshape(shape), name=name)
        for name, start, shape in params.index
    }


def sample_weights(params: VariationalParams, rng: Rng, leaves: tuple = None) -> dict:
    """Reparameterized draw w = mu + softplus(rho) * eps, one Tensor per weight.

    When ``leaves`` (the flat mu/rho Tensors) is given the draw is
    differentiable w.r.t. them; otherwise the draw is a plain constant.
    """
    if leaves is None:
        eps = rng.normal(params.num_weights())
        flat = params.flat_mu + np.logaddexp(0.0, params.flat_rho) * eps
        return _constant_weights(params, flat)
    mu, rho = leaves
    eps = Tensor(rng.normal(params.num_weights()), name="eps")
    return _split_weights(mu + ad.softplus(rho) * eps, params)


def _kl_node(mu: Tensor, sw: Tensor, sigma_t: float) -> Tensor:
    """Closed-form KL[q || N(0, sigma_t^2)] summed over all weights.

    ``sw`` is the spread tensor softplus(rho) — passed in rather than derived
    here so the loss can share one softplus node between sampling and KL.
    """
    denom = 2.0 * (sigma_t * sigma_t)
    term = ad.log(sigma_t / sw) + (ad.square(sw) + ad.square(mu)) / denom - 0.5
    return ad.tensor_sum(term)


def kl_mean_field(params: VariationalParams, prior: TemperedPrior) -> float:
    """KL divergence between the factorized posterior and the tempered prior.

    Computed through the same graph code the loss uses, so the two agree bit
    for bit.
    """
    sw = ad.softplus(Tensor(params.flat_rho))
    value = _kl_node(Tensor(params.flat_mu), sw, prior.sigma_t).item()
    if not math.isfinite(value):
        raise NumericError("non-finite KL divergence")
    return value


class LossParts(NamedTuple):
    loss: Tensor
    leaves: tuple  # (mu Tensor, rho Tensor or None)
    kl: Optional[float]
    data: float


def build_loss(
    net: DipNetwork,
    params: VariationalParams,
    mode,
    sinogram: Sinogram,
    rng: Rng,
    mc_train_samples: int = 1,
    requires_grad: bool = True,
) -> LossParts:
    """Assemble the training objective graph for any of the three modes."""
    op = get_operator(sinogram.geometry, net.image_size)
    y = Tensor(sinogram.values, name="sinogram")
    if isinstance(mode, Deterministic):
        mu = Tensor(params.flat_mu, requires_grad=requires_grad, name="mu")
        residual = ad.apply_linear(op, net.forward(_split_weights(mu, params))) - y
        loss = 0.5 * ad.tensor_sum(ad.square(residual))
        return LossParts(loss, (mu, None), None, loss.item())

    mu = Tensor(params.flat_mu, requires_grad=requires_grad, name="mu")
    rho = Tensor(params.flat_rho, requires_grad=requires_grad, name="rho")
    sw = ad.softplus(rho)
    data_total = None
    for _ in range(mc_train_samples):
        eps = Tensor(rng.normal(params.num_weights()), name="eps")
        weights = _split_weights(mu + sw * eps, params)
        residual = ad.apply_linear(op, net.forward(weights)) - y
        term = 0.5 * ad.tensor_sum(ad.square(residual))
        data_total = term if data_total is None else data_total + term
    data = data_total * (1.0 / mc_train_samples)
    if isinstance(mode, FullyTempered):
        kl = _kl_node(mu, sw, mode.prior().sigma_t)
        loss = mode.temperature * kl + data
    elif isinstance(mode, PartialLambda):
        kl = _kl_node(mu, sw, mode.sigma)
        loss = mode.lam * kl + data
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return LossParts(loss, (mu, rho), kl.item(), data.item())


def tempered_loss(
    net: DipNetwork,
    params: VariationalParams,
    prior: TemperedPrior,
    sinogram: Sinogram,
    rng: Rng,
    mc_train_samples: int = 1,
) -> Tensor:
    """Fully tempered objective T*KL[q||p_T] + 1/2||F[x_hat] - y||^2 as a graph node."""
    mode = FullyTempered(prior.temperature, prior.sigma, prior.scaling)
    return build_loss(net, params, mode, sinogram, rng, mc_train_samples).loss


class _Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    def __init__(self, arrays: list, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self._scratch = [np.empty_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for arr, g, m, v, tmp in zip(self.arrays, grads, self.m, self.v, self._scratch):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= scale
            arr -= tmp


def _deterministic_mean(net: DipNetwork, params: VariationalParams) -> np.ndarray:
    return net.forward(_constant_weights(params, params.flat_mu)).data


def train(
    net: DipNetwork,
    config: TrainConfig,
    sinogram: Sinogram,
    geometry: ProjectionGeometry = None,
    phantom: Optional[Image] = None,
    rng: Rng = None,
) -> tuple:
    """Optimize the variational parameters; returns (params, history).

    History rows (iteration, loss, psnr-vs-phantom) are recorded every
    ``history_every`` iterations and at the final one; the PSNR column uses
    the mean-weight forward pass and is None when no phantom is given.
    Deterministic given the rng seed.
    """
    if rng is None:
        raise ValueError("train requires an rng")
    if geometry is not None and geometry != sinogram.geometry:
        raise ValueError("geometry does not match the sinogram's")
    deterministic = isinstance(config.mode, Deterministic)
    params = net.init_params(rng.split(0))
    step_rng = rng.split(1)
    arrays = [params.flat_mu] if deterministic else [params.flat_mu, params.flat_rho]
    opt = _Adam(arrays, config.learning_rate)
    history: list[HistoryRow] = []

    def record(iteration: int, loss_value: float) -> None:
        quality = None
        if phantom is not None:
            quality = psnr(_deterministic_mean(net, params), phantom.pixels)
        history.append(HistoryRow(iteration, loss_value, quality))

    last_good = -1
    for it in range(config.iterations):
        try:
            parts = build_loss(net, params, config.mode, sinogram, step_rng, config.mc_train_samples)
        except NumericError as exc:
            raise TrainingDiverged(it, last_good) from exc
        loss_value = parts.loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDiverged(it, last_good)
        last_good = it
        ad.backward(parts.loss)
        mu_leaf, rho_leaf = parts.leaves
        grads = [mu_leaf.grad] if deterministic else [mu_leaf.grad, rho_leaf.grad]
        opt.step(grads)
        if it % config.history_every == 0 or it == config.iterations - 1:
            record(it, loss_value)
    return params, history


def predict(net: DipNetwork, params: VariationalParams, n_samples: int, rng: Rng) -> tuple:
    """Monte Carlo posterior predictive: pixelwise mean and biased variance.

    mean = (1/N) sum x_i, variance = (1/N) sum (x_i - mean)^2.  Mean pixels
    live in (0,1) by the sigmoid head; clamping happens only at export.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = []
    for _ in range(n_samples):
        weights = sample_weights(params, rng)
        samples.append(net.forward(weights).data)
    stack = np.stack(samples)
    mean = stack.mean(axis=0)
    variance = np.mean((stack - mean) ** 2, axis=0)
    return Image(mean), Image(variance)


def write_history_csv(history: list, path) -> None:
    """History CSV with columns iteration,loss,psnr (psnr blank when absent)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "psnr"])
        for row in history:
            quality = "" if row.psnr is None else repr(float(row.psnr))
            writer.writerow([row.iteration, repr(float(row.loss)), quality])
