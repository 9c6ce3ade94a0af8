"""Gaussian-process surrogate over (log T, log sigma) with PSNR observations.

Scaled RBF kernel, constant mean, homoscedastic noise.  Hyperparameters are
set by MAP: log marginal likelihood plus hyperpriors (mean ~ N(15, 4^2) dB,
noise variance ~ Gamma(0.1, 100), broad log-normals on the output scale and
length-scale centered at s = 4 dB and l = 0.3), maximized by multi-start
gradient-based ascent in log-parameter space with analytic gradients.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .autodiff import NumericError

_LOG_2PI = math.log(2.0 * math.pi)
_JITTER_LADDER = (1e-10, 1e-8, 1e-6, 1e-4)
_PARAM_ORDER = ("mean", "scale2", "length", "noise")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GPPriors:
    """Hyperprior configuration; the defaults are the reported settings."""

    mean_center: float = 15.0  # dB
    mean_sd: float = 4.0
    scale2_center: float = 16.0  # dB^2, i.e. s = 4 dB
    log_scale2_sd: float = 2.0
    length_center: float = 0.3  # log-units
    log_length_sd: float = 1.0
    noise_shape: float = 0.1  # Gamma(shape, rate) over the noise variance
    noise_rate: float = 100.0

    def modes(self) -> np.ndarray:
        """MAP starting point (c, log s^2, log l, log sigma_n^2).

        The Gamma prior is expressed in log space (where MAP runs), so its
        mode sits at shape/rate rather than the natural-space mode.
        """
        return np.array(
            [
                self.mean_center,
                math.log(self.scale2_center),
                math.log(self.length_center),
                math.log(self.noise_shape / self.noise_rate),
            ]
        )

    def log_density(self, u: np.ndarray) -> float:
        c, ls2, ll, ln = u
        value = -((c - self.mean_center) ** 2) / (2.0 * self.mean_sd**2)
        value += -((ls2 - math.log(self.scale2_center)) ** 2) / (2.0 * self.log_scale2_sd**2)
        value += -((ll - math.log(self.length_center)) ** 2) / (2.0 * self.log_length_sd**2)
        value += self.noise_shape * ln - self.noise_rate * math.exp(ln)
        return value

    def log_density_grad(self, u: np.ndarray) -> np.ndarray:
        c, ls2, ll, ln = u
        return np.array(
            [
                -(c - self.mean_center) / self.mean_sd**2,
                -(ls2 - math.log(self.scale2_center)) / self.log_scale2_sd**2,
                -(ll - math.log(self.length_center)) / self.log_length_sd**2,
                self.noise_shape - self.noise_rate * math.exp(ln),
            ]
        )


@dataclass(frozen=True)
class GPHyperparams:
    mean: float  # constant mean c, dB
    scale2: float  # output scale s^2, dB^2
    length: float  # length-scale l, log-units
    noise_var: float  # sigma_n^2, dB^2

    def __post_init__(self):
        if not (self.scale2 > 0 and self.length > 0 and self.noise_var > 0):
            raise ValueError(f"scale2, length and noise_var must be > 0, got {self}")

    @staticmethod
    def from_u(u: np.ndarray) -> "GPHyperparams":
        return GPHyperparams(float(u[0]), math.exp(u[1]), math.exp(u[2]), math.exp(u[3]))

    def to_u(self) -> np.ndarray:
        return np.array(
            [self.mean, math.log(self.scale2), math.log(self.length), math.log(self.noise_var)]
        )


@dataclass(frozen=True)
class GPObservation:
    """One evaluated point: x = (log T, log sigma), y = PSNR in dB."""

    x: tuple
    y: float

    def __post_init__(self):
        x = (float(self.x[0]), float(self.x[1]))
        if len(self.x) != 2 or not all(math.isfinite(v) for v in x):
            raise ValueError(f"x must be a finite 2-vector, got {self.x!r}")
        if not math.isfinite(self.y):
            raise ValueError(f"y must be finite, got {self.y!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))


def kernel(x1, x2, hyperparams: GPHyperparams) -> float:
    """Scaled RBF: s^2 * exp(-||x1 - x2||^2 / (2 l^2))."""
    d = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return hyperparams.scale2 * math.exp(-float(d @ d) / (2.0 * hyperparams.length**2))


def _cross_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


class GPModel:
    """Immutable fitted surrogate: observations + hyperparameters + factor."""

    def __init__(self, observations, hyperparams: GPHyperparams, priors: GPPriors = None):
        self.observations = tuple(observations)
        self.hyperparams = hyperparams
        self.priors = priors if priors is not None else GPPriors()
        self.x = np.array([obs.x for obs in self.observations]).reshape(len(self.observations), 2)
        self.y = np.array([obs.y for obs in self.observations])
        self.jitter = 0.0
        if self.observations:
            k_matrix = hyperparams.scale2 * np.exp(
                -_cross_sq_dists(self.x, self.x) / (2.0 * hyperparams.length**2)
            )
            k_matrix[np.diag_indices_from(k_matrix)] += hyperparams.noise_var
            self._factor = self._factorize(k_matrix)
            self._alpha = cho_solve((self._factor, True), self.y - hyperparams.mean)
        else:
            self._factor = None
            self._alpha = np.zeros(0)

    @staticmethod
    def from_prior(priors: GPPriors = None) -> "GPModel":
        priors = priors if priors is not None else GPPriors()
        return GPModel((), GPHyperparams.from_u(priors.modes()), priors)

    def _factorize(self, k_matrix: np.ndarray) -> np.ndarray:
        try:
            return cholesky(k_matrix, lower=True)
        except LinAlgError:
            pass
        for jitter in _JITTER_LADDER:
            try:
                factor = cholesky(
                    k_matrix + jitter * np.eye(k_matrix.shape[0]), lower=True
                )
            except LinAlgError:
                continue
            self.jitter = jitter
            logger.warning("kernel factorization needed jitter %.1e", jitter)
            return factor
        raise NumericError("kernel matrix not factorizable even with jitter 1e-4")

    def _cross_kernel(self, queries: np.ndarray) -> np.ndarray:
        return self.hyperparams.scale2 * np.exp(
            -_cross_sq_dists(self.x, queries) / (2.0 * self.hyperparams.length**2)
        )

    def posterior_batch(self, queries: np.ndarray) -> tuple:
        """Means and variances at an (m, 2) array of log-space query points."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        hyper = self.hyperparams
        if not self.observations:
            return (
                np.full(queries.shape[0], hyper.mean),
                np.full(queries.shape[0], hyper.scale2),
            )
        k_cross = self._cross_kernel(queries)
        means = hyper.mean + k_cross.T @ self._alpha
        v = solve_triangular(self._factor, k_cross, lower=True)
        variances = hyper.scale2 - np.einsum("ij,ij->j", v, v)
        negative = variances < 0.0
        if np.any(negative):
            warnings.warn(
                f"posterior variance dipped to {variances.min():.3e}; clamping to 0",
                RuntimeWarning,
                stacklevel=2,
            )
            variances = np.where(negative, 0.0, variances)
        return means, variances

    def posterior(self, query) -> tuple:
        """(mean dB, variance dB^2) at one (log T, log sigma) point."""
        means, variances = self.posterior_batch(np.asarray(query, dtype=np.float64))
        return float(means[0]), float(variances[0])

    def log_marginal_likelihood(self) -> float:
        if not self.observations:
            return 0.0
        residual = self.y - self.hyperparams.mean
        n = residual.size
        log_det_half = float(np.sum(np.log(np.diag(self._factor))))
        return float(
            -0.5 * residual @ self._alpha - log_det_half - 0.5 * n * _LOG_2PI
        )


@dataclass(frozen=True)
class FitConfig:
    """MAP optimization settings; iterations=0 skips straight to prior modes."""

    iterations: int = 150
    num_starts: int = 4
    seed: int = 0
    free_params: tuple = _PARAM_ORDER

    def __post_init__(self):
        if self.iterations < 0 or self.num_starts < 1:
            raise ValueError("iterations must be >= 0 and num_starts >= 1")
        unknown = set(self.free_params) - set(_PARAM_ORDER)
        if unknown:
            raise ValueError(f"unknown free_params {sorted(unknown)}")


def _objective_parts(u: np.ndarray, x: np.ndarray, y: np.ndarray, d2: np.ndarray, priors):
    """MAP objective (lml + log prior) and its gradient in u-space."""
    # Line searches can probe wildly large parameters; bail out before exp
    # overflows (any sane hyperparameter is orders of magnitude smaller).
    if float(np.max(np.abs(u))) > 600.0:
        return -np.inf, np.zeros(4)
    c, s2, length, sn2 = u[0], math.exp(u[1]), math.exp(u[2]), math.exp(u[3])
    n = y.size
    r_matrix = np.exp(-d2 / (2.0 * length**2))
    k_matrix = s2 * r_matrix
    k_matrix[np.diag_indices_from(k_matrix)] += sn2
    try:
        factor = cholesky(k_matrix, lower=True)
    except LinAlgError:
        return -np.inf, np.zeros(4)
    residual = y - c
    alpha = cho_solve((factor, True), residual)
    lml = (
        -0.5 * residual @ alpha
        - float(np.sum(np.log(np.diag(factor))))
        - 0.5 * n * _LOG_2PI
    )
    k_inv = cho_solve((factor, True), np.eye(n))
    a_matrix = np.outer(alpha, alpha) - k_inv
    grad = np.empty(4)
    grad[0] = float(alpha.sum())
    grad[1] = 0.5 * float(np.sum(a_matrix * (s2 * r_matrix)))
    grad[2] = 0.5 * float(np.sum(a_matrix * (s2 * r_matrix * (d2 / length**2))))
    grad[3] = 0.5 * float(np.trace(a_matrix)) * sn2
    return lml + priors.log_density(u), grad + priors.log_density_grad(u)


def fit(observations, priors: GPPriors = None, config: FitConfig = None) -> GPModel:
    """MAP-fit hyperparameters and return the conditioned model."""
    observations = tuple(observations)
    if not observations:
        raise ValueError("fit requires at least one observation")
    priors = priors if priors is not None else GPPriors()
    config = config if config is not None else FitConfig()
    modes = priors.modes()
    if config.iterations == 0:
        return GPModel(observations, GPHyperparams.from_u(modes), priors)

    x = np.array([obs.x for obs in observations])
    y = np.array([obs.y for obs in observations])
    d2 = _cross_sq_dists(x, x)
    free = [i for i, name in enumerate(_PARAM_ORDER) if name in config.free_params]

    def negated(active):
        u = modes.copy()
        u[free] = active
        value, grad = _objective_parts(u, x, y, d2, priors)
        if not math.isfinite(value):
            return 1e12, np.zeros(len(free))
        return -value, -grad[free]

    rng = np.random.default_rng(config.seed)
    spread = np.array([priors.mean_sd, priors.log_scale2_sd, priors.log_length_sd, 1.0])
    starts = [modes.copy()]
    for _ in range(config.num_starts - 1):
        starts.append(modes + 0.5 * spread * rng.normal(size=4))

    best_u, best_value = None, -np.inf
    for start in starts:
        result = minimize(
            negated,
            start[free],
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": config.iterations},
        )
        if -result.fun > best_value:
            best_value = -result.fun
            best_u = result.x
    u = modes.copy()
    u[free] = best_u
    return GPModel(observations, GPHyperparams.from_u(u), priors)


def write_landscape_csv(
    model: GPModel, log_t_bounds, log_sigma_bounds, path, resolution: int = 60
) -> None:
    """Posterior mean/std over a lattice spanning the log-space search box."""
    t_grid = np.linspace(log_t_bounds[0], log_t_bounds[1], resolution)
    s_grid = np.linspace(log_sigma_bounds[0], log_sigma_bounds[1], resolution)
    queries = np.array([(t, s) for t in t_grid for s in s_grid])
    means, variances = model.posterior_batch(queries)
    stds = np.sqrt(variances)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["log_T", "log_sigma", "posterior_mean", "posterior_std"])
        for (log_t, log_s), mean_value, std in zip(queries, means, stds):
            writer.writerow(
                [repr(float(log_t)), repr(float(log_s)), repr(float(mean_value)), repr(float(std))]
            )
