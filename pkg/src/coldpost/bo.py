"""Bayesian optimization of (T, sigma) by expected improvement over a GP.

Candidates are proposed in log space: batched gradient ascent of the EI
surface from scrambled-Sobol starts (through the package's own reverse-mode
engine), then a short damped-Newton polish on the closed form, merge-radius
deduplication, and top-k selection.  The loop alternates GP fits with
(possibly parallel) objective evaluations, keeping a full audit trail.
"""

from __future__ import annotations

import concurrent.futures
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import qmc

from . import autodiff as ad
from .autodiff import Tensor
from .data import Rng
from .gp import FitConfig, GPModel, GPObservation, GPPriors, fit, write_landscape_csv
from .mfvi import _Adam

logger = logging.getLogger(__name__)

_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MERGE_RADIUS = 0.05  # log-units
_ASCENT_STARTS = 64
_ASCENT_STEPS = 150
_ASCENT_LR = 0.1
_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class SearchBox:
    """Inclusive positive ranges for temperature and prior scale."""

    t_low: float = 1e-12
    t_high: float = 1e-2
    sigma_low: float = 1e-10
    sigma_high: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.t_low < self.t_high):
            raise ValueError(f"need 0 < t_low < t_high, got [{self.t_low}, {self.t_high}]")
        if not (0.0 < self.sigma_low < self.sigma_high):
            raise ValueError(
                f"need 0 < sigma_low < sigma_high, got [{self.sigma_low}, {self.sigma_high}]"
            )

    def contains(self, t: float, sigma: float) -> bool:
        return self.t_low <= t <= self.t_high and self.sigma_low <= sigma <= self.sigma_high

    def log_bounds(self) -> tuple:
        return (
            (math.log(self.t_low), math.log(self.t_high)),
            (math.log(self.sigma_low), math.log(self.sigma_high)),
        )

    def clip_log(self, points: np.ndarray) -> np.ndarray:
        (t_lo, t_hi), (s_lo, s_hi) = self.log_bounds()
        clipped = np.array(points, dtype=np.float64)
        clipped[..., 0] = np.clip(clipped[..., 0], t_lo, t_hi)
        clipped[..., 1] = np.clip(clipped[..., 1], s_lo, s_hi)
        return clipped


def default_init_grid() -> tuple:
    """The four-point initialization grid T x sigma = {1e-7,1e-4} x {1e-6,1e-1}."""
    return tuple((t, s) for t in (1e-7, 1e-4) for s in (1e-6, 1e-1))


def expected_improvement(mean: float, variance: float, f_best: float) -> float:
    """Closed-form EI of a Gaussian belief over the objective at one point."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    delta = mean - f_best
    if variance == 0.0:
        return max(delta, 0.0)
    s = math.sqrt(variance)
    z = delta / s
    big_phi = 0.5 * (1.0 + math.erf(z * _INV_SQRT_2))
    small_phi = math.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return delta * big_phi + s * small_phi


class BORow(NamedTuple):
    """One evaluated candidate in the audit trail."""

    iteration: int
    candidate_index: int
    t: float
    sigma: float
    log_t: float
    log_sigma: float
    psnr: Optional[float]
    best_psnr_so_far: Optional[float]
    status: str


@dataclass
class BOState:
    observations: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    iteration: int = 0

    @property
    def best_psnr(self) -> float:
        if not self.observations:
            raise ValueError("no successful observations yet")
        return max(obs.y for obs in self.observations)

    @property
    def best_point(self) -> tuple:
        best = max(self.observations, key=lambda obs: obs.y)
        return (math.exp(best.x[0]), math.exp(best.x[1]))


class _LowerTriangularSolve:
    """Linear map v = L^-1 k with its exact adjoint, for the variance graph."""

    def __init__(self, factor: np.ndarray):
        self.factor = factor

    def forward(self, values: np.ndarray) -> np.ndarray:
        return solve_triangular(self.factor, values, lower=True)

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        return solve_triangular(self.factor.T, values, lower=False)


def _ei_graph(model: GPModel, qt: Tensor, qs: Tensor, f_best: float) -> Tensor:
    """Batched EI at (qt, qs) as a differentiable node (one entry per start)."""
    hyper = model.hyperparams
    m = qt.data.size
    d2 = ad.square(qt - model.x[:, 0].reshape(-1, 1)) + ad.square(
        qs - model.x[:, 1].reshape(-1, 1)
    )
    k_cross = hyper.scale2 * ad.exp(d2 * (-1.0 / (2.0 * hyper.length**2)))
    mean = hyper.mean + ad.reshape(ad.matmul(Tensor(model._alpha.reshape(1, -1)), k_cross), (m,))
    v = ad.apply_linear(_LowerTriangularSolve(model._factor), k_cross)
    variance = hyper.scale2 - ad.tensor_sum(ad.square(v), axis=0)
    # Cancellation can push the variance a hair negative near observations;
    # clamp at 0 (slope-0 leaky_relu) before the floored square root.
    s = ad.sqrt(ad.leaky_relu(variance, slope=0.0) + _VARIANCE_FLOOR)
    delta = mean - f_best
    z = delta / s
    big_phi = 0.5 * (1.0 + ad.erf(z * _INV_SQRT_2))
    small_phi = ad.exp(ad.square(z) * -0.5) * _INV_SQRT_2PI
    return delta * big_phi + s * small_phi


def _ei_closed_form(model: GPModel, point: np.ndarray, f_best: float) -> float:
    mean, variance = model.posterior(point)
    return expected_improvement(mean, variance, f_best)


def _newton_polish(model: GPModel, point: np.ndarray, f_best: float, box: SearchBox) -> np.ndarray:
    """Sharpen an ascent result with damped finite-difference Newton steps."""
    h = 1e-5
    best = box.clip_log(point)
    best_value = _ei_closed_form(model, best, f_best)
    for _ in range(6):
        grad = np.zeros(2)
        hess = np.zeros((2, 2))
        offsets = (np.array([h, 0.0]), np.array([0.0, h]))
        center = best_value
        for i, off in enumerate(offsets):
            hi = _ei_closed_form(model, best + off, f_best)
            lo = _ei_closed_form(model, best - off, f_best)
            grad[i] = (hi - lo) / (2 * h)
            hess[i, i] = (hi - 2 * center + lo) / (h * h)
        cross = (
            _ei_closed_form(model, best + offsets[0] + offsets[1], f_best)
            - _ei_closed_form(model, best + offsets[0] - offsets[1], f_best)
            - _ei_closed_form(model, best - offsets[0] + offsets[1], f_best)
            + _ei_closed_form(model, best - offsets[0] - offsets[1], f_best)
        ) / (4 * h * h)
        hess[0, 1] = hess[1, 0] = cross
        # Only trust Newton where the surface is locally concave.
        eigenvalues = np.linalg.eigvalsh(hess)
        if eigenvalues.max() >= 0:
            break
        step = np.linalg.solve(hess, -grad)
        improved = False
        for damping in (1.0, 0.5, 0.25, 0.125):
            candidate = box.clip_log(best + damping * step)
            value = _ei_closed_form(model, candidate, f_best)
            if value > best_value:
                best, best_value, improved = candidate, value, True
                break
        if not improved or float(np.abs(step).max()) < 1e-12:
            break
    return best


def _max_variance_point(model: GPModel, box: SearchBox, resolution: int = 200) -> np.ndarray:
    (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
    t_grid = np.linspace(t_lo, t_hi, resolution)
    s_grid = np.linspace(s_lo, s_hi, resolution)
    grid = np.array([(t, s) for t in t_grid for s in s_grid])
    _, variances = model.posterior_batch(grid)
    return grid[int(np.argmax(variances))]


def propose_candidates(
    model: GPModel, state: BOState, box: SearchBox, k: int, rng: Rng
) -> list:
    """Up to ``k`` log-space points maximizing expected improvement."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    f_best = state.best_psnr
    (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()

    sobol = qmc.Sobol(d=2, scramble=True, seed=int(rng.integers(0, 2**63)))
    unit = sobol.random(_ASCENT_STARTS)
    qt_arr = t_lo + unit[:, 0] * (t_hi - t_lo)
    qs_arr = s_lo + unit[:, 1] * (s_hi - s_lo)
    if state.observations:
        # Warm starts at the observed points: once the posterior collapses
        # onto the objective, EI survives only in a small basin around the
        # incumbent and quasi-random starts alone are likely to miss it.
        seen = np.array([obs.x for obs in state.observations])
        qt_arr = np.concatenate([qt_arr, seen[:, 0]])
        qs_arr = np.concatenate([qs_arr, seen[:, 1]])

    opt = _Adam([qt_arr, qs_arr], _ASCENT_LR)
    for _ in range(_ASCENT_STEPS):
        qt = Tensor(qt_arr, requires_grad=True, name="log_t")
        qs = Tensor(qs_arr, requires_grad=True, name="log_sigma")
        ad.backward(ad.tensor_sum(_ei_graph(model, qt, qs, f_best)))
        opt.step([-qt.grad, -qs.grad])
        np.clip(qt_arr, t_lo, t_hi, out=qt_arr)
        np.clip(qs_arr, s_lo, s_hi, out=qs_arr)

    polished = [
        _newton_polish(model, np.array([t, s]), f_best, box) for t, s in zip(qt_arr, qs_arr)
    ]
    scored = sorted(
        ((p, _ei_closed_form(model, p, f_best)) for p in polished),
        key=lambda pair: -pair[1],
    )
    if scored[0][1] <= 0.0:
        fallback = _max_variance_point(model, box)
        logger.warning(
            "expected improvement is numerically zero everywhere; "
            "falling back to the maximum-variance point (%.3f, %.3f)",
            fallback[0],
            fallback[1],
        )
        return [(float(fallback[0]), float(fallback[1]))]
    kept = []
    for point, _ in scored:
        if len(kept) == k:
            break
        if all(float(np.hypot(*(point - q))) >= _MERGE_RADIUS for q in kept):
            kept.append(point)
    return [(float(p[0]), float(p[1])) for p in kept]


def _evaluate_batch(objective, candidates: list, parallel: int) -> list:
    """PSNR (or None on failure) per (T, sigma) candidate, order-preserving."""
    if parallel > 1 and len(candidates) > 1:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(parallel, len(candidates))
        ) as pool:
            futures = [pool.submit(objective, t, s) for t, s in candidates]
            results = []
            for future in futures:
                try:
                    results.append(float(future.result()))
                except Exception:
                    logger.exception("objective evaluation failed")
                    results.append(None)
            return results
    results = []
    for t, s in candidates:
        try:
            results.append(float(objective(t, s)))
        except Exception:
            logger.exception("objective evaluation failed")
            results.append(None)
    return results


def _record(state: BOState, iteration: int, candidates: list, psnrs: list) -> int:
    successes = 0
    for index, ((t, sigma), psnr_value) in enumerate(zip(candidates, psnrs)):
        status = "failed" if psnr_value is None else "ok"
        if psnr_value is not None:
            state.observations.append(
                GPObservation((math.log(t), math.log(sigma)), psnr_value)
            )
            successes += 1
        best = state.best_psnr if state.observations else None
        state.rows.append(
            BORow(
                iteration,
                index,
                float(t),
                float(sigma),
                math.log(t),
                math.log(sigma),
                psnr_value,
                best,
                status,
            )
        )
    return successes


def bo_loop(
    objective,
    box: SearchBox,
    init: list,
    iterations: int,
    k: int,
    rng: Rng,
    parallel: int = 1,
    priors: GPPriors = None,
    fit_config: FitConfig = None,
    artifacts_dir=None,
) -> tuple:
    """Run init + ``iterations`` rounds of fit/propose/evaluate.

    ``objective`` maps natural-units (T, sigma) to PSNR and must be
    deterministic for the loop to be replayable; with ``parallel`` > 1 it must
    also be picklable.  Returns (state, (T_best, sigma_best)).
    """
    if iterations < 0 or k < 1:
        raise ValueError("iterations must be >= 0 and k >= 1")
    init = list(init)
    if not init:
        raise ValueError("init grid must be non-empty")
    for t, sigma in init:
        if not box.contains(t, sigma):
            raise ValueError(f"init point (T={t}, sigma={sigma}) outside the search box")

    state = BOState()
    if _record(state, 0, init, _evaluate_batch(objective, init, parallel)) == 0:
        raise RuntimeError("all initialization evaluations failed")

    for iteration in range(1, iterations + 1):
        state.iteration = iteration
        model = fit(state.observations, priors, fit_config)
        if artifacts_dir is not None:
            write_landscape_csv(
                model,
                *box.log_bounds(),
                f"{artifacts_dir}/gp_landscape_{iteration:02d}.csv",
            )
        proposals = propose_candidates(model, state, box, k, rng.split(iteration))
        # exp() of a log-space bound can land one ulp outside the box, so
        # clamp the natural-units candidates before evaluating.
        candidates = [
            (
                min(max(math.exp(t), box.t_low), box.t_high),
                min(max(math.exp(s), box.sigma_low), box.sigma_high),
            )
            for t, s in proposals
        ]
        if _record(state, iteration, candidates, _evaluate_batch(objective, candidates, parallel)) == 0:
            raise RuntimeError(f"all candidate evaluations failed at iteration {iteration}")

    if artifacts_dir is not None:
        write_bo_history_csv(state.rows, f"{artifacts_dir}/bo_history.csv")
    t_best, sigma_best = state.best_point
    return state, (
        min(max(t_best, box.t_low), box.t_high),
        min(max(sigma_best, box.sigma_low), box.sigma_high),
    )


def write_bo_history_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "iteration",
                "candidate_index",
                "T",
                "sigma",
                "log_T",
                "log_sigma",
                "psnr",
                "best_psnr_so_far",
                "status",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row.iteration,
                    row.candidate_index,
                    repr(row.t),
                    repr(row.sigma),
                    repr(row.log_t),
                    repr(row.log_sigma),
                    "" if row.psnr is None else repr(float(row.psnr)),
                    "" if row.best_psnr_so_far is None else repr(float(row.best_psnr_so_far)),
                    row.status,
                ]
            )
