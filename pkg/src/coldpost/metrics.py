"""Reconstruction quality (PSNR) and regression calibration (UCE) measures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import Image


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def psnr(estimate, reference, max_value: float = 1.0) -> float:
    """10*log10(max_value^2 / MSE); +inf when the images coincide."""
    a, b = _pixels(estimate), _pixels(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not max_value > 0:
        raise ValueError(f"max_value must be > 0, got {max_value}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def error_map(estimate, reference) -> Image:
    """Pixelwise squared error (estimate - reference)^2."""
    a, b = _pixels(estimate), _pixels(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return Image((a - b) ** 2)


@dataclass
class CalibrationBins:
    """Equal-count variance bins with per-bin mean variance / mean squared error."""

    edges: np.ndarray  # n_bins + 1 strictly increasing positions (rank space)
    mean_variance: np.ndarray
    mean_sq_error: np.ndarray
    counts: np.ndarray

    def uce(self) -> float:
        total = int(self.counts.sum())
        weights = self.counts / total
        return float(np.sum(weights * np.abs(self.mean_variance - self.mean_sq_error)))


def calibration_bins(squared_error, variance, n_bins: int = 10) -> CalibrationBins:
    """Bin pixels by predictive variance into ``n_bins`` equal-count bins.

    Binning is by rank (quantile) so heavy-tailed variance maps spread evenly;
    ties are broken by pixel order, which keeps every bin non-empty.
    """
    err = _pixels(squared_error).ravel()
    var = _pixels(variance).ravel()
    if err.shape != var.shape:
        raise ValueError(f"shape mismatch: {err.shape} vs {var.shape}")
    if var.min() < 0:
        raise ValueError("variance must be non-negative")
    if n_bins < 1 or n_bins > err.size:
        raise ValueError(f"n_bins must be in [1, {err.size}], got {n_bins}")
    order = np.argsort(var, kind="stable")
    # Equal-count split points in rank space.
    edges = np.round(np.linspace(0, err.size, n_bins + 1)).astype(np.int64)
    mean_var = np.empty(n_bins)
    mean_err = np.empty(n_bins)
    counts = np.empty(n_bins, dtype=np.int64)
    for b in range(n_bins):
        idx = order[edges[b] : edges[b + 1]]
        counts[b] = idx.size
        mean_var[b] = var[idx].mean()
        mean_err[b] = err[idx].mean()
    return CalibrationBins(edges.astype(np.float64), mean_var, mean_err, counts)


def regression_uce(squared_error, variance, n_bins: int = 10) -> float:
    """Count-weighted |mean variance - mean squared error| over variance bins."""
    return calibration_bins(squared_error, variance, n_bins).uce()


def write_calibration_csv(bins: CalibrationBins, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_index", "mean_variance", "mean_sq_error", "count"])
        for i in range(len(bins.counts)):
            writer.writerow(
                [
                    i,
                    repr(float(bins.mean_variance[i])),
                    repr(float(bins.mean_sq_error[i])),
                    int(bins.counts[i]),
                ]
            )
