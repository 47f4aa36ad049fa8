"""Pairwise and distributional quality metrics: PSNR, windowed SSIM,
Fréchet feature distance, and boundary consistency. All pure numpy, no
state, no RNG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionMismatch,
    EigenFailure,
    FrameTooSmall,
    ShapeMismatch,
    TooFewSamples,
)

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"psnr shapes {x.shape} vs {y.shape}")
    if max_val <= 0:
        raise ShapeMismatch("max_val must be > 0")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(max_val * max_val / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gaussian_window()


def _ssim_frame(x: np.ndarray, y: np.ndarray) -> float:
    w = _WINDOW
    k = SSIM_WINDOW
    wx = sliding_window_view(x, (k, k))
    wy = sliding_window_view(y, (k, k))
    mu_x = np.einsum("ijab,ab->ij", wx, w)
    mu_y = np.einsum("ijab,ab->ij", wy, w)
    xx = np.einsum("ijab,ab->ij", wx * wx, w) - mu_x * mu_x
    yy = np.einsum("ijab,ab->ij", wy * wy, w) - mu_y * mu_y
    xy = np.einsum("ijab,ab->ij", wx * wy, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Windowed SSIM per frame, averaged over frames and window positions.

    Inputs are clips (S, H, W) or single frames (H, W) with values in [0, 1].
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim shapes {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"ssim expects (S, H, W), got {x.shape}")
    if x.shape[1] < SSIM_WINDOW or x.shape[2] < SSIM_WINDOW:
        raise FrameTooSmall(f"frame {x.shape[1:]} smaller than "
                            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_frame(xf, yf) for xf, yf in zip(x, y)]))


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def gaussian_fit(features) -> GaussianStats:
    """Sample mean and unbiased sample covariance of a set of vectors."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"gaussian_fit expects (n, d), got {arr.shape}")
    n = arr.shape[0]
    if n < 2:
        raise TooFewSamples(f"need >= 2 samples, got {n}")
    mean = arr.mean(axis=0)
    centered = arr - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mean=mean, cov=cov, count=n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    try:
        vals, vecs = np.linalg.eigh(mat)
    except np.linalg.LinAlgError as e:
        raise EigenFailure(str(e)) from None
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), computed by
    symmetric eigendecomposition with negative eigenvalues clamped to zero
    (sample covariances at desk scale are often rank deficient).
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"{a.mean.shape} vs {b.mean.shape}")
    sa = 0.5 * (a.cov + a.cov.T)
    sb = 0.5 * (b.cov + b.cov.T)
    root_a = _psd_sqrt(sa)
    inner = _psd_sqrt(root_a @ sb @ root_a)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def boundary_consistency(cond_clip: np.ndarray, pred_clip: np.ndarray) -> float:
    """Mean absolute difference between the last conditioning frame and the
    first predicted frame."""
    cond = np.asarray(cond_clip, dtype=np.float64)
    pred = np.asarray(pred_clip, dtype=np.float64)
    if cond.ndim != 3 or pred.ndim != 3 or cond.shape[1:] != pred.shape[1:]:
        raise ShapeMismatch(f"boundary shapes {cond.shape} vs {pred.shape}")
    return float(np.mean(np.abs(cond[-1] - pred[0])))
