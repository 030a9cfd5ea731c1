"""Diagonal Gaussians over body parameters and multi-input shape fusion.

Fusing per-input shape posteriors multiplies their densities; for diagonal
Gaussians under a flat shape prior that is precision-weighted averaging:

    S = (sum_n 1/var_n)^-1        m = S * sum_n mu_n / var_n

computed in precision space with a small floor for numerical robustness.
Pose distributions are never fused across inputs — only the subject's
shape is assumed fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PRECISION_FLOOR = 1e-12


@dataclass
class GaussianDiag:
    """Mean vector plus per-dimension variance; the unit of all probabilistic outputs."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError("mean and variance must be 1-D with matching shape")
        if not np.all(np.isfinite(self.mean)) or not np.all(np.isfinite(self.var)):
            raise ValueError("mean and variance must be finite")
        if np.any(self.var <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class PredictionSet:
    """Per-input network output: pose and shape distributions plus the
    deterministic global rotation and weak-perspective camera heads."""

    pose: GaussianDiag
    shape: GaussianDiag
    global_rot: np.ndarray  # (3,) axis-angle
    camera: np.ndarray      # (3,) [scale, tx, ty]

    def __post_init__(self):
        self.global_rot = np.asarray(self.global_rot, dtype=np.float64)
        self.camera = np.asarray(self.camera, dtype=np.float64)
        if self.global_rot.shape != (3,) or self.camera.shape != (3,):
            raise ValueError("global rotation and camera must be 3-vectors")
        if not self.camera[0] > 0:
            raise ValueError("camera scale must be positive")


def fuse_shapes(dists: list) -> GaussianDiag:
    """Product-of-Gaussians combination of shape distributions.

    The fused variance never exceeds any input variance per dimension; a
    single input is returned unchanged.
    """
    if not dists:
        raise ValueError("need at least one distribution to fuse")
    dim = dists[0].dim
    for d in dists:
        if d.dim != dim:
            raise ValueError("all distributions must share one dimension")
    if len(dists) == 1:
        return GaussianDiag(dists[0].mean.copy(), dists[0].var.copy())

    precisions = np.stack([1.0 / d.var for d in dists])
    precisions = np.maximum(precisions, PRECISION_FLOOR)
    total_precision = precisions.sum(axis=0)
    fused_var = 1.0 / total_precision
    fused_mean = fused_var * (precisions * np.stack([d.mean for d in dists])).sum(axis=0)
    return GaussianDiag(fused_mean, fused_var)


def reparam_sample(mean, var, noise):
    """mu + sqrt(var) * eps with caller-supplied noise; differentiable in
    mean and variance, deterministic given eps."""
    if ad.value_of(mean).shape[-1] != np.asarray(noise).shape[-1]:
        raise ValueError("noise dimension must match the distribution")
    return mean + ad.sqrt(var) * noise


def gaussian_nll(mean, var, target):
    """Sum_i [ log(2 pi var_i) + (target_i - mean_i)^2 / var_i ].

    The proportional form of the Gaussian negative log-likelihood, used
    directly as the training loss; adaptive weighting by the predicted
    variance is what lets occluded inputs train stably.
    """
    if ad.value_of(mean).shape != np.asarray(target).shape:
        raise ValueError("target dimension must match the distribution")
    if isinstance(var, np.ndarray) and np.any(var <= 0):
        raise ValueError("variances must be positive")
    resid = target - mean
    return ad.sum_(ad.log(2.0 * np.pi * var) + ad.square(resid) / var)


# thin object-style wrappers over the functional forms

def sample_reparam(dist: GaussianDiag, noise: np.ndarray) -> np.ndarray:
    return np.asarray(reparam_sample(dist.mean, dist.var, np.asarray(noise, dtype=np.float64)))


def nll_terms(dist: GaussianDiag, target: np.ndarray) -> float:
    return float(gaussian_nll(dist.mean, dist.var, np.asarray(target, dtype=np.float64)))
