"""Likelihood and divergence terms shared by the models."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

LOG_2PI = math.log(2.0 * math.pi)


def kl_standard_normal(means, stds) -> Tensor:
    """KL(N(means, stds^2) || N(0, I)) summed over every entry."""
    means, stds = ad.as_tensor(means), ad.as_tensor(stds)
    if means.shape != stds.shape:
        raise ShapeError(f"means {means.shape} and stds {stds.shape} differ")
    if np.any(stds.data <= 0):
        raise DomainError("standard deviations must be positive")
    return 0.5 * (ad.square(means) + ad.square(stds) - 1.0 - 2.0 * ad.log(stds)).sum()


def gaussian_nll(true_actions, predicted_means) -> Tensor:
    """-log N(a; a_hat, I) summed over every entry."""
    a, m = ad.as_tensor(true_actions), ad.as_tensor(predicted_means)
    if a.shape != m.shape:
        raise ShapeError(f"actions {a.shape} and predictions {m.shape} differ")
    return 0.5 * ad.square(a - m).sum() + 0.5 * a.size * LOG_2PI


def mse(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return ad.square(a - b).mean()
