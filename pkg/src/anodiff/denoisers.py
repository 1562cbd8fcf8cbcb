"""Noise predictors: the behavioral contract, the trainable U-Net wrapper, and
an exact analytic predictor for Gaussian-distributed data.

A denoiser maps a noised latent and its timestep to an estimate of the noise
that produced it. ``predict_eps`` accepts a single image ``(H, W)`` with an int
timestep, or a batch ``(B, H, W)`` with a scalar or ``(B,)`` timestep, and
returns the same shape. Predictions are deterministic and never mutate state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .diffusion import NoiseSchedule
from .nn.unet import TinyUNet


@runtime_checkable
class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray: ...


def _as_batch(x_t: np.ndarray) -> tuple[np.ndarray, bool]:
    x_t = np.asarray(x_t)
    if x_t.ndim == 2:
        return x_t[None], True
    if x_t.ndim == 3:
        return x_t, False
    raise ValueError(f"expected (H, W) or (B, H, W), got {x_t.shape}")


class UNetDenoiser:
    """Adapts a TinyUNet to the denoiser contract."""

    def __init__(self, net: TinyUNet):
        self.net = net

    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        xb, squeeze = _as_batch(x_t)
        out = self.net.forward(xb, t)
        return out[0] if squeeze else out


@dataclass(frozen=True)
class AnalyticGaussianDenoiser:
    """Exact conditional expectation E[eps | x_t] when the clean data follow
    an isotropic Gaussian N(mu0, sigma0_sq * I).

    From x_t = sqrt(abar) x0 + sqrt(1-abar) eps, the posterior mean of x0 is

        E[x0 | x_t] = (sqrt(abar) sigma0_sq x_t + (1-abar) mu0)
                      / (abar sigma0_sq + 1 - abar)

    and the noise estimate follows by inverting the forward map:

        E[eps | x_t] = (x_t - sqrt(abar) E[x0 | x_t]) / sqrt(1-abar).

    With sigma0_sq = 0 the data are a point mass at mu0 and the denoiser
    attributes every deviation from sqrt(abar) mu0 to noise. Because the whole
    pipeline downstream only consumes eps predictions, this object lets tests
    exercise every consumer without any model error.
    """

    mu0: np.ndarray
    sigma0_sq: float
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.sigma0_sq < 0:
            raise ValueError("sigma0_sq must be non-negative")

    def posterior_x0(self, x_t: np.ndarray, t) -> np.ndarray:
        self.schedule.check_t(t)
        abar = self.schedule.alpha_bar[int(t)] if np.ndim(t) == 0 else \
            self.schedule.alpha_bar[np.asarray(t)].reshape(-1, 1, 1)
        mu0 = np.asarray(self.mu0)
        num = np.sqrt(abar) * self.sigma0_sq * x_t + (1.0 - abar) * mu0
        den = abar * self.sigma0_sq + 1.0 - abar
        return num / den

    def predict_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        xb, squeeze = _as_batch(x_t)
        self.schedule.check_t(t)
        abar = self.schedule.alpha_bar[int(t)] if np.ndim(t) == 0 else \
            self.schedule.alpha_bar[np.asarray(t)].reshape(-1, 1, 1)
        x0_hat = self.posterior_x0(xb, t)
        eps = (xb - np.sqrt(abar) * x0_hat) / np.sqrt(1.0 - abar)
        eps = eps.astype(xb.dtype, copy=False)
        return eps[0] if squeeze else eps
