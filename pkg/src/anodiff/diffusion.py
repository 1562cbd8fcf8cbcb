"""Gaussian diffusion core: noise schedule plus forward/reverse kernels.

Conventions used throughout the package:

- Images are plain numpy arrays, ``(H, W)`` for a single image or ``(B, H, W)``
  for a batch. Clean images live in [0, 1]; noised latents are unconstrained.
- Timesteps are 1-based, ``t in [1, t_max]``, and ``alpha_bar[0] == 1`` is the
  defined edge case. ``t`` may be a scalar or an integer array of shape ``(B,)``
  to noise each batch row to its own level.
- Schedule tables are float64; image tensors keep their own dtype (float32 in
  training, float64 in numerical tests).
- Stochastic ops take an explicit ``numpy.random.Generator``. For batches, a
  sequence of generators (one per row) may be passed instead so every row owns
  an independent stream.

Single forward step:   q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)
Collapsed forward:     q(x_t | x_0)     = N(sqrt(abar_t) x_0, (1-abar_t) I)
Reverse step:          p(x_{t-1} | x_t) = N(mu(x_t, eps_hat), pvar_t I)
  with mu = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
  and  pvar_t = (1-abar_{t-1})/(1-abar_t) * beta_t   (pvar_1 := beta_1)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _standard_normal(shape, rng, dtype) -> np.ndarray:
    """Draw N(0,1) noise; rng is one Generator or one Generator per batch row."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape, dtype=dtype)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(
            f"need one generator per batch row: got {len(rngs)} for batch {shape[0]}"
        )
    return np.stack([g.standard_normal(shape[1:], dtype=dtype) for g in rngs])


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed diffusion tables, 1-based (index 0 is the defined edge).

    beta[t] is the per-step variance, alpha[t] = 1 - beta[t], alpha_bar[t] the
    cumulative product of alpha, posterior_var[t] the fixed reverse variance.
    """

    t_max: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    # -- validation helpers -------------------------------------------------

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"timestep must be integer, got dtype {t.dtype}")
        if np.any(t < 1) or np.any(t > self.t_max):
            raise ValueError(f"timestep {t} outside [1, {self.t_max}]")

    def _coef(self, table: np.ndarray, t, x: np.ndarray) -> np.ndarray:
        """table[t] shaped to broadcast against x, cast to x.dtype."""
        c = table[np.asarray(t)]
        if c.ndim > 0:
            c = c.reshape(c.shape + (1,) * (x.ndim - c.ndim))
        return c.astype(x.dtype)

    # -- kernels ------------------------------------------------------------

    def forward_step(self, x_prev: np.ndarray, t, rng) -> np.ndarray:
        """One forward noising step: sqrt(1-beta_t) x_prev + sqrt(beta_t) z."""
        self.check_t(t)
        x_prev = np.asarray(x_prev)
        z = _standard_normal(x_prev.shape, rng, x_prev.dtype)
        a = self._coef(np.sqrt(1.0 - self.beta), t, x_prev)
        b = self._coef(np.sqrt(self.beta), t, x_prev)
        return a * x_prev + b * z

    def forward_to(self, x0: np.ndarray, t, rng) -> tuple[np.ndarray, np.ndarray]:
        """Jump straight to level t; returns (x_t, eps) with the noise realization."""
        self.check_t(t)
        x0 = np.asarray(x0)
        eps = _standard_normal(x0.shape, rng, x0.dtype)
        a = self._coef(np.sqrt(self.alpha_bar), t, x0)
        b = self._coef(np.sqrt(1.0 - self.alpha_bar), t, x0)
        return a * x0 + b * eps, eps

    def predict_mu(self, x_t: np.ndarray, t, eps_hat: np.ndarray) -> np.ndarray:
        """Posterior mean estimate from a noise prediction."""
        self.check_t(t)
        x_t = np.asarray(x_t)
        eps_hat = np.asarray(eps_hat)
        if x_t.shape != eps_hat.shape:
            raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
        inv_sqrt_alpha = self._coef(1.0 / np.sqrt(self.alpha), t, x_t)
        eps_coef = self._coef(self.beta / np.sqrt(1.0 - self.alpha_bar), t, x_t)
        return inv_sqrt_alpha * (x_t - eps_coef * eps_hat)

    def reverse_step(self, x_t: np.ndarray, t, eps_hat: np.ndarray, rng) -> np.ndarray:
        """Sample x_{t-1}; the final step t=1 returns the mean (no noise added)."""
        mu = self.predict_mu(x_t, t, eps_hat)
        t_arr = np.asarray(t)
        if t_arr.ndim == 0 and int(t_arr) == 1:
            return mu
        z = _standard_normal(mu.shape, rng, mu.dtype)
        sigma = self._coef(np.sqrt(self.posterior_var), t, mu)
        if t_arr.ndim > 0:
            # rows at t=1 take the deterministic mean
            last = (t_arr == 1).reshape(t_arr.shape + (1,) * (mu.ndim - t_arr.ndim))
            sigma = np.where(last, np.zeros_like(sigma), sigma)
        return mu + sigma * z


def make_schedule(t_max: int, beta_1: float, beta_T: float) -> NoiseSchedule:
    """Linear variance schedule from beta_1 up to beta_T over t_max steps."""
    if t_max < 2:
        raise ValueError(f"t_max must be >= 2, got {t_max}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"require 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    beta = np.empty(t_max + 1, dtype=np.float64)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_1, beta_T, t_max)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] = 1 gives the abar_0 = 1 edge
    posterior_var = np.empty_like(beta)
    posterior_var[0] = 0.0
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    posterior_var[1] = beta[1]
    return NoiseSchedule(
        t_max=t_max,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
    )


def simple_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Pixel-mean squared error between true and predicted noise."""
    eps = np.asarray(eps)
    eps_hat = np.asarray(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    d = eps.astype(np.float64) - eps_hat.astype(np.float64)
    return float(np.mean(d * d))
