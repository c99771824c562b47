"""Gaussian diffusion on image latents with semantic and textual guidance.

Standard variance-preserving forward process and noise-prediction
objective; ancestral reverse sampling uses the posterior variance
beta_t * (1 - abar_{t-1}) / (1 - abar_t), so the final step is
deterministic.
"""

from __future__ import annotations

import numpy as np

from guidegen import autodiff as ad
from guidegen.schedules import NoiseSchedule, alpha_bar_of

__all__ = ["q_sample", "loss_lfg", "sample_lfg", "posterior_sigma2"]


def q_sample(z0: np.ndarray, t: int, schedule: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """Closed-form corruption: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    bar = alpha_bar_of(schedule, t)
    return np.sqrt(bar) * z0 + np.sqrt(1.0 - bar) * eps


def loss_lfg(batch, denoiser, schedule: NoiseSchedule, rng: np.random.Generator) -> "ad.Tensor":
    """Noise-prediction MSE with uniform timesteps, averaged over the batch.

    Each batch entry is (z0, semantics, prompt); semantics must already be
    resampled to the latent resolution by the caller.
    """
    terms = []
    for z0, semantics, prompt in batch:
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(np.shape(z0))
        z_t = q_sample(z0, t, schedule, eps)
        pred = denoiser(z_t, t, semantics, prompt)
        if not isinstance(pred, ad.Tensor):
            pred = ad.Tensor(pred)
        if pred.shape != np.shape(z0):
            raise ValueError(f"denoiser output {pred.shape} != latent shape {np.shape(z0)}")
        diff = ad.sub(pred, ad.Tensor(eps))
        terms.append(ad.mean_(ad.mul(diff, diff)))
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    return ad.affine(total, 1.0 / len(terms), 0.0)


def posterior_sigma2(schedule: NoiseSchedule, t: int) -> float:
    """Reverse-step variance; zero at t=1 because abar_0 = 1."""
    beta = schedule.beta(t)
    bar_t = alpha_bar_of(schedule, t)
    bar_prev = alpha_bar_of(schedule, t - 1)
    return beta * (1.0 - bar_prev) / (1.0 - bar_t)


def sample_lfg(denoiser, semantics, prompt, schedule: NoiseSchedule,
               rng: np.random.Generator, dims, fixed_beta_variance: bool = False,
               trace_hook=None) -> np.ndarray:
    """Ancestral reverse sampling from unit Gaussian noise.

    dims is the latent shape [C, h, w, d]. With ``fixed_beta_variance`` the
    reverse noise uses beta_t instead of the posterior variance. The
    ``trace_hook``, when given, receives (t, z_t) after every step.
    """
    dims = tuple(dims)
    z = rng.standard_normal(dims)
    for t in range(schedule.T, 0, -1):
        eps_hat = denoiser(z, t, semantics, prompt)
        eps_hat = eps_hat.data if isinstance(eps_hat, ad.Tensor) else np.asarray(eps_hat)
        if eps_hat.shape != dims:
            raise ValueError(f"denoiser output {eps_hat.shape} != {dims}")
        beta = schedule.beta(t)
        bar_t = alpha_bar_of(schedule, t)
        mean = (z - (beta / np.sqrt(1.0 - bar_t)) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            sigma2 = beta if fixed_beta_variance else posterior_sigma2(schedule, t)
            z = mean + np.sqrt(sigma2) * rng.standard_normal(dims)
        else:
            z = mean
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"sampler state non-finite at step t={t}")
        if trace_hook is not None:
            trace_hook(t, z)
    return z
