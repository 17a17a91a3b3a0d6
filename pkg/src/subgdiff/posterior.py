"""Gaussian posterior for one reverse step, from the forward moments.

Given q(r_t | r_{t-1}) = N(mu1 * r_{t-1}, sigma1^2) and
q(r_{t-1} | r_0) = N(mu2 * r_0, sigma2^2), the posterior q(r_{t-1} | r_t, r_0)
is Gaussian.  Written in noise-prediction form its mean is
``(r_t - eps_coef * eps) / mu1`` where ``eps`` is the standardized noise in
r_t = mu1*mu2*r_0 + sqrt(mu1^2 sigma2^2 + sigma1^2) * eps.

All quantities are scalar per node; vector helpers broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule


class DegeneratePosteriorError(ArithmeticError):
    """Raised when a posterior quantity divides by a zero variance."""


@dataclass(frozen=True)
class MomentSpec:
    mu1: float
    sigma1_sq: float
    mu2: float
    sigma2_sq: float

    def __post_init__(self):
        if not self.mu1 > 0.0:
            raise ValueError(f"mu1 must be positive, got {self.mu1}")
        if self.sigma1_sq < 0.0 or self.sigma2_sq < 0.0:
            raise ValueError("variances must be non-negative")
        if self.sigma1_sq + self.mu1**2 * self.sigma2_sq <= 0.0:
            raise ValueError("marginal variance sigma1^2 + mu1^2 sigma2^2 must be positive")


@dataclass(frozen=True)
class PosteriorParams:
    inv_mu1: float
    eps_coef: float
    noise_std: float
    marginal_mean_coef: float
    marginal_std: float
    _loss_weight: float | None = None

    @property
    def loss_weight(self) -> float:
        """sigma1^2 / (2 mu1^2 sigma2^2); undefined when sigma2^2 = 0."""
        if self._loss_weight is None:
            raise DegeneratePosteriorError("loss weight undefined: sigma2^2 = 0")
        return self._loss_weight

    @property
    def variance(self) -> float:
        return self.noise_std**2

    def mean(self, r_t, eps):
        return self.inv_mu1 * (np.asarray(r_t) - self.eps_coef * np.asarray(eps))

    def mean_from_r0(self, r_t, r0):
        """Posterior mean written in terms of r_0 instead of the noise."""
        eps = (np.asarray(r_t) - self.marginal_mean_coef * np.asarray(r0)) / self.marginal_std
        return self.mean(r_t, eps)


def posterior_from_moments(m: MomentSpec) -> PosteriorParams:
    s1, s2 = m.sigma1_sq, m.sigma2_sq
    denom = m.mu1**2 * s2 + s1
    root = math.sqrt(denom)
    scale = 2.0 * m.mu1**2 * s2
    weight = s1 / scale if scale > 0.0 else None
    return PosteriorParams(
        inv_mu1=1.0 / m.mu1,
        eps_coef=s1 / root,
        noise_std=math.sqrt(s1) * math.sqrt(s2) / root,
        marginal_mean_coef=m.mu1 * m.mu2,
        marginal_std=root,
        _loss_weight=weight,
    )


def lemma_reverse_step(pp: PosteriorParams, r_t, eps_hat, z) -> np.ndarray:
    r_t, eps_hat, z = (np.asarray(a, dtype=np.float64) for a in (r_t, eps_hat, z))
    if not (r_t.shape == eps_hat.shape == z.shape):
        raise ValueError(
            f"shape mismatch: r_t {r_t.shape}, eps_hat {eps_hat.shape}, z {z.shape}"
        )
    return pp.inv_mu1 * (r_t - pp.eps_coef * eps_hat) + pp.noise_std * z


def ddpm_forward_marginal(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """(sqrt(alpha_bar_t), 1 - alpha_bar_t) for plain DDPM."""
    if not 1 <= t <= sched.T:
        raise IndexError(f"time step {t} outside [1, {sched.T}]")
    return math.sqrt(sched.beta_bar(t)), sched.one_minus_beta_bar(t)


def ddpm_moments(sched: NoiseSchedule, t: int) -> MomentSpec:
    """Lemma inputs that reproduce the DDPM posterior at step t."""
    beta = sched.beta(t)
    ab_prev = sched.beta_bar(t - 1)
    return MomentSpec(
        mu1=math.sqrt(1.0 - beta),
        sigma1_sq=beta,
        mu2=math.sqrt(ab_prev),
        sigma2_sq=sched.one_minus_beta_bar(t - 1),
    )
