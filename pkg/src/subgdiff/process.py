"""Mask-conditioned forward kernels and the subgraph-diffusion reverse step.

Block convention: step t belongs to block ``m(t) + 1`` with
``m(t) = (t - 1) // k`` completed blocks before it.  Blocks 1..m(t) are
collapsed to their expectation state (Phase I); steps k*m+1..t use the
block's fixed mask (Phase II).  At t = k*m + 1 Phase II holds a single step,
so with k = 1 the kernels reduce to the single-step expectation-state model.

Coefficients are per node and depend only on that node's block bit, so each
time step has two cached branches: ``on`` (bit 1) and ``off`` (bit 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .posterior import (
    DegeneratePosteriorError,
    MomentSpec,
    PosteriorParams,
    lemma_reverse_step,
    posterior_from_moments,
)
from .schedule import ConfigError, NoiseSchedule


class BlockBoundaryError(ValueError):
    """Raised when a same-mask transfer would cross a block boundary."""


class ProcessConfig:
    """Expectation probability ``p``, block length ``k`` and the schedule.

    Phase I quantities are precomputed for every number of completed blocks
    m = 0..(T-1)//k.
    """

    def __init__(self, p: float, k: int, schedule: NoiseSchedule):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {p}")
        if not 1 <= k <= schedule.T:
            raise ConfigError(f"k must lie in [1, T={schedule.T}], got {k}")
        self.p = float(p)
        self.k = int(k)
        self.schedule = schedule
        self._logs = schedule.log_survival

        n_blocks = (schedule.T - 1) // self.k
        edges = self.k * np.arange(n_blocks + 1)
        log_blk = self._logs[edges[1:]] - self._logs[edges[:-1]]
        surv = np.exp(log_blk)
        loss = -np.expm1(log_blk)
        alpha = (self.p * np.sqrt(surv) + 1.0 - self.p) ** 2
        abar = np.ones(n_blocks + 1)
        var = np.zeros(n_blocks + 1)
        for j in range(1, n_blocks + 1):
            abar[j] = abar[j - 1] * alpha[j - 1]
            # V_j = alpha_j V_{j-1} + p^2 (1 - B_j); unrolls to the sum form
            var[j] = alpha[j - 1] * var[j - 1] + self.p**2 * loss[j - 1]
        self.block_survival = surv
        self.block_alpha = alpha
        self.phase1_mean_sq = abar
        self.phase1_var = var

    @property
    def T(self) -> int:
        return self.schedule.T

    def blocks_before(self, t):
        return (np.asarray(t) - 1) // self.k

    def _check_t(self, t, lo=1):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise IndexError(f"time step outside [{lo}, {self.T}]: {t}")

    def _phase2(self, t_end, m, s):
        """(G, 1 - G) with G = prod_{i=km+1}^{t_end} (1 - s*beta_i), s in {0, 1}."""
        log_g = np.where(np.asarray(s) > 0, self._logs[t_end] - self._logs[self.k * m], 0.0)
        return np.exp(log_g), -np.expm1(log_g)

    def marginal(self, t, s):
        """(mean multiplier, variance) of q(r_t | r_0) for block bit(s) ``s``."""
        self._check_t(t)
        t = np.asarray(t)
        m = self.blocks_before(t)
        g, g_c = self._phase2(t, m, s)
        return np.sqrt(g * self.phase1_mean_sq[m]), g * self.phase1_var[m] + g_c

    def prev_marginal(self, t, s):
        """(mu2, delta): moments of q(r_{t-1} | r_0) within step t's block."""
        self._check_t(t)
        t = np.asarray(t)
        m = self.blocks_before(t)
        g, g_c = self._phase2(t - 1, m, s)
        return np.sqrt(g * self.phase1_mean_sq[m]), g * self.phase1_var[m] + g_c

    def delta(self, t: int) -> float:
        return float(self.prev_marginal(t, 1)[1])

    def moments(self, t: int, s: int) -> MomentSpec:
        beta = self.schedule.beta(t)
        mu2, var2 = self.prev_marginal(t, s)
        return MomentSpec(
            mu1=math.sqrt(1.0 - s * beta),
            sigma1_sq=s * beta,
            mu2=float(mu2),
            sigma2_sq=float(var2),
        )

    def posterior_on(self, t: int) -> PosteriorParams:
        """Posterior for a node whose block bit is 1 at step t."""
        spec = self.moments(t, 1)
        if spec.sigma2_sq <= 0.0 and t > 1:
            raise DegeneratePosteriorError(f"delta = 0 at t={t} for a diffusing node")
        return posterior_from_moments(spec)


@dataclass(frozen=True)
class TwoPhaseCoefficients:
    mean_coef_on: float
    mean_coef_off: float
    var_on: float
    var_off: float
    delta: float

    def per_node(self, s):
        s = np.asarray(s) > 0
        return (
            np.where(s, self.mean_coef_on, self.mean_coef_off),
            np.where(s, self.var_on, self.var_off),
        )


def masked_step(r_prev, s, beta_t: float, eps):
    r_prev = np.asarray(r_prev, dtype=np.float64)
    s = np.asarray(s)
    if s.ndim == 1 and r_prev.ndim == 2:
        s = s[:, None]
    out = np.sqrt(1.0 - s * beta_t) * r_prev + np.sqrt(s * beta_t) * np.asarray(eps)
    # bit-exact hold for unselected nodes
    return np.where(s > 0, out, r_prev)


def masked_marginal(s_path, sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """Closed form of the lazy chain given the full mask history s_1..s_t."""
    s_path = np.asarray(s_path, dtype=np.float64)
    if s_path.shape != (t,):
        raise ValueError(f"mask path must have length t={t}, got {s_path.shape}")
    gamma_bar = float(np.prod(1.0 - s_path * sched.betas[:t]))
    return math.sqrt(gamma_bar), 1.0 - gamma_bar


def expectation_marginal(cfg: ProcessConfig, t: int) -> tuple[float, float]:
    """Moments of the expectation state at a block boundary t = k*m."""
    if not 1 <= t <= cfg.T:
        raise IndexError(f"time step {t} outside [1, {cfg.T}]")
    if t % cfg.k:
        raise BlockBoundaryError(f"t={t} is not a multiple of k={cfg.k}")
    m = t // cfg.k
    # t = T with k | T lies past the last precomputed block; extend on demand
    if m >= len(cfg.phase1_mean_sq):
        log_blk = cfg._logs[cfg.k * m] - cfg._logs[cfg.k * (m - 1)]
        alpha = (cfg.p * math.exp(0.5 * log_blk) + 1.0 - cfg.p) ** 2
        abar = cfg.phase1_mean_sq[m - 1] * alpha
        var = alpha * cfg.phase1_var[m - 1] - cfg.p**2 * math.expm1(log_blk)
        return math.sqrt(abar), float(var)
    return math.sqrt(cfg.phase1_mean_sq[m]), float(cfg.phase1_var[m])


def kstep_transfer(r_from, s_block, sched: NoiseSchedule, k: int, t_from: int, t_to: int, eps):
    """Same-mask jump from state t_from to t_to inside one block of length k."""
    if not 0 <= t_from < t_to <= sched.T:
        raise ValueError(f"need 0 <= t_from < t_to <= T, got ({t_from}, {t_to})")
    if t_from // k != (t_to - 1) // k:
        raise BlockBoundaryError(f"[{t_from}, {t_to}] crosses a block boundary (k={k})")
    surv = sched.beta_bar(t_to) / sched.beta_bar(t_from)
    s = np.asarray(s_block)
    r_from = np.asarray(r_from, dtype=np.float64)
    if s.ndim == 1 and r_from.ndim == 2:
        s = s[:, None]
    gamma = np.where(s > 0, surv, 1.0)
    out = np.sqrt(gamma) * r_from + np.sqrt(1.0 - gamma) * np.asarray(eps)
    return np.where(s > 0, out, r_from)


def twophase_coefficients(cfg: ProcessConfig, t: int) -> TwoPhaseCoefficients:
    mean_on, var_on = cfg.marginal(t, 1)
    mean_off, var_off = cfg.marginal(t, 0)
    return TwoPhaseCoefficients(
        mean_coef_on=float(mean_on),
        mean_coef_off=float(mean_off),
        var_on=float(var_on),
        var_off=float(var_off),
        delta=cfg.delta(t),
    )


def twophase_forward(cfg: ProcessConfig, r0, s_block, t: int, rng=None, eps=None):
    """Draw r_t ~ q(r_t | r_0) for one molecule given its block mask.

    Pass ``eps`` to fix the noise; otherwise it is drawn from ``rng``.
    Returns ``(r_t, coefficients)``.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    s_block = np.asarray(s_block)
    if s_block.shape != r0.shape[:1]:
        raise ValueError(f"mask length {s_block.shape} != number of nodes {r0.shape[0]}")
    if eps is None:
        eps = rng.standard_normal(r0.shape)
    coeffs = twophase_coefficients(cfg, t)
    mean, var = coeffs.per_node(s_block)
    if r0.ndim == 2:
        mean, var = mean[:, None], var[:, None]
    return mean * r0 + np.sqrt(var) * eps, coeffs


def subgdiff_reverse_step(cfg: ProcessConfig, r_t, s_hat, eps_hat, t: int, z):
    """One ancestral step t -> t-1; nodes with a zero bit are left untouched."""
    r_t = np.asarray(r_t, dtype=np.float64)
    s_hat = np.asarray(s_hat)
    if s_hat.shape != r_t.shape[:1]:
        raise ValueError(f"mask length {s_hat.shape} != number of nodes {r_t.shape[0]}")
    if t == 1:
        z = np.zeros_like(r_t)
    if not np.any(s_hat):
        return r_t.copy()
    stepped = lemma_reverse_step(cfg.posterior_on(t), r_t, eps_hat, z)
    sel = (s_hat > 0)[:, None] if r_t.ndim == 2 else s_hat > 0
    return np.where(sel, stepped, r_t)


def naive_loss_weight(s_t: int, sched: NoiseSchedule, gamma_bar_prev: float, t: int) -> float:
    """Loss weight of the lazy chain that tracks the full mask history.

    With gamma_bar_prev = 1 (no noise yet) the denoising term is undefined and
    the reconstruction-term weight 1 / (2 (1 - beta_t)) is returned instead,
    as for the first DDPM step.
    """
    if not s_t:
        return 0.0
    beta = sched.beta(t)
    if gamma_bar_prev >= 1.0:
        return 1.0 / (2.0 * (1.0 - beta))
    return beta / (2.0 * (1.0 - beta) * (1.0 - gamma_bar_prev))


def expectation_sum(p: float, sched: NoiseSchedule, t: int) -> float:
    """sum_{i<t} (abar_{t-1} / abar_i) beta_i with alpha_i = (p sqrt(1-beta_i) + 1 - p)^2."""
    betas = sched.betas[: t - 1]
    alpha = (p * np.sqrt(1.0 - betas) + 1.0 - p) ** 2
    total = 0.0
    for i in range(t - 1):
        total += float(np.prod(alpha[i + 1 :])) * betas[i]
    return total


def expectation_reverse_step(p: float, sched: NoiseSchedule, r_t, s_hat, eps_hat, t: int, z):
    """Single-step (k = 1) expectation-state sampler written out explicitly."""
    r_t = np.asarray(r_t, dtype=np.float64)
    s = np.asarray(s_hat, dtype=np.float64)
    if s.shape != r_t.shape[:1]:
        raise ValueError("mask length does not match number of nodes")
    if r_t.ndim == 2:
        s = s[:, None]
    if t == 1:
        z = np.zeros_like(r_t)
    beta = sched.beta(t)
    acc = p**2 * expectation_sum(p, sched, t)
    sb = s * beta
    denom = sb + (1.0 - sb) * acc
    if np.any((s > 0) & (acc <= 0.0)) and t > 1:
        raise DegeneratePosteriorError(f"zero expectation variance at t={t}")
    safe = np.where(denom > 0, denom, 1.0)
    eps_coef = np.where(s > 0, sb / (np.sqrt(1.0 - sb) * np.sqrt(safe)), 0.0)
    var = np.where(s > 0, sb * acc / safe, 0.0)
    return r_t / np.sqrt(1.0 - sb) - eps_coef * np.asarray(eps_hat) + np.sqrt(var) * np.asarray(z)
