"""Variance schedules and the cumulative products derived from them.

Time steps are 1-based in every public function (t = 1..T), matching the
usual diffusion notation; arrays are stored 0-based with ``arr[t - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid schedule or process configuration."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "sigmoid"

    def validate(self) -> None:
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ConfigError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"({self.beta_start}, {self.beta_end})"
            )
        if self.kind not in ("sigmoid", "linear"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta series with precomputed cumulative products.

    ``one_minus_beta_cumprod[t - 1]`` is prod_{i<=t} (1 - beta_i). Because the
    plain DDPM alpha-bar is the same product, ``ddpm_alpha_bar`` aliases it.
    """

    betas: np.ndarray
    one_minus_beta_cumprod: np.ndarray = field(repr=False)
    config: ScheduleConfig | None = None
    log_survival: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # sum of log1p(-beta) keeps 1 - beta_bar accurate when beta_bar ~ 1
        logs = np.concatenate(([0.0], np.cumsum(np.log1p(-np.asarray(self.betas)))))
        logs.setflags(write=False)
        object.__setattr__(self, "log_survival", logs)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def ddpm_alpha_bar(self) -> np.ndarray:
        return self.one_minus_beta_cumprod

    def beta(self, t: int) -> float:
        _check_t(t, self.T)
        return float(self.betas[t - 1])

    def beta_bar(self, t: int) -> float:
        """prod_{i<=t}(1 - beta_i), with beta_bar(0) = 1."""
        if t == 0:
            return 1.0
        _check_t(t, self.T)
        return float(self.one_minus_beta_cumprod[t - 1])

    def one_minus_beta_bar(self, t: int) -> float:
        """1 - beta_bar(t) without cancellation."""
        if t != 0:
            _check_t(t, self.T)
        return float(-np.expm1(self.log_survival[t]))

    def survival_complement(self, t_from, t_to):
        """1 - prod_{t_from < i <= t_to} (1 - beta_i), elementwise and accurate."""
        return -np.expm1(self.log_survival[t_to] - self.log_survival[t_from])

    def beta_bar_array(self) -> np.ndarray:
        """Cumulative product with the t=0 entry prepended (length T + 1)."""
        return np.concatenate(([1.0], self.one_minus_beta_cumprod))


def _check_t(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise IndexError(f"time step {t} outside [1, {T}]")


def _sigmoid_betas(T: int, start: float, end: float) -> np.ndarray:
    x = np.linspace(-6.0, 6.0, T)
    s = 1.0 / (1.0 + np.exp(-x))
    lo, hi = 1.0 / (1.0 + np.exp(6.0)), 1.0 / (1.0 + np.exp(-6.0))
    unit = (s - lo) / (hi - lo)
    # force exact endpoints; rounding in the rescale can leave ~1e-17 residue
    unit[0], unit[-1] = 0.0, 1.0
    return start + (end - start) * unit


def build_schedule(cfg: ScheduleConfig) -> NoiseSchedule:
    cfg.validate()
    T = int(cfg.T)
    if T == 1:
        betas = np.array([cfg.beta_start], dtype=np.float64)
    elif cfg.kind == "linear":
        betas = np.linspace(cfg.beta_start, cfg.beta_end, T, dtype=np.float64)
    else:
        betas = _sigmoid_betas(T, cfg.beta_start, cfg.beta_end)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError("betas must lie strictly inside (0, 1)")
    cumprod = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    cumprod.setflags(write=False)
    return NoiseSchedule(betas=betas, one_minus_beta_cumprod=cumprod, config=cfg)


def schedule_from_betas(betas) -> NoiseSchedule:
    """Wrap an explicit beta sequence (used by tests and small examples)."""
    betas = np.array(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ConfigError("betas must be a non-empty 1-D sequence")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError("betas must lie strictly inside (0, 1)")
    cumprod = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    cumprod.setflags(write=False)
    return NoiseSchedule(betas=betas, one_minus_beta_cumprod=cumprod)


def block_survival(sched: NoiseSchedule, k: int, j: int) -> float:
    """prod of (1 - beta_i) over the j-th block of k steps."""
    return sched.beta_bar(k * j) / sched.beta_bar(k * (j - 1))


def block_alpha(sched: NoiseSchedule, p: float, k: int, j: int) -> float:
    """Expectation-state per-block factor (p*sqrt(block survival) + 1 - p)^2."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p}")
    n_blocks = sched.T // k
    if not 1 <= j <= n_blocks:
        raise IndexError(f"block index {j} outside [1, {n_blocks}]")
    return (p * np.sqrt(block_survival(sched, k, j)) + 1.0 - p) ** 2
