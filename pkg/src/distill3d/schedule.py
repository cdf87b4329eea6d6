"""DDPM-style noise schedule, timestep sampling, and the forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHTING_RULES = ("uniform", "one_minus_alpha_bar", "snr")
DEFAULT_WEIGHTING = "one_minus_alpha_bar"
DEFAULT_T_RANGE = (0.02, 0.98)


@dataclass
class NoiseSchedule:
    """Betas and their cumulative products; timesteps are 1-based in [1, T]."""

    num_steps: int
    betas: np.ndarray        # (T,)
    alpha_bars: np.ndarray   # (T,) strictly decreasing, in (0, 1)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.betas.shape != (self.num_steps,) or self.alpha_bars.shape != (self.num_steps,):
            raise ValueError("schedule arrays must have length num_steps")
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)
                and np.all(np.diff(self.betas) > 0)):
            raise ValueError("betas must be strictly increasing in (0, 1)")
        if not (np.all(np.diff(self.alpha_bars) < 0) and self.alpha_bars[-1] > 0):
            raise ValueError("alpha_bars must be strictly decreasing and positive")

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")
        return float(self.alpha_bars[t - 1])

    def t_bounds(self, t_range: tuple[float, float] = DEFAULT_T_RANGE) -> tuple[int, int]:
        lo = max(1, int(np.ceil(t_range[0] * self.num_steps)))
        hi = min(self.num_steps, int(np.floor(t_range[1] * self.num_steps)))
        if lo > hi:
            raise ValueError(f"empty timestep range {t_range}")
        return lo, hi


def linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 2e-2) -> NoiseSchedule:
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, num_steps)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_steps, betas, alpha_bars)


@dataclass
class TimestepSample:
    """A drawn (t, noise, loss weight) triple."""

    t: int
    eps: np.ndarray
    weight: float

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("timestep weight must be positive")


def timestep_weight(schedule: NoiseSchedule, t: int, rule: str = DEFAULT_WEIGHTING) -> float:
    ab = schedule.alpha_bar(t)
    if rule == "uniform":
        return 1.0
    if rule == "one_minus_alpha_bar":
        return 1.0 - ab
    if rule == "snr":
        return (1.0 - ab) / np.sqrt(ab)
    raise ValueError(f"unknown weighting rule {rule!r}; options: {WEIGHTING_RULES}")


def sample_timestep(schedule: NoiseSchedule, shape: tuple[int, ...],
                    rng: np.random.Generator,
                    t_range: tuple[float, float] = DEFAULT_T_RANGE,
                    weighting: str = DEFAULT_WEIGHTING) -> TimestepSample:
    lo, hi = schedule.t_bounds(t_range)
    t = int(rng.integers(lo, hi + 1))
    eps = rng.standard_normal(shape)
    return TimestepSample(t, eps, timestep_weight(schedule, t, weighting))


def add_noise(clean: np.ndarray, sample: TimestepSample, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != sample.eps.shape:
        raise ValueError(f"latent shape {clean.shape} != noise shape {sample.eps.shape}")
    ab = schedule.alpha_bar(sample.t)
    return np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * sample.eps
