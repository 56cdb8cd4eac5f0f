"""Variance schedules, forward noising and inversion-noise statistics.

Indexing: ``alpha_bars[t]`` is the cumulative product of ``1 - beta_i`` for
``i = 1..t`` with ``alpha_bars[0] = 1``. A DDIM inversion step with a unit
Gaussian noise estimate maps ``z_t`` to ``z_{t+1}``; after ``t + 1`` steps
from ``z_0`` the result is ``signal * z_0 + noise * e`` with ``e ~ N(0, I)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, as_latent


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InvalidArgument("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise InvalidArgument("every beta must lie in (0, 1)")
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if alpha_bars.shape != (betas.size + 1,) or alpha_bars[0] != 1.0:
            raise InvalidArgument("alpha_bars must have T + 1 entries starting at 1")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.size

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas=betas, alpha_bars=alpha_bars)

    def _check_t(self, t: int, lo: int, hi: int) -> int:
        if not lo <= int(t) <= hi:
            raise InvalidArgument(f"timestep {t} outside [{lo}, {hi}]")
        return int(t)


def sd_schedule(T: int = 1000) -> NoiseSchedule:
    """Stable Diffusion's scaled-linear schedule: linear in sqrt(beta) from 0.00085 to 0.012."""
    if int(T) < 2:
        raise InvalidArgument(f"T must be at least 2, got {T}")
    j = np.arange(T, dtype=np.float64) / (T - 1)
    betas = (np.sqrt(0.00085) * (1.0 - j) + np.sqrt(0.012) * j) ** 2
    return NoiseSchedule.from_betas(betas)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) < 2:
        raise InvalidArgument(f"T must be at least 2, got {T}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def forward_noise(s: NoiseSchedule, z0, t: int, eps) -> np.ndarray:
    """Sample ``z_t`` from ``q(z_t | z_0)`` given the noise draw ``eps``."""
    t = s._check_t(t, 1, s.T)
    z0 = as_latent(z0, name="z0")
    eps = as_latent(eps, name="eps")
    if z0.shape != eps.shape:
        raise InvalidArgument(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    a = s.alpha_bars[t]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class InversionCoefficients:
    signal: float
    noise: float


def _inversion_noise_terms(s: NoiseSchedule) -> np.ndarray:
    # term i: (sqrt(1/a_{i+1} - 1) - sqrt(1/a_i - 1))^2 / a_{i+1}, i = 0..T-1
    a = s.alpha_bars
    u = np.sqrt(1.0 / a - 1.0)
    return (u[1:] - u[:-1]) ** 2 / a[1:]


def inversion_coefficients(s: NoiseSchedule, t: int) -> InversionCoefficients:
    """Closed-form z_0 coefficient and merged noise std of ``z_{t+1}``.

    Uses the ``a_{t+1}`` numerator for the signal; ``a_t`` would not satisfy
    the stepwise recursion.
    """
    t = s._check_t(t, 0, s.T - 1)
    a_next = s.alpha_bars[t + 1]
    var = a_next * np.sum(_inversion_noise_terms(s)[: t + 1])
    return InversionCoefficients(signal=float(np.sqrt(a_next)), noise=float(np.sqrt(var)))


def snr_curve(s: NoiseSchedule) -> np.ndarray:
    """SNR of the inversion latent ``z_t`` for t = 1..T (index 0 of the result is t=1)."""
    return 1.0 / np.cumsum(_inversion_noise_terms(s))


def snr(s: NoiseSchedule, t: int) -> float:
    """SNR of the inversion latent ``z_t``.

    ``z_t`` comes from ``inversion_coefficients(s, t - 1)``. With this
    convention the SD schedule gives snr(1000) = 0.015131; counting one step
    fewer would give 0.01552.
    """
    t = s._check_t(t, 1, s.T)
    return float(snr_curve(s)[t - 1])
