"""Deterministic DDIM sampling and DDIM inversion on a subsampled grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, as_latent
from .denoiser import GuidanceConfig, Model
from .sched import NoiseSchedule


@dataclass(frozen=True)
class StepGrid:
    timesteps: tuple[int, ...]

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidArgument("grid timesteps must be strictly increasing")
        if ts and ts[0] < 1:
            raise InvalidArgument("grid timesteps must be >= 1")
        object.__setattr__(self, "timesteps", ts)

    @classmethod
    def uniform(cls, T: int, steps: int = 50) -> "StepGrid":
        """``steps`` evenly spaced timesteps ending exactly at ``T``."""
        if not 1 <= steps <= T:
            raise InvalidArgument(f"steps must be in [1, {T}], got {steps}")
        return cls(tuple(int(round(k * T / steps)) for k in range(1, steps + 1)))

    def __len__(self) -> int:
        return len(self.timesteps)

    def check(self, s: NoiseSchedule) -> None:
        if self.timesteps and self.timesteps[-1] > s.T:
            raise InvalidArgument(f"grid ends at {self.timesteps[-1]} beyond T={s.T}")


def _step_coefficients(s: NoiseSchedule, t_from: int, t_to: int, form: str = "ddim") -> tuple[float, float]:
    a_from, a_to = s.alpha_bars[t_from], s.alpha_bars[t_to]
    shift = np.sqrt(1.0 / a_to - 1.0) - np.sqrt(1.0 / a_from - 1.0)
    if form == "ddim":
        return np.sqrt(a_to / a_from), np.sqrt(a_to) * shift
    if form == "unscaled":
        return np.sqrt(a_to / a_from), shift
    raise InvalidArgument(f"unknown step form {form!r}")


def _check_pair(s: NoiseSchedule, z, eps):
    z, eps = as_latent(z, name="z"), as_latent(eps, name="eps")
    if z.shape[-1] != eps.shape[-1]:
        raise InvalidArgument(f"z dim {z.shape[-1]} != eps dim {eps.shape[-1]}")
    return z, eps


def ddim_step(s: NoiseSchedule, z, t: int, t_prev: int, eps, form: str = "ddim") -> np.ndarray:
    """Move ``z_t`` to ``z_{t_prev}`` (``t_prev <= t``) along the deterministic update.

    ``form="ddim"`` is the standard update, whose noise term carries a
    ``sqrt(alpha_bar[t_prev])`` factor. ``form="unscaled"`` drops that factor;
    it is the recursion behind :func:`instastyle.sched.inversion_coefficients`
    and is kept for checking it, not for sampling.
    """
    if not 0 <= t_prev <= t <= s.T:
        raise InvalidArgument(f"need 0 <= t_prev <= t <= T, got t={t}, t_prev={t_prev}")
    z, eps = _check_pair(s, z, eps)
    scale, shift = _step_coefficients(s, t, t_prev, form)
    return scale * z + shift * eps


def ddim_invert_step(s: NoiseSchedule, z, t: int, t_next: int, eps, form: str = "ddim") -> np.ndarray:
    """Move ``z_t`` to ``z_{t_next}`` (``t_next >= t``); see :func:`ddim_step` for ``form``."""
    if not 0 <= t <= t_next <= s.T:
        raise InvalidArgument(f"need 0 <= t <= t_next <= T, got t={t}, t_next={t_next}")
    z, eps = _check_pair(s, z, eps)
    scale, shift = _step_coefficients(s, t, t_next, form)
    return scale * z + shift * eps


def sample(model: Model, s: NoiseSchedule, grid: StepGrid, z_T, prompt, g: GuidanceConfig, prompt2=None) -> np.ndarray:
    """Denoise from ``z_T`` (latent or batch) down the grid to a ``z_0`` estimate.

    Uses classifier-free guidance, or composed guidance when ``prompt2`` is given.
    """
    grid.check(s)
    z = as_latent(z_T, model.params.dim, name="z_T").copy()
    ts = (0,) + grid.timesteps
    for t, t_prev in zip(ts[:0:-1], ts[-2::-1]):
        eps = model.eps(z, t, prompt, g, prompt2)
        z = ddim_step(s, z, t, t_prev, eps)
    return z


def invert(model: Model, s: NoiseSchedule, grid: StepGrid, z_0, prompt, w_inv: float = 1.0) -> np.ndarray:
    """Map a clean latent up the grid to its inversion noise ``z_T``.

    The noise estimate for the step ``t -> t_next`` is evaluated at ``(z_t, t_next)``,
    since the model is undefined at ``t = 0``.
    """
    grid.check(s)
    g = GuidanceConfig(w=w_inv, beta=0.0)
    z = as_latent(z_0, model.params.dim, name="z_0").copy()
    ts = (0,) + grid.timesteps
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = model.eps(z, t_next, prompt, g)
        z = ddim_invert_step(s, z, t, t_next, eps)
    return z
