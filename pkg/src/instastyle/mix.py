"""Masked combination of two inversion noises."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, Rng, as_latent


@dataclass(frozen=True, eq=False)
class MixMask:
    bits: np.ndarray  # bool, shape (D,)

    @property
    def alpha(self) -> float:
        """Realised fraction of positions taken from the second noise."""
        return float(self.bits.mean())

    def complement(self) -> "MixMask":
        return MixMask(~self.bits)


def mask_count(dim: int, alpha: float) -> int:
    # np.round rounds halves to even
    return int(np.round(alpha * dim))


def make_mask(dim: int, alpha: float, rng: Rng) -> MixMask:
    """Exactly ``round(alpha * dim)`` ones at positions drawn without replacement."""
    if dim <= 0:
        raise InvalidArgument(f"dim must be positive, got {dim}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0, 1], got {alpha}")
    bits = np.zeros(dim, dtype=bool)
    k = mask_count(dim, alpha)
    bits[rng.generator.choice(dim, size=k, replace=False)] = True
    return MixMask(bits)


def mix_noise(z1, z2, m: MixMask) -> np.ndarray:
    """``(1 - M) * z1 + M * z2`` as an exact per-coordinate selection."""
    z1, z2 = as_latent(z1, name="z1"), as_latent(z2, name="z2")
    if z1.shape != z2.shape or z1.shape[-1] != m.bits.size:
        raise InvalidArgument(f"shapes {z1.shape}, {z2.shape} and mask ({m.bits.size},) disagree")
    return np.where(m.bits, z2, z1)
