"""Seeded random streams and latent-vector validation."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

GENERATOR_NAME = "numpy-philox4x64-seedsequence"


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class Rng:
    """Single-owner random stream identified by ``(seed, path)``.

    The bit generator is Philox (counter based), keyed through a
    ``SeedSequence`` whose spawn key is the stream path, so a stream is a pure
    function of its seed and labels on every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple[int, ...] | None = None):
        self.seed = int(seed)
        self.path = (int(stream_id),) if _path is None else tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        return self.path[-1]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def split(rng: Rng, label: int) -> Rng:
    """Child stream keyed by the parent's identity and ``label``; parent state is untouched."""
    return Rng(rng.seed, _path=rng.path + (int(label),))


def gaussian(rng: Rng, dim: int, n: int | None = None) -> np.ndarray:
    """Standard-normal latent of length ``dim`` (or an ``(n, dim)`` batch)."""
    if int(dim) <= 0:
        raise InvalidArgument(f"dim must be positive, got {dim}")
    shape = (int(dim),) if n is None else (int(n), int(dim))
    return rng.generator.standard_normal(shape)


def as_latent(x, dim: int | None = None, name: str = "latent") -> np.ndarray:
    """Validate a latent (1-D) or a batch of latents (2-D) as finite float64."""
    try:
        arr = check_array(x, ensure_2d=False, dtype=np.float64, input_name=name)
    except ValueError as exc:
        raise InvalidArgument(str(exc)) from exc
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise InvalidArgument(f"{name} must be a non-empty 1-D or 2-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[-1] != dim:
        raise InvalidArgument(f"{name} has dim {arr.shape[-1]}, expected {dim}")
    return arr
