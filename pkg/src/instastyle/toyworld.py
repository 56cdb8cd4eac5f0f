"""Synthetic styled domain: content prototypes under per-style affine maps.

A sample with content ``c`` and style ``s`` is ``d_s * (mu_c + sigma * eta) + b_s``
with ``eta ~ N(0, I)``, so every (c, s) class is a diagonal Gaussian and the
style/content scorers below are exact likelihood classifiers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import softmax

from .core import InvalidArgument, Rng, as_latent, split

PROTO_NORM = 2.0
OFFSET_NORM = 2.0
MIN_PROTO_DISTANCE = 0.5


@dataclass(frozen=True)
class ToyConfig:
    dim: int = 16
    n_content: int = 4
    n_style: int = 3
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> "ToyConfig":
        if self.dim < 2 or self.n_content < 2 or self.n_style < 2:
            raise InvalidArgument("dim, n_content and n_style must each be at least 2")
        if not self.noise_sigma > 0:
            raise InvalidArgument("noise_sigma must be positive")
        return self


@dataclass(frozen=True, eq=False)
class World:
    content_protos: np.ndarray  # (C, D)
    style_scales: np.ndarray  # (S, D), positive
    style_offsets: np.ndarray  # (S, D)
    config: ToyConfig = field(default_factory=ToyConfig)

    @property
    def dim(self) -> int:
        return self.config.dim

    def class_mean(self, c: int, s: int) -> np.ndarray:
        self._check_labels(c, s)
        return self.style_scales[s] * self.content_protos[c] + self.style_offsets[s]

    def class_means(self) -> np.ndarray:
        """All class means, shape (C, S, D)."""
        return self.style_scales[None, :, :] * self.content_protos[:, None, :] + self.style_offsets[None, :, :]

    def _check_labels(self, c, s):
        c, s = np.asarray(c), np.asarray(s)
        if np.any((c < 0) | (c >= self.config.n_content)):
            raise InvalidArgument(f"content id out of range [0, {self.config.n_content})")
        if np.any((s < 0) | (s >= self.config.n_style)):
            raise InvalidArgument(f"style id out of range [0, {self.config.n_style})")

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "content_protos": self.content_protos.tolist(),
            "style_scales": self.style_scales.tolist(),
            "style_offsets": self.style_offsets.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Sample:
    x: np.ndarray
    content_id: int
    style_id: int


def _rows_with_norm(gen: np.random.Generator, n: int, dim: int, norm: float) -> np.ndarray:
    v = gen.standard_normal((n, dim))
    return norm * v / np.linalg.norm(v, axis=1, keepdims=True)


def _min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    return float(dist[np.triu_indices(len(points), k=1)].min())


def make_world(cfg: ToyConfig = ToyConfig()) -> World:
    cfg.validate()
    root = Rng(cfg.seed, stream_id=0x70F)
    attempt = 0
    while True:
        gen = split(root, attempt).generator
        protos = _rows_with_norm(gen, cfg.n_content, cfg.dim, PROTO_NORM)
        scales = gen.uniform(0.6, 1.4, size=(cfg.n_style, cfg.dim))
        offsets = _rows_with_norm(gen, cfg.n_style, cfg.dim, OFFSET_NORM)
        world = World(protos, scales, offsets, cfg)
        means = world.class_means().reshape(-1, cfg.dim)
        if min(_min_pairwise_distance(protos), _min_pairwise_distance(means)) > MIN_PROTO_DISTANCE:
            return world
        attempt += 1


def draw_batch(world: World, c, s, rng: Rng) -> np.ndarray:
    """Vectorised draws; ``c`` and ``s`` are equal-length label arrays."""
    c = np.atleast_1d(np.asarray(c, dtype=int))
    s = np.atleast_1d(np.asarray(s, dtype=int))
    world._check_labels(c, s)
    eta = rng.generator.standard_normal((c.size, world.dim))
    sigma = world.config.noise_sigma
    return world.style_scales[s] * (world.content_protos[c] + sigma * eta) + world.style_offsets[s]


def draw(world: World, c: int, s: int, rng: Rng) -> Sample:
    x = draw_batch(world, [c], [s], rng)[0]
    return Sample(x=x, content_id=int(c), style_id=int(s))


def class_log_likelihood(world: World, x) -> np.ndarray:
    """Log-density of ``x`` under every (c, s) class, shape (..., C, S)."""
    x = as_latent(x, world.dim, name="x")
    std = world.config.noise_sigma * world.style_scales  # (S, D)
    r = (x[..., None, None, :] - world.class_means()) / std
    return -0.5 * np.sum(r**2, axis=-1) - np.sum(np.log(std), axis=-1)


def style_score(world: World, x) -> np.ndarray:
    """Posterior-style mass over styles (best content per style), sums to 1."""
    return softmax(class_log_likelihood(world, x).max(axis=-2), axis=-1)


def content_score(world: World, x) -> np.ndarray:
    return softmax(class_log_likelihood(world, x).max(axis=-1), axis=-1)


def style_classify(world: World, x):
    return np.argmax(style_score(world, x), axis=-1)


def content_classify(world: World, x):
    return np.argmax(content_score(world, x), axis=-1)


def nearest_style(world: World, x, candidates) -> int:
    """Candidate style with the highest summed best-content log-likelihood over the rows of ``x``."""
    candidates = [int(s) for s in candidates]
    ll = np.atleast_2d(class_log_likelihood(world, x).max(axis=-2))  # (N, S)
    return candidates[int(np.argmax(ll[:, candidates].sum(axis=0)))]


def descriptor_style(world: World, style: int, seen) -> int:
    """Seen style that best explains every class mean of ``style``."""
    return nearest_style(world, world.class_means()[:, style, :], seen)
