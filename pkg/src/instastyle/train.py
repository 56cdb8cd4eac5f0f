"""Noise-prediction training: backbone pretraining and style-token/LoRA refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import InvalidArgument, Rng, split
from .denoiser import (
    BASE_PARAM_NAMES,
    DenoiserParams,
    Model,
    TokenTable,
    Vocab,
    backward,
    forward,
)
from .sched import NoiseSchedule
from .toyworld import World, descriptor_style, draw_batch

log = logging.getLogger(__name__)

SEEN_STYLES = (0, 1)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 20_000
    lr: float = 1e-3
    batch: int = 128
    p_uncond: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.iters < 0:
            raise InvalidArgument("iters must be non-negative")
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.batch < 1:
            raise InvalidArgument("batch must be at least 1")
        if not 0.0 <= self.p_uncond < 1.0:
            raise InvalidArgument("p_uncond must lie in [0, 1)")
        return self


# An lr of 1e-5 suits billion-parameter backbones; the toy model needs 1e-3.
REFINE_DEFAULTS = TrainConfig(iters=500, lr=1e-3, batch=16, p_uncond=0.0)


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every array in ``params`` that has a gradient."""
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name in sorted(params):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[name] -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def loss(model: Model, s: NoiseSchedule, z0, prompt_ids, t, eps, wrt=None):
    """Mean squared noise-prediction error and its gradients.

    ``z0`` and ``eps`` are (B, D) or (D,); ``prompt_ids`` is (B, 2) or (2,)
    token ids; ``t`` a scalar or (B,) array. The loss is the per-sample squared
    norm averaged over the batch. ``wrt`` names the tensors to differentiate:
    base parameter names, ``"tokens"`` (full table gradient) and adapter
    factors ``"lora_k_A"`` etc. Returns ``(loss, grads)``.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if z0.shape != eps.shape or z0.shape[1] != model.params.dim:
        raise InvalidArgument(f"z0 {z0.shape} and eps {eps.shape} must match (B, {model.params.dim})")
    ids = np.asarray(prompt_ids, dtype=int).reshape(-1, 2)
    n = z0.shape[0]
    ids = np.broadcast_to(ids, (n, 2))
    t = np.broadcast_to(np.asarray(t, dtype=int), (n,))
    if np.any((t < 1) | (t > s.T)):
        raise InvalidArgument("timesteps must lie in [1, T]")
    a = s.alpha_bars[t][:, None]
    z_t = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps
    P = model.table.embeddings[ids]
    out, cache = forward(model.params, model.adapters, z_t, t, P)
    resid = out - eps
    value = float(np.sum(resid**2) / n)
    if wrt is None:
        return value, {}
    raw = backward(model.params, model.adapters, cache, 2.0 * resid / n)
    grads = {}
    for name in wrt:
        if name == "tokens":
            g_tab = np.zeros_like(model.table.embeddings)
            np.add.at(g_tab, ids.ravel(), raw["prompt"].reshape(-1, raw["prompt"].shape[-1]))
            grads["tokens"] = g_tab
        else:
            grads[name] = raw[name]
    return value, grads


Sampler = Callable[[Rng, int], tuple[np.ndarray, np.ndarray]]


def world_sampler(world: World, vocab: Vocab, styles=SEEN_STYLES, captions: dict | None = None) -> Sampler:
    """Minibatches of (x, (content token, style token)) from the listed styles.

    ``captions`` maps a drawn style to the style token written in its prompt;
    unmapped styles are captioned with their own token.
    """
    styles = np.asarray(styles, dtype=int)
    caption = np.arange(world.config.n_style)
    for s, tok in (captions or {}).items():
        caption[s] = tok

    def sampler(rng: Rng, n: int):
        g = rng.generator
        c = g.integers(0, world.config.n_content, size=n)
        s = styles[g.integers(0, styles.size, size=n)]
        x = draw_batch(world, c, s, rng)
        ids = np.stack([c, vocab.n_content + caption[s]], axis=1)
        return x, ids

    return sampler


def held_out_captions(world: World, held_out) -> dict[int, int]:
    """Caption each held-out style with the seen style token that best describes it."""
    seen = [s for s in range(world.config.n_style) if s not in set(held_out)]
    return {int(h): descriptor_style(world, h, seen) for h in held_out}


def array_sampler(X, ids) -> Sampler:
    X = np.asarray(X, dtype=np.float64)
    ids = np.asarray(ids, dtype=int)

    def sampler(rng: Rng, n: int):
        idx = rng.generator.integers(0, X.shape[0], size=n)
        return X[idx], ids[idx]

    return sampler


def _fit(model: Model, s: NoiseSchedule, sampler: Sampler, cfg: TrainConfig, rng: Rng,
         base: tuple[str, ...], token_rows, adapters: bool, history: list | None = None) -> Model:
    cfg.validate()
    vocab = model.table.vocab
    params: dict[str, np.ndarray] = {name: getattr(model.params, name) for name in base}
    if token_rows is not None and len(token_rows):
        params["tokens"] = model.table.embeddings
        row_mask = np.zeros((len(vocab), 1))
        row_mask[list(token_rows)] = 1.0
    if adapters:
        for tgt, ad in model.adapters.items():
            params[f"lora_{tgt}_A"] = ad.A
            params[f"lora_{tgt}_B"] = ad.B
    opt = Adam(cfg)
    data_rng, t_rng, eps_rng, drop_rng = (split(rng, i) for i in range(4))
    for it in range(cfg.iters):
        x, ids = sampler(data_rng, cfg.batch)
        if cfg.p_uncond > 0:
            drop = drop_rng.generator.random(cfg.batch) < cfg.p_uncond
            ids = np.where(drop[:, None], vocab.null, ids)
        t = t_rng.generator.integers(1, s.T + 1, size=cfg.batch)
        eps = eps_rng.generator.standard_normal(x.shape)
        value, grads = loss(model, s, x, ids, t, eps, wrt=params.keys())
        if "tokens" in grads:
            grads["tokens"] *= row_mask
        opt.step(params, grads)
        if history is not None:
            history.append(value)
        if it % 2000 == 0:
            log.debug("iter %d loss %.5f", it, value)
    return model


def pretrain(world: World, s: NoiseSchedule, cfg: TrainConfig, rng: Rng, held_out=(2,),
             show_held_out: bool = True, n_learned: int = 1, history: list | None = None,
             sampler: Sampler | None = None) -> Model:
    """Train every base weight and every named token.

    With ``show_held_out`` the held-out styles are drawn too but captioned with
    their nearest seen style's token, so the backbone can render them while no
    prompt names them. Without it only seen styles are drawn. Learned style
    tokens and the null token keep their initial values.
    """
    vocab = Vocab(world.config.n_content, world.config.n_style, n_learned)
    if sampler is None:
        seen = [st for st in range(world.config.n_style) if st not in set(held_out)]
        if show_held_out:
            sampler = world_sampler(world, vocab, range(world.config.n_style), held_out_captions(world, held_out))
        else:
            sampler = world_sampler(world, vocab, seen)
    return fit_backbone(world.dim, vocab, s, sampler, cfg, rng, history)


def fit_backbone(dim: int, vocab: Vocab, s: NoiseSchedule, sampler: Sampler, cfg: TrainConfig, rng: Rng,
                 history: list | None = None) -> Model:
    """Fresh model trained on ``sampler``; learned and null token rows stay at their initial values."""
    model = Model(DenoiserParams.init(dim, split(rng, 100)), TokenTable.init(vocab, split(rng, 101)))
    rows = [i for i in range(len(vocab)) if i not in vocab.learned_ids and i != vocab.null]
    return _fit(model, s, sampler, cfg, split(rng, 102), BASE_PARAM_NAMES, rows, adapters=False, history=history)


@dataclass(eq=False)
class RefineSet:
    X: np.ndarray  # (N, D)
    ids: np.ndarray  # (N, 2) prompt token ids, style column uses a learned token

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1, 2)
        if self.X.shape[0] == 0:
            raise InvalidArgument("refinement set is empty")
        if self.X.shape[0] != self.ids.shape[0]:
            raise InvalidArgument("refinement set has mismatched samples and prompts")

    def __len__(self) -> int:
        return self.X.shape[0]


def refine(model: Model, data: RefineSet, s: NoiseSchedule, cfg: TrainConfig = REFINE_DEFAULTS,
           rng: Rng | None = None, history: list | None = None) -> Model:
    """Optimise only the learned style embeddings and the K/V adapter factors.

    Returns a new :class:`Model`; base weights are shared with the input and never written.
    """
    if len(data) == 0:
        raise InvalidArgument("refinement set is empty")
    if set(model.adapters) != {"k", "v"}:
        raise InvalidArgument("refinement needs adapters on both the key and value projections")
    vocab = model.table.vocab
    learned = set(vocab.learned_ids)
    if not set(data.ids[:, 1]) <= learned:
        raise InvalidArgument("every refinement prompt must use a learned style token")
    rng = rng if rng is not None else Rng(0)
    out = Model(model.params, model.table.copy(), {k: a.copy() for k, a in model.adapters.items()})
    rows = sorted(set(data.ids[:, 1].tolist()))
    return _fit(out, s, array_sampler(data.X, data.ids), cfg, rng, (), rows, adapters=True, history=history)
