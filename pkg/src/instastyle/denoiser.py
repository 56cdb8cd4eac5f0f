"""Tiny conditional noise predictor with one text cross-attention block.

Forward pass for a latent ``z`` at step ``t`` under a two-token prompt ``P``::

    pre = [z, temb(t)] @ trunk_in + trunk_bias
    q   = tanh(pre) @ Wq
    K   = P @ (Wk + Bk Ak),  V = P @ (Wv + Bv Av)
    h   = tanh(pre + softmax(q K^T / sqrt(d')) V @ attn_out)
    eps = h @ head + head_bias

The attention output shifts the hidden pre-activation, so the prompt acts as a
learned hidden bias. A null prompt (all-zero rows) gives ``K = V = 0`` and
leaves ``h = tanh(pre)``. Everything is batched over a leading axis;
gradients are written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidArgument, Rng, as_latent, split

TOKEN_DIM = 32
HIDDEN = 64
ATTN_DIM = 32
TIME_DIM = 32
INIT_STD = 0.02

BASE_PARAM_NAMES = ("trunk_in", "trunk_bias", "Wq", "Wk", "Wv", "attn_out", "head", "head_bias")


def time_embedding(t) -> np.ndarray:
    """Sinusoidal embedding: 16 sin/cos pairs, periods geometric from 2*pi to 2*pi*10^4."""
    t = np.asarray(t, dtype=np.float64)
    half = TIME_DIM // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / (half - 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class Vocab:
    """Token ids: contents, seen/named styles, learnable style tokens, then null."""

    def __init__(self, n_content: int, n_style: int, n_learned: int = 1):
        self.n_content, self.n_style, self.n_learned = n_content, n_style, n_learned
        self.names = (
            [f"content_{c}" for c in range(n_content)]
            + [f"style_{s}" for s in range(n_style)]
            + ["style_learned" if k == 0 else f"style_learned_{k}" for k in range(n_learned)]
            + ["null"]
        )
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.names == other.names

    def id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise InvalidArgument(f"unknown token {name!r}") from None

    def content(self, c: int) -> int:
        if not 0 <= c < self.n_content:
            raise InvalidArgument(f"content id {c} out of range")
        return c

    def style(self, s: int) -> int:
        if not 0 <= s < self.n_style:
            raise InvalidArgument(f"style id {s} out of range")
        return self.n_content + s

    def learned(self, k: int = 0) -> int:
        if not 0 <= k < self.n_learned:
            raise InvalidArgument(f"learned style token {k} out of range")
        return self.n_content + self.n_style + k

    @property
    def null(self) -> int:
        return len(self.names) - 1

    @property
    def learned_ids(self) -> list[int]:
        return [self.learned(k) for k in range(self.n_learned)]


@dataclass(eq=False)
class TokenTable:
    vocab: Vocab
    embeddings: np.ndarray  # (V, TOKEN_DIM); the null row stays zero

    @classmethod
    def init(cls, vocab: Vocab, rng: Rng) -> "TokenTable":
        emb = rng.generator.normal(0.0, 1.0, size=(len(vocab), TOKEN_DIM))
        emb[vocab.null] = 0.0
        return cls(vocab, emb)

    def copy(self) -> "TokenTable":
        return TokenTable(self.vocab, self.embeddings.copy())


def embed_prompt(table: TokenTable, content: int, style: int) -> np.ndarray:
    """Two-row prompt embedding (content row, style row) from token ids."""
    ids = np.array([content, style])
    if np.any((ids < 0) | (ids >= len(table.vocab))):
        raise InvalidArgument(f"token ids {ids.tolist()} not in vocabulary")
    return table.embeddings[ids].copy()


def null_prompt(table: TokenTable) -> np.ndarray:
    return embed_prompt(table, table.vocab.null, table.vocab.null)


@dataclass(eq=False)
class DenoiserParams:
    trunk_in: np.ndarray
    trunk_bias: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    attn_out: np.ndarray
    head: np.ndarray
    head_bias: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: Rng) -> "DenoiserParams":
        g = rng.generator

        def w(*shape):
            return g.normal(0.0, INIT_STD, size=shape)

        return cls(
            trunk_in=w(dim + TIME_DIM, HIDDEN),
            trunk_bias=np.zeros(HIDDEN),
            Wq=w(HIDDEN, ATTN_DIM),
            Wk=w(TOKEN_DIM, ATTN_DIM),
            Wv=w(TOKEN_DIM, ATTN_DIM),
            attn_out=w(ATTN_DIM, HIDDEN),
            head=w(HIDDEN, dim),
            head_bias=np.zeros(dim),
        )

    @property
    def dim(self) -> int:
        return self.head.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BASE_PARAM_NAMES}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(**{k: v.copy() for k, v in self.as_dict().items()})


@dataclass(eq=False)
class LoraAdapter:
    """Low-rank residual ``B @ A`` on the key or value projection."""

    B: np.ndarray  # (TOKEN_DIM, r)
    A: np.ndarray  # (r, ATTN_DIM)
    target: str

    @classmethod
    def init(cls, target: str, rng: Rng, rank: int = 4) -> "LoraAdapter":
        if target not in ("k", "v"):
            raise InvalidArgument(f"adapter target must be 'k' or 'v', got {target!r}")
        if not 1 <= rank < min(TOKEN_DIM, ATTN_DIM):
            raise InvalidArgument(f"rank {rank} must be in [1, {min(TOKEN_DIM, ATTN_DIM)})")
        A = rng.generator.normal(0.0, INIT_STD, size=(rank, ATTN_DIM))
        return cls(B=np.zeros((TOKEN_DIM, rank)), A=A, target=target)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.B.copy(), self.A.copy(), self.target)


def make_adapters(rng: Rng, rank: int = 4) -> dict[str, LoraAdapter]:
    return {tgt: LoraAdapter.init(tgt, split(rng, i), rank) for i, tgt in enumerate(("k", "v"))}


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 2.5
    beta: float = 0.5

    def __post_init__(self):
        if self.w < 0:
            raise InvalidArgument("guidance scale w must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidArgument("beta must lie in [0, 1]")


def attention_weights(q, K) -> np.ndarray:
    q, K = np.asarray(q, dtype=np.float64), np.asarray(K, dtype=np.float64)
    if q.shape[-1] != K.shape[-1]:
        raise InvalidArgument(f"query dim {q.shape[-1]} != key dim {K.shape[-1]}")
    logits = np.einsum("...e,...je->...j", q, K) / np.sqrt(K.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def cross_attention(q, K, V) -> np.ndarray:
    """Single-query scaled dot-product attention over ``s`` key/value rows."""
    K, V = np.asarray(K, dtype=np.float64), np.asarray(V, dtype=np.float64)
    if K.shape[:-1] != V.shape[:-1]:
        raise InvalidArgument(f"K rows {K.shape} and V rows {V.shape} differ")
    a = attention_weights(q, K)
    return np.einsum("...j,...je->...e", a, V)


def _projections(params: DenoiserParams, adapters) -> tuple[np.ndarray, np.ndarray]:
    Wk, Wv = params.Wk, params.Wv
    if adapters:
        if "k" in adapters:
            Wk = Wk + adapters["k"].delta()
        if "v" in adapters:
            Wv = Wv + adapters["v"].delta()
    return Wk, Wv


def _prepare(params: DenoiserParams, z, t, prompt):
    z = as_latent(z, params.dim, name="z")
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    n = z2.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    P = np.asarray(prompt, dtype=np.float64)
    if P.shape[-2:] != (2, TOKEN_DIM):
        raise InvalidArgument(f"prompt must have trailing shape (2, {TOKEN_DIM}), got {P.shape}")
    P = np.broadcast_to(P, (n, 2, TOKEN_DIM))
    return z2, t, P, single


def forward(params: DenoiserParams, adapters, z, t, prompt):
    """Batched forward pass returning ``(eps, cache)``; ``cache`` feeds :func:`backward`."""
    z2, t, P, _ = _prepare(params, z, t, prompt)
    x_in = np.concatenate([z2, time_embedding(t)], axis=1)
    pre = x_in @ params.trunk_in + params.trunk_bias
    h0 = np.tanh(pre)
    q = h0 @ params.Wq
    Wk, Wv = _projections(params, adapters)
    K = P @ Wk
    V = P @ Wv
    a = attention_weights(q, K)
    o = np.einsum("bj,bje->be", a, V)
    h = np.tanh(pre + o @ params.attn_out)
    out = h @ params.head + params.head_bias
    cache = dict(x_in=x_in, h0=h0, q=q, K=K, V=V, a=a, o=o, h=h, P=P, Wk=Wk, Wv=Wv)
    return out, cache


def backward(params: DenoiserParams, adapters, cache, g_out) -> dict[str, np.ndarray]:
    """Reverse pass: gradients for every base weight, ``P`` and adapter factors.

    Keys: base parameter names, ``"prompt"`` (batch, 2, d), and
    ``"lora_k_A"``, ``"lora_k_B"``, ``"lora_v_A"``, ``"lora_v_B"`` when present.
    """
    c = cache
    scale = 1.0 / np.sqrt(c["K"].shape[-1])
    grads = {"head": c["h"].T @ g_out, "head_bias": g_out.sum(axis=0)}
    g_h = (g_out @ params.head.T) * (1.0 - c["h"] ** 2)
    grads["attn_out"] = c["o"].T @ g_h
    g_o = g_h @ params.attn_out.T
    g_a = np.einsum("be,bje->bj", g_o, c["V"])
    g_V = c["a"][:, :, None] * g_o[:, None, :]
    g_logits = c["a"] * (g_a - np.sum(c["a"] * g_a, axis=1, keepdims=True))
    g_q = np.einsum("bj,bje->be", g_logits, c["K"]) * scale
    g_K = g_logits[:, :, None] * c["q"][:, None, :] * scale
    g_Wk = np.einsum("bjd,bje->de", c["P"], g_K)
    g_Wv = np.einsum("bjd,bje->de", c["P"], g_V)
    grads["Wk"], grads["Wv"] = g_Wk, g_Wv
    grads["prompt"] = g_K @ c["Wk"].T + g_V @ c["Wv"].T
    for tgt, g_W in (("k", g_Wk), ("v", g_Wv)):
        if adapters and tgt in adapters:
            ad = adapters[tgt]
            grads[f"lora_{tgt}_B"] = g_W @ ad.A.T
            grads[f"lora_{tgt}_A"] = ad.B.T @ g_W
    grads["Wq"] = c["h0"].T @ g_q
    g_pre = g_h + (g_q @ params.Wq.T) * (1.0 - c["h0"] ** 2)
    grads["trunk_in"] = c["x_in"].T @ g_pre
    grads["trunk_bias"] = g_pre.sum(axis=0)
    return grads


def predict_eps(params: DenoiserParams, adapters, z, t, prompt) -> np.ndarray:
    """Noise estimate for ``z`` (a latent or a batch) at step ``t`` under ``prompt``."""
    out, _ = forward(params, adapters, z, t, prompt)
    return out[0] if np.ndim(z) == 1 else out


def cfg_eps(params, adapters, z, t, prompt, null, g: GuidanceConfig) -> np.ndarray:
    e_null = predict_eps(params, adapters, z, t, null)
    e_cond = predict_eps(params, adapters, z, t, prompt)
    return e_null + g.w * (e_cond - e_null)


def composed_eps(params, adapters, z, t, prompt1, prompt2, null, g: GuidanceConfig) -> np.ndarray:
    e_null = predict_eps(params, adapters, z, t, null)
    e1 = predict_eps(params, adapters, z, t, prompt1)
    e2 = predict_eps(params, adapters, z, t, prompt2)
    return e_null + g.w * (1.0 - g.beta) * (e1 - e_null) + g.w * g.beta * (e2 - e_null)


@dataclass(eq=False)
class Model:
    """Trained state used by sampling: base weights, token table and optional adapters."""

    params: DenoiserParams
    table: TokenTable
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.params.copy(), self.table.copy(), {k: a.copy() for k, a in self.adapters.items()})

    def prompt(self, content: int, style: int) -> np.ndarray:
        return embed_prompt(self.table, content, style)

    def prompts(self, contents, style: int) -> np.ndarray:
        """Batch of prompts (N, 2, d): one per content id, all with the same style token."""
        contents = np.atleast_1d(np.asarray(contents, dtype=int))
        ids = np.stack([contents, np.full(contents.size, int(style))], axis=1)
        if np.any((ids < 0) | (ids >= len(self.table.vocab))):
            raise InvalidArgument("token ids not in vocabulary")
        return self.table.embeddings[ids]

    def null(self) -> np.ndarray:
        return null_prompt(self.table)

    def eps(self, z, t, prompt, g: GuidanceConfig, prompt2=None) -> np.ndarray:
        if prompt2 is None:
            return cfg_eps(self.params, self.adapters, z, t, prompt, self.null(), g)
        return composed_eps(self.params, self.adapters, z, t, prompt, prompt2, self.null(), g)
