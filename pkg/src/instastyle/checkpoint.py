"""``instastyle-ckpt`` v1: JSON checkpoints of denoiser, token table and adapters."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .core import GENERATOR_NAME, InvalidArgument
from .denoiser import BASE_PARAM_NAMES, DenoiserParams, LoraAdapter, Model, TokenTable, Vocab

FORMAT = "instastyle-ckpt"
VERSION = 1


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def to_dict(model: Model, extra: dict | None = None) -> dict:
    params = {name: _pack(arr) for name, arr in model.params.as_dict().items()}
    params["tokens"] = _pack(model.table.embeddings)
    for tgt, ad in sorted(model.adapters.items()):
        params[f"lora_{tgt}_A"] = _pack(ad.A)
        params[f"lora_{tgt}_B"] = _pack(ad.B)
    v = model.table.vocab
    meta = {"n_content": v.n_content, "n_style": v.n_style, "n_learned": v.n_learned, "vocab": v.names}
    if extra:
        meta.update(extra)
    return {"format": FORMAT, "version": VERSION, "rng": GENERATOR_NAME, "meta": meta, "params": params}


def dumps(model: Model, extra: dict | None = None) -> str:
    return json.dumps(to_dict(model, extra), sort_keys=True, separators=(",", ":"))


def digest(model: Model) -> str:
    """SHA-256 of the canonical checkpoint text; identifies a model state."""
    return hashlib.sha256(dumps(model).encode()).hexdigest()


def from_dict(doc: dict) -> tuple[Model, dict]:
    if doc.get("format") != FORMAT:
        raise InvalidArgument(f"not an {FORMAT} document")
    if doc.get("version") != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {doc.get('version')!r}")
    meta = doc.get("meta", {})
    p = doc["params"]
    params = DenoiserParams(**{name: _unpack(p[name]) for name in BASE_PARAM_NAMES})
    vocab = Vocab(meta["n_content"], meta["n_style"], meta.get("n_learned", 1))
    table = TokenTable(vocab, _unpack(p["tokens"]))
    adapters = {}
    for tgt in ("k", "v"):
        if f"lora_{tgt}_A" in p:
            adapters[tgt] = LoraAdapter(B=_unpack(p[f"lora_{tgt}_B"]), A=_unpack(p[f"lora_{tgt}_A"]), target=tgt)
    return Model(params, table, adapters), meta


def save(model: Model, path, extra: dict | None = None) -> str:
    text = dumps(model, extra)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load(path) -> tuple[Model, dict]:
    return from_dict(json.loads(Path(path).read_text()))
