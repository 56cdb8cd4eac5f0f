"""Rank-based choice of stage-one generations for refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument


@dataclass(frozen=True)
class ScoredSample:
    x: np.ndarray
    content_id: int
    style_s: float
    content_s: float


def ranks(scores) -> np.ndarray:
    """1-based descending rank; equal scores are ordered by index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    r = np.empty(scores.size, dtype=int)
    r[order] = np.arange(1, scores.size + 1)
    return r


def rank_select(style_scores, content_scores, n: int) -> list[int]:
    """Indices of the ``n`` items with the smallest ``max(style rank, content rank)``.

    Ties go to the smaller index; the result is sorted ascending.
    """
    style_scores = np.asarray(style_scores, dtype=np.float64)
    content_scores = np.asarray(content_scores, dtype=np.float64)
    if style_scores.shape != content_scores.shape or style_scores.ndim != 1:
        raise InvalidArgument("score columns must be 1-D and of equal length")
    if not np.all(np.isfinite(style_scores)) or not np.all(np.isfinite(content_scores)):
        raise InvalidArgument("scores must be finite")
    if not 1 <= n <= style_scores.size:
        raise InvalidArgument(f"n must lie in [1, {style_scores.size}], got {n}")
    overall = np.maximum(ranks(style_scores), ranks(content_scores))
    chosen = np.lexsort((np.arange(overall.size), overall))[:n]
    return sorted(int(i) for i in chosen)


def select_items(items: list[ScoredSample], n: int, keep=()) -> list[int]:
    """:func:`rank_select` over scored samples; ``keep`` indices are always included."""
    if not 1 <= n <= len(items):
        raise InvalidArgument(f"n must lie in [1, {len(items)}], got {n}")
    keep = sorted(set(int(k) for k in keep))
    if any(not 0 <= k < len(items) for k in keep):
        raise InvalidArgument("keep index out of range")
    overall = np.maximum(ranks([it.style_s for it in items]), ranks([it.content_s for it in items]))
    order = [int(i) for i in np.lexsort((np.arange(len(items)), overall)) if i not in keep]
    return sorted(keep + order[: max(0, n - len(keep))])
