"""Relevance scoring and chunk selection over gist / meta-gist keys.

Selection is deterministic: ties always break toward the lower index,
and returned id lists are sorted ascending. Scores may be scaled by
1/sqrt(d); a positive scaling never changes top-k output, only top-p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .layout import AugmentedLayout, children_of

TOPK = "topk"
TOPP = "topp"


@dataclass(frozen=True)
class RoutingConfig:
    """Per-decode selection parameters.

    ``k_per_level`` lists k_1..k_t (index 0 = chunk level); ``adaptive``
    replaces it with the budget rule from :func:`adaptive_k`. ``gqa_groups``
    maps query head -> KV group.
    """

    mode: str = TOPK
    k_per_level: tuple[int, ...] = (1,)
    adaptive: bool = False
    p: float = 1.0
    scale_by_sqrt_d: bool = True
    n_query_heads: int = 1
    n_kv_groups: int = 1
    first_layer_skip: bool = True
    context_variant: str = "sg+sr"

    def __post_init__(self):
        if self.mode not in (TOPK, TOPP):
            raise ValidationError(f"unknown routing mode {self.mode!r}")
        if any(k < 1 for k in self.k_per_level):
            raise ValidationError(f"k values must be >= 1, got {self.k_per_level}")
        if not 0.0 < self.p <= 1.0:
            raise ValidationError(f"p must be in (0, 1], got {self.p}")
        if self.n_kv_groups < 1 or self.n_query_heads < 1:
            raise ValidationError("head counts must be >= 1")
        if self.n_query_heads % self.n_kv_groups != 0:
            raise ValidationError(
                f"{self.n_query_heads} query heads not divisible into "
                f"{self.n_kv_groups} KV groups"
            )

    def head_group(self, head: int) -> int:
        return head // (self.n_query_heads // self.n_kv_groups)

    def k_at(self, level: int) -> int:
        """k for a given level, reusing k_1 when shorter lists are given."""
        if level - 1 < len(self.k_per_level):
            return self.k_per_level[level - 1]
        return self.k_per_level[-1]


@dataclass
class LevelSelection:
    level: int
    candidates: list[int]  # summary indices scored at this level
    scores: np.ndarray
    selected: list[int]  # sorted ascending


@dataclass
class HeadSelection:
    """One head's routing outcome, top level first."""

    levels: list[LevelSelection]

    @property
    def chunks(self) -> list[int]:
        return self.levels[-1].selected

    def by_level(self) -> dict[int, list[int]]:
        return {ls.level: list(ls.selected) for ls in self.levels}

    @property
    def scored_pairs(self) -> int:
        return sum(len(ls.candidates) for ls in self.levels)


@dataclass
class SelectionResult:
    per_head: list[HeadSelection]
    per_group: dict[int, dict[int, list[int]]] = field(default_factory=dict)

    def group_chunks(self, group: int) -> list[int]:
        return self.per_group[group][1]


def score_gists(
    query: np.ndarray, gist_keys: np.ndarray, scale_by_sqrt_d: bool = True
) -> np.ndarray:
    """Dot-product relevance of each candidate key against the query."""
    query = np.asarray(query, dtype=float)
    gist_keys = np.asarray(gist_keys, dtype=float)
    if gist_keys.ndim != 2 or gist_keys.shape[0] == 0:
        raise ValidationError("gist_keys must be a nonempty (M, d) matrix")
    if query.shape != (gist_keys.shape[1],):
        raise ValidationError(
            f"dimension mismatch: query {query.shape}, keys {gist_keys.shape}"
        )
    scores = gist_keys @ query
    if scale_by_sqrt_d:
        scores = scores / np.sqrt(query.shape[0])
    return scores


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable sort on negated scores: ties resolve toward the lower index
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def select_topk(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest scores (all of them when k >= len)."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValidationError("cannot select from empty scores")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    picked = _descending_order(scores)[:k]
    return sorted(int(i) for i in picked)


def select_topp(scores: np.ndarray, p: float) -> list[int]:
    """Smallest descending-probability prefix with cumulative mass >= p."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValidationError("cannot select from empty scores")
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"p must be in (0, 1], got {p}")
    shifted = scores - scores.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = _descending_order(scores)
    cum = np.cumsum(probs[order])
    # 1e-12 slack: cumulative sums of floats may undershoot p by rounding
    count = int(np.searchsorted(cum, p - 1e-12) + 1)
    count = min(count, scores.size)
    return sorted(int(i) for i in order[:count])


def adaptive_k(n_kv: int, l_eff: int, n_groups: int, chunk_len: int) -> int:
    """Selection budget keeping unfolded tokens proportional to context size.

    k = floor(n_kv / (l_eff * G * L)) + 1; the +1 guarantees at least one
    chunk. Hierarchies reuse the same k at every level.
    """
    if n_kv < 0:
        raise ValidationError(f"n_kv must be >= 0, got {n_kv}")
    for name, v in (("l_eff", l_eff), ("n_groups", n_groups), ("chunk_len", chunk_len)):
        if v < 1:
            raise ValidationError(f"{name} must be >= 1, got {v}")
    return n_kv // (l_eff * n_groups * chunk_len) + 1


def group_union(
    per_head: list[list[int]], head_to_group: list[int]
) -> dict[int, list[int]]:
    """Union of selected ids across the query heads of each KV group."""
    if len(head_to_group) != len(per_head):
        raise ValidationError(
            f"{len(per_head)} head selections but {len(head_to_group)} group entries"
        )
    out: dict[int, set[int]] = {}
    for ids, group in zip(per_head, head_to_group):
        out.setdefault(group, set()).update(ids)
    return {g: sorted(s) for g, s in out.items()}


def _select(scores: np.ndarray, mode: str, k: int, p: float) -> list[int]:
    if mode == TOPP:
        return select_topp(scores, p)
    return select_topk(scores, k)


def flat_select(
    query: np.ndarray,
    gist_keys: np.ndarray,
    config: RoutingConfig,
    k_override: int | None = None,
) -> HeadSelection:
    """Single-level routing: score every gist, pick per config."""
    scores = score_gists(query, gist_keys, config.scale_by_sqrt_d)
    k = config.k_at(1) if k_override is None else k_override
    selected = _select(scores, config.mode, k, config.p)
    candidates = list(range(1, scores.size + 1))
    sel_ids = [candidates[i] for i in selected]
    return HeadSelection([LevelSelection(1, candidates, scores, sel_ids)])


def coarse_to_fine(
    query: np.ndarray,
    layout: AugmentedLayout,
    summary_keys: dict[int, np.ndarray],
    config: RoutingConfig,
    k_override: int | None = None,
) -> HeadSelection:
    """Hierarchical routing: score the top level exhaustively, then at
    each lower level score only the children of the previous selection.

    ``summary_keys[level]`` holds the level's key matrix indexed by
    summary index - 1. Selection ids are 1-based per level; k larger
    than the candidate pool selects the whole pool.
    """
    spec = layout.spec
    if spec.depth < 2:
        raise ValidationError("coarse_to_fine requires depth >= 2; use flat_select")
    for level in range(1, spec.depth + 1):
        keys = summary_keys.get(level)
        if keys is None or keys.shape[0] != spec.n_summaries(level):
            raise ValidationError(f"missing or short key matrix for level {level}")
    levels: list[LevelSelection] = []
    candidates = list(range(1, spec.n_summaries(spec.depth) + 1))
    for level in range(spec.depth, 0, -1):
        keys = np.asarray(summary_keys[level], dtype=float)[
            [c - 1 for c in candidates]
        ]
        scores = score_gists(query, keys, config.scale_by_sqrt_d)
        k = config.k_at(level) if k_override is None else k_override
        picked = _select(scores, config.mode, k, config.p)
        selected = sorted(candidates[i] for i in picked)
        levels.append(LevelSelection(level, list(candidates), scores, selected))
        if level > 1:
            candidates = [
                idx
                for parent in selected
                for (_, idx) in children_of(layout, (level, parent))
            ]
    return HeadSelection(levels)


def route_heads(
    queries: np.ndarray,
    layout: AugmentedLayout,
    summary_keys_per_head: list[dict[int, np.ndarray]],
    config: RoutingConfig,
    k_override: int | None = None,
) -> SelectionResult:
    """Route every query head, then union selections inside each KV group.

    The union is taken at every level so all heads of a group share one
    unfolded context.
    """
    heads = []
    for h in range(queries.shape[0]):
        keys = summary_keys_per_head[h]
        if layout.spec.depth == 1:
            heads.append(flat_select(queries[h], keys[1], config, k_override))
        else:
            heads.append(coarse_to_fine(queries[h], layout, keys, config, k_override))
    head_to_group = [config.head_group(h) for h in range(len(heads))]
    per_group: dict[int, dict[int, list[int]]] = {}
    for level in range(1, layout.spec.depth + 1):
        unions = group_union(
            [hs.by_level().get(level, []) for hs in heads], head_to_group
        )
        for g, ids in unions.items():
            per_group.setdefault(g, {})[level] = ids
    return SelectionResult(heads, per_group)
