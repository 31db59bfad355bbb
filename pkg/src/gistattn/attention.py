"""Dense numeric attention kernels and their analytic gradients.

Double precision throughout by default; ``dtype=np.float32`` is accepted
for speed at looser tolerances. The logit scale 1/sqrt(d) is always
applied inside attention, independent of the routing-score scale flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .mask import AGSR, SGSR, VARIANTS


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax of a vector."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValidationError("softmax of empty vector")
    if np.isnan(v).any():
        raise ValidationError("softmax input contains NaN")
    e = np.exp(v - v.max())
    return e / e.sum()


def masked_attention(
    q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    allow_row: np.ndarray,
    scale: float | None = None,
) -> np.ndarray:
    """Attention output for one query over the keys its mask row allows.

    Disallowed keys contribute exactly zero weight (they are dropped
    before the softmax, not just down-weighted).
    """
    q = np.asarray(q, dtype=float)
    K = np.asarray(K, dtype=float)
    V = np.asarray(V, dtype=float)
    if K.ndim != 2 or V.ndim != 2 or K.shape[0] != V.shape[0]:
        raise ValidationError(f"K/V row mismatch: {K.shape} vs {V.shape}")
    if q.shape != (K.shape[1],):
        raise ValidationError(f"query dim {q.shape} does not match keys {K.shape}")
    allow_row = np.asarray(allow_row, dtype=bool)
    if allow_row.shape != (K.shape[0],):
        raise ValidationError("allow_row length must equal the number of keys")
    idx = np.flatnonzero(allow_row)
    if idx.size == 0:
        raise ValidationError("fully-masked attention row")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[0])
    w = softmax((K[idx] @ q) * scale)
    return w @ V[idx]


def attention_backward(
    q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    allow_row: np.ndarray,
    upstream_grad: np.ndarray,
    scale: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`masked_attention` w.r.t. q, K, V.

    Disallowed keys receive exactly zero gradient.
    """
    q = np.asarray(q, dtype=float)
    K = np.asarray(K, dtype=float)
    V = np.asarray(V, dtype=float)
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (V.shape[1],):
        raise ValidationError(
            f"upstream grad shape {upstream_grad.shape} != value dim {V.shape[1]}"
        )
    allow_row = np.asarray(allow_row, dtype=bool)
    idx = np.flatnonzero(allow_row)
    if idx.size == 0:
        raise ValidationError("fully-masked attention row")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[0])
    Ka, Va = K[idx], V[idx]
    w = softmax((Ka @ q) * scale)
    dw = Va @ upstream_grad
    dz = w * (dw - float(w @ dw))  # softmax Jacobian-vector product
    grad_q = scale * (dz @ Ka)
    grad_K = np.zeros_like(K)
    grad_V = np.zeros_like(V)
    grad_K[idx] = scale * np.outer(dz, q)
    grad_V[idx] = np.outer(w, upstream_grad)
    return grad_q, grad_K, grad_V


@dataclass(frozen=True)
class KVEntry:
    """One cached key/value pair tagged with its layout role."""

    position: int
    kind: str  # "raw" | "summary" | "link" | "gen"
    level: int  # 0 raw/link/gen, >= 1 summaries
    chunk_id: int | None
    index: int
    key: np.ndarray
    value: np.ndarray
    document: int = 0


@dataclass
class AttendedContext:
    """The hybrid context actually attended: entries in layout order."""

    entries: list[KVEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def keys(self) -> np.ndarray:
        return np.stack([e.key for e in self.entries])

    @property
    def values(self) -> np.ndarray:
        return np.stack([e.value for e in self.entries])

    def count(self, kind: str) -> int:
        return sum(1 for e in self.entries if e.kind == kind)


def build_hybrid_context(
    entries: Sequence[KVEntry],
    selection: Mapping[int, Sequence[int]] | Sequence[int],
    variant: str = SGSR,
    document: int | None = None,
) -> AttendedContext:
    """Filter cached entries down to the per-variant hybrid context.

    ``selection`` maps level -> selected ids (a bare sequence means
    chunk ids). Non-selection entries (kind "gen"/"link") always stay.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown context variant {variant!r}")
    if isinstance(selection, Mapping):
        by_level = {int(l): set(ids) for l, ids in selection.items()}
    else:
        by_level = {1: set(selection)}
    chunks = by_level.get(1, set())
    picked: list[KVEntry] = []
    for e in entries:
        if document is not None and e.document != document:
            continue
        if e.kind == "raw":
            if e.chunk_id in chunks:
                picked.append(e)
        elif e.kind == "summary":
            if variant == AGSR:
                picked.append(e)
            elif variant == SGSR and e.index in by_level.get(e.level, set()):
                picked.append(e)
        else:  # gen / link entries are part of the always-on context
            picked.append(e)
    picked.sort(key=lambda e: (e.document, e.position))
    return AttendedContext(picked)


def hybrid_attention(
    q: np.ndarray,
    entries: Sequence[KVEntry],
    selection: Mapping[int, Sequence[int]] | Sequence[int],
    variant: str = SGSR,
) -> tuple[np.ndarray, AttendedContext]:
    """Attention over the unfolded hybrid context (selected summaries
    plus their raw tokens, per variant); returns the realized context
    for auditing."""
    ctx = build_hybrid_context(entries, selection, variant)
    if len(ctx) == 0:
        raise ValidationError("empty hybrid context: nothing selected")
    sel_chunks = (
        set(selection.get(1, ())) if isinstance(selection, Mapping) else set(selection)
    )
    present = {e.chunk_id for e in ctx.entries if e.kind == "raw"}
    missing = sel_chunks - present
    if missing:
        raise ValidationError(f"selected chunks missing from KV entries: {missing}")
    out = masked_attention(q, ctx.keys, ctx.values, np.ones(len(ctx), dtype=bool))
    return out, ctx
