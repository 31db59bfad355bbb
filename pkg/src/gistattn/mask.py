"""Attention masks over augmented layouts.

All masks share one visibility principle: a summary token, once emitted,
hides everything strictly inside its group from every later query; the
hidden content stays reachable only through the summary itself. Applied
to level-1 gists this gives the single-level gist mask (tokens after
gist g_m see only g_m and earlier gists from chunk m's content); applied
to all levels it gives the hierarchical blocking mask.

An optional raw-only suffix (the generation context) extends the square:
suffix rows see the prefix frontier left visible by the rule above plus
standard causal attention among themselves.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .layout import SUMMARY, AugmentedLayout, group_start_position

MAGIC = b"GSAM"
VERSION = 1

# Hybrid-context variants: which gist/summary tokens accompany the
# selected chunks' raw tokens.
SGSR = "sg+sr"  # selected summaries + selected raw (default)
AGSR = "ag+sr"  # all summaries + selected raw
SR_ONLY = "sr-only"  # selected raw only
VARIANTS = (SGSR, AGSR, SR_ONLY)


@dataclass(frozen=True)
class AttentionMask:
    """Square boolean allow-matrix; rows are queries, columns keys."""

    layout_ref: str
    allow: np.ndarray  # (total_len, total_len) bool

    @property
    def total_len(self) -> int:
        return self.allow.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.allow[i]

    def pair_count(self) -> int:
        return int(self.allow.sum())


def _layout_ref(layout: AugmentedLayout, suffix_len: int = 0) -> str:
    s = layout.spec
    return f"n{s.n_raw}_L{s.chunk_len}_t{s.depth}_J{s.group_factor}_s{suffix_len}"


def _closure_events(layout: AugmentedLayout) -> list[tuple[int, int]]:
    """(summary position, group start position) for every summary token."""
    return [
        (tok.position, group_start_position(layout, tok.position))
        for tok in layout.tokens
        if tok.kind == SUMMARY
    ]


def _build_closure_mask(layout: AugmentedLayout, suffix_len: int) -> np.ndarray:
    """Incremental frontier construction of the closure-rule mask."""
    total = layout.total_len + suffix_len
    starts = {pos: start for pos, start in _closure_events(layout)}
    allow = np.zeros((total, total), dtype=bool)
    visible = np.zeros(total, dtype=bool)
    for i in range(total):
        if i > 0:
            visible[i - 1] = True
            start = starts.get(i - 1)
            if start is not None:
                visible[start : i - 1] = False
        allow[i] = visible
        allow[i, i] = True
    return allow


def build_gist_mask(layout: AugmentedLayout) -> AttentionMask:
    """Single-level gist causal mask, built from chunk arithmetic.

    Row groups: tokens of chunk m (raw then gist) attend earlier
    same-chunk tokens, themselves, and all earlier gists; nothing else.
    """
    if layout.spec.depth != 1:
        raise ValidationError(f"gist mask requires depth 1, got {layout.spec.depth}")
    total = layout.total_len
    allow = np.zeros((total, total), dtype=bool)
    gist_cols = [layout.position_of((1, m)) for m in range(1, layout.spec.n_chunks + 1)]
    for m in range(1, layout.spec.n_chunks + 1):
        block = list(layout.raw_positions(m)) + [layout.position_of((1, m))]
        earlier = gist_cols[: m - 1]
        for local, i in enumerate(block):
            allow[i, earlier] = True
            allow[i, block[: local + 1]] = True
    return AttentionMask(_layout_ref(layout), allow)


def build_hierarchical_mask(layout: AugmentedLayout) -> AttentionMask:
    """Multi-level blocking mask (depth >= 2) under the closure rule."""
    if layout.spec.depth < 2:
        raise ValidationError(
            f"hierarchical mask requires depth >= 2, got {layout.spec.depth}"
        )
    return AttentionMask(_layout_ref(layout), _build_closure_mask(layout, 0))


def build_stage1_mask(layout: AugmentedLayout, suffix_len: int = 0) -> AttentionMask:
    """Static training mask: prefix under its depth-appropriate mask, a
    raw-only suffix attending the prefix summary frontier plus itself
    causally. With ``suffix_len=0`` this equals the static prefix mask."""
    allow = _build_closure_mask(layout, suffix_len)
    return AttentionMask(_layout_ref(layout, suffix_len), allow)


def mask_rule_oracle(layout: AugmentedLayout, i: int, j: int, suffix_len: int = 0) -> bool:
    """Slow direct restatement of the visibility rules for one (i, j).

    Test-only: scans every summary token and checks whether any closed
    one hides key j from query i.
    """
    total = layout.total_len + suffix_len
    if not (0 <= i < total and 0 <= j < total):
        raise ValidationError(f"positions ({i}, {j}) outside 0..{total - 1}")
    if j > i:
        return False
    for pos, start in _closure_events(layout):
        if pos < i and start <= j < pos:
            return False
    return True


def oracle_mask_matrix(layout: AugmentedLayout, suffix_len: int = 0) -> np.ndarray:
    """Vectorized oracle: causal triangle minus one rectangle per summary."""
    total = layout.total_len + suffix_len
    allow = np.tril(np.ones((total, total), dtype=bool))
    for pos, start in _closure_events(layout):
        allow[pos + 1 :, start:pos] = False
    return allow


def _normalize_selection(
    selection: Mapping[int, Sequence[int]] | Sequence[int],
    depth: int,
) -> dict[int, tuple[int, ...]]:
    if isinstance(selection, Mapping):
        by_level = {int(l): tuple(int(i) for i in ids) for l, ids in selection.items()}
    else:
        by_level = {1: tuple(int(i) for i in selection)}
    for level in by_level:
        if not 1 <= level <= depth:
            raise ValidationError(f"selection level {level} outside 1..{depth}")
    return by_level


def stage2_prefix_row(
    layout: AugmentedLayout,
    selection: Mapping[int, Sequence[int]] | Sequence[int],
    variant: str = SGSR,
) -> np.ndarray:
    """Prefix columns one routed query may attend, per context variant.

    SG+SR: selected summaries at every level plus the selected chunks'
    raw tokens. AG+SR: every summary token plus selected raw. SR-only:
    selected raw tokens only.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown context variant {variant!r}")
    by_level = _normalize_selection(selection, layout.spec.depth)
    row = np.zeros(layout.total_len, dtype=bool)
    for m in by_level.get(1, ()):
        if not 1 <= m <= layout.spec.n_chunks:
            raise ValidationError(f"selected chunk {m} does not exist")
        row[list(layout.raw_positions(m))] = True
    if variant == AGSR:
        for tok in layout.tokens:
            if tok.kind == SUMMARY:
                row[tok.position] = True
    elif variant == SGSR:
        for level, ids in by_level.items():
            for k in ids:
                row[layout.position_of((level, k))] = True
    return row


def build_stage2_mask(
    prefix_layout: AugmentedLayout,
    suffix_len: int,
    selections: Sequence[Mapping[int, Sequence[int]] | Sequence[int]],
    variant: str = SGSR,
) -> AttentionMask:
    """Per-query selective mask: static prefix rows, routed suffix rows.

    ``selections[s]`` dictates what suffix position ``s`` may attend in
    the prefix; suffix positions attend each other causally.
    """
    if suffix_len <= 0:
        raise ValidationError(f"suffix_len must be >= 1, got {suffix_len}")
    if len(selections) != suffix_len:
        raise ValidationError(
            f"need one selection per suffix position: {len(selections)} != {suffix_len}"
        )
    prefix_len = prefix_layout.total_len
    total = prefix_len + suffix_len
    allow = np.zeros((total, total), dtype=bool)
    if prefix_layout.spec.depth == 1:
        allow[:prefix_len, :prefix_len] = build_gist_mask(prefix_layout).allow
    else:
        allow[:prefix_len, :prefix_len] = build_hierarchical_mask(prefix_layout).allow
    for s in range(suffix_len):
        i = prefix_len + s
        allow[i, :prefix_len] = stage2_prefix_row(prefix_layout, selections[s], variant)
        allow[i, prefix_len : i + 1] = True
    return AttentionMask(_layout_ref(prefix_layout, suffix_len), allow)


# ---------------------------------------------------------------------------
# serialization: magic, u32 version, u64 total_len, then row bitsets
# (little-endian within bytes, rows padded to whole bytes)
# ---------------------------------------------------------------------------


def serialize_mask(mask: AttentionMask) -> bytes:
    total = mask.total_len
    header = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", total)
    rows = np.packbits(mask.allow, axis=1, bitorder="little")
    return header + rows.tobytes()


def deserialize_mask(data: bytes) -> AttentionMask:
    if len(data) < 16:
        raise FormatError(f"mask payload too short: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported mask version {version}")
    (total,) = struct.unpack_from("<Q", data, 8)
    row_bytes = (total + 7) // 8
    expected = 16 + total * row_bytes
    if len(data) != expected:
        raise FormatError(f"mask payload has {len(data)} bytes, expected {expected}")
    packed = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(total, row_bytes)
    allow = np.unpackbits(packed, axis=1, bitorder="little")[:, :total].astype(bool)
    return AttentionMask("deserialized", allow)


def ascii_grid(mask: AttentionMask) -> str:
    """'#'/'.' dump, rows = queries, columns = keys."""
    return "\n".join(
        "".join("#" if v else "." for v in row) for row in mask.allow
    )
