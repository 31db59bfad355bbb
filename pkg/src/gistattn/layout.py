"""Augmented token layout: raw chunks, interleaved gist tokens, meta-gist levels.

The prefix of length ``n_raw`` is split into chunks of ``chunk_len`` raw
tokens; a level-1 summary (gist) follows each chunk. When ``depth >= 2``,
a level-``l`` summary follows every ``group_factor`` level-``(l-1)``
summaries, recursively up to ``depth``. The final chunk/group at each
level may be partial; its summary is emitted right after its last
existing child, never padded.

Summary ids are ``(level, index)`` pairs, 1-based per level in scope
order. Positions are 0-based indices into the augmented order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .errors import ValidationError

RAW = "raw"
SUMMARY = "summary"


@dataclass(frozen=True)
class LayoutSpec:
    """Structural parameters of an augmented sequence."""

    n_raw: int
    chunk_len: int
    depth: int = 1
    group_factor: int = 0  # required (>=2) only when depth >= 2

    def __post_init__(self):
        if self.n_raw < 1:
            raise ValidationError(f"n_raw must be >= 1, got {self.n_raw}")
        if self.chunk_len < 1:
            raise ValidationError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.depth >= 2 and self.group_factor < 2:
            raise ValidationError(
                f"group_factor must be >= 2 when depth >= 2, got {self.group_factor}"
            )

    @property
    def n_chunks(self) -> int:
        return -(-self.n_raw // self.chunk_len)

    def n_summaries(self, level: int) -> int:
        """Number of level-``level`` summary tokens (level 1 = gists)."""
        if not 1 <= level <= self.depth:
            raise ValidationError(f"level {level} outside 1..{self.depth}")
        return -(-self.n_chunks // self.group_factor ** (level - 1))

    @property
    def total_len(self) -> int:
        return self.n_raw + sum(self.n_summaries(l) for l in range(1, self.depth + 1))


@dataclass(frozen=True)
class TokenDescriptor:
    position: int
    kind: str  # RAW or SUMMARY
    level: int  # 0 for raw tokens, >= 1 for summaries
    chunk_id: int | None  # owning chunk for raw and level-1 tokens
    index: int  # raw index (0-based) or summary index (1-based within level)
    scope: tuple[int, int] | None  # half-open raw span, summaries only
    ancestors: tuple[tuple[int, int], ...]  # (level, index) per level above

    @property
    def summary_id(self) -> tuple[int, int]:
        if self.kind != SUMMARY:
            raise ValidationError(f"token at {self.position} is not a summary")
        return (self.level, self.index)


@dataclass(frozen=True)
class AugmentedLayout:
    spec: LayoutSpec
    tokens: tuple[TokenDescriptor, ...]
    summary_positions: dict[tuple[int, int], int] = field(repr=False)
    chunk_raw_positions: dict[int, tuple[int, ...]] = field(repr=False)

    @property
    def total_len(self) -> int:
        return len(self.tokens)

    def position_of(self, summary_id: tuple[int, int]) -> int:
        try:
            return self.summary_positions[summary_id]
        except KeyError:
            raise ValidationError(f"unknown summary id {summary_id}") from None

    def raw_positions(self, chunk_id: int) -> tuple[int, ...]:
        try:
            return self.chunk_raw_positions[chunk_id]
        except KeyError:
            raise ValidationError(f"unknown chunk id {chunk_id}") from None

    def summaries_at(self, level: int) -> list[TokenDescriptor]:
        return [t for t in self.tokens if t.kind == SUMMARY and t.level == level]


def _ancestors_of_chunk(spec: LayoutSpec, chunk_id: int) -> tuple[tuple[int, int], ...]:
    J = max(spec.group_factor, 1)
    return tuple(
        (lvl, -(-chunk_id // J ** (lvl - 1))) for lvl in range(1, spec.depth + 1)
    )


def build_layout(spec: LayoutSpec) -> AugmentedLayout:
    """Construct the augmented token order for ``spec``.

    Deterministic: the layout is the unique one in which every summary
    token sits immediately after the last token of its (possibly
    partial) group.
    """
    n, L, t, J = spec.n_raw, spec.chunk_len, spec.depth, max(spec.group_factor, 1)
    M = spec.n_chunks
    tokens: list[TokenDescriptor] = []
    summary_positions: dict[tuple[int, int], int] = {}
    chunk_raw: dict[int, list[int]] = {}

    for m in range(1, M + 1):
        chunk_anc = _ancestors_of_chunk(spec, m)
        lo, hi = (m - 1) * L, min(m * L, n)
        chunk_raw[m] = []
        for r in range(lo, hi):
            pos = len(tokens)
            chunk_raw[m].append(pos)
            tokens.append(
                TokenDescriptor(pos, RAW, 0, m, r, None, chunk_anc)
            )
        # close every level whose group ends at chunk m
        for lvl in range(1, t + 1):
            width = J ** (lvl - 1)
            if m % width == 0 or m == M:
                k = -(-m // width)
                pos = len(tokens)
                scope = ((k - 1) * width * L, min(k * width * L, n))
                anc = tuple(
                    (up, -(-k // J ** (up - lvl)))
                    for up in range(lvl + 1, t + 1)
                )
                tokens.append(
                    TokenDescriptor(
                        pos, SUMMARY, lvl, m if lvl == 1 else None, k, scope, anc
                    )
                )
                summary_positions[(lvl, k)] = pos

    layout = AugmentedLayout(
        spec=spec,
        tokens=tuple(tokens),
        summary_positions=summary_positions,
        chunk_raw_positions={m: tuple(v) for m, v in chunk_raw.items()},
    )
    assert layout.total_len == spec.total_len
    return layout


def scope_of(layout: AugmentedLayout, summary_id: tuple[int, int]) -> tuple[int, int]:
    """Half-open raw-token span compressed by the summary."""
    pos = layout.position_of(summary_id)
    scope = layout.tokens[pos].scope
    assert scope is not None
    return scope


def children_of(
    layout: AugmentedLayout, summary_id: tuple[int, int]
) -> list[tuple[int, int]]:
    """Summary ids one level below, contiguous, at most ``group_factor`` many."""
    level, k = summary_id
    layout.position_of(summary_id)  # existence check
    if level == 1:
        return []
    J = layout.spec.group_factor
    lo = (k - 1) * J + 1
    hi = min(k * J, layout.spec.n_summaries(level - 1))
    return [(level - 1, j) for j in range(lo, hi + 1)]


def group_start_position(layout: AugmentedLayout, summary_pos: int) -> int:
    """Augmented position of the first token inside a summary's group.

    The group of a summary token is the contiguous run of augmented
    positions it closes: everything from the first raw token of its
    scope up to (excluding) the summary itself.
    """
    tok = layout.tokens[summary_pos]
    if tok.kind != SUMMARY:
        raise ValidationError(f"position {summary_pos} is not a summary token")
    first_chunk = (tok.scope[0] // layout.spec.chunk_len) + 1
    return layout.chunk_raw_positions[first_chunk][0]


def iter_dump_lines(layout: AugmentedLayout) -> Iterator[str]:
    """Text dump, one token per line: position, kind, level, chunk-or-scope."""
    for tok in layout.tokens:
        if tok.kind == RAW:
            tail = str(tok.chunk_id)
        else:
            tail = f"{tok.scope[0]}:{tok.scope[1]}"
        yield f"{tok.position}\t{tok.kind}\t{tok.level}\t{tail}"
