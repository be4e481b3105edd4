"""Bi-directional rewrite edit matrices from (question, context, rewrite) triples.

Given the current question of a conversation turn, the flattened history
context, and a self-contained rewrite of that question, this module aligns
question and rewrite with an LCS, tags the out-of-alignment words as ADD
(rewrite side) or DEL (question side), grounds the ADD spans in the context,
and records the resulting substitute/insert operations as a square relation
matrix over the ``[context; question]`` token positions.

Every operation here is a pure function of its inputs; all produced values
are immutable and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

TokenSeq = tuple[str, ...]

__all__ = [
    "TokenSeq",
    "token_seq",
    "MatchPolicy",
    "Interaction",
    "SpanKind",
    "EditSpan",
    "OpKind",
    "EditOp",
    "RewriteRelation",
    "RewriteEditMatrix",
    "EditConflictError",
    "lcs",
    "tag_edits",
    "extract_edit_ops",
    "build_rewrite_matrix",
    "build_from_interaction",
]


class EditConflictError(ValueError):
    """Two edit operations assign different relation types to one cell."""


def token_seq(tokens: Iterable[str]) -> TokenSeq:
    """Validate and freeze a token sequence.

    Tokens must be non-empty strings without internal whitespace.
    """
    out = tuple(tokens)
    for tok in out:
        if not isinstance(tok, str) or not tok:
            raise ValueError(f"empty or non-string token: {tok!r}")
        if any(ch.isspace() for ch in tok):
            raise ValueError(f"token contains whitespace: {tok!r}")
    return out


def _plural_forms(token: str) -> frozenset[str]:
    # "cities" -> {"cities", "citie", "city"}, "flights" -> {"flights", "flight"}
    forms = {token}
    if token.endswith("s") and len(token) > 1:
        forms.add(token[:-1])
    if token.endswith("ies") and len(token) > 3:
        forms.add(token[:-3] + "y")
    return frozenset(forms)


@dataclass(frozen=True)
class MatchPolicy:
    """Token-equality policy used for alignment and context grounding.

    ``lowercase`` folds case before comparing.  ``plural_stem`` additionally
    treats singular/plural surface forms as equal (trailing "s" and the
    "-ies"/"-y" alternation), so e.g. "city" matches "cities".
    """

    lowercase: bool = True
    plural_stem: bool = True

    def forms(self, token: str) -> frozenset[str]:
        t = token.lower() if self.lowercase else token
        return _plural_forms(t) if self.plural_stem else frozenset((t,))

    def matches(self, a: str, b: str) -> bool:
        return not self.forms(a).isdisjoint(self.forms(b))


DEFAULT_POLICY = MatchPolicy()

EXACT_POLICY = MatchPolicy(lowercase=False, plural_stem=False)


@dataclass(frozen=True)
class Interaction:
    """One conversation state: history turns plus the current question.

    ``context_turns`` is chronological (first turn first).  ``turn_index``
    is derived: the current question is turn ``len(context_turns) + 1``.
    """

    context_turns: tuple[TokenSeq, ...]
    question: TokenSeq
    gold_rewrite: TokenSeq | None = None
    interaction_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "context_turns", tuple(token_seq(t) for t in self.context_turns)
        )
        object.__setattr__(self, "question", token_seq(self.question))
        if self.gold_rewrite is not None:
            object.__setattr__(self, "gold_rewrite", token_seq(self.gold_rewrite))
        if not self.question:
            raise ValueError("interaction question must be non-empty")

    @property
    def turn_index(self) -> int:
        return len(self.context_turns) + 1

    def flat_context(self) -> TokenSeq:
        """Context turns concatenated chronologically, no separators."""
        return tuple(tok for turn in self.context_turns for tok in turn)

    def turn_lengths(self) -> tuple[int, ...]:
        return tuple(len(turn) for turn in self.context_turns)


class SpanKind(Enum):
    ADD = "ADD"
    DEL = "DEL"


@dataclass(frozen=True)
class EditSpan:
    """A maximal run of same-tag tokens on one side of the alignment."""

    kind: SpanKind
    start: int
    end_exclusive: int
    side: str  # "rewrite" for ADD, "question" for DEL

    def __post_init__(self) -> None:
        if self.start >= self.end_exclusive:
            raise ValueError("edit span must be non-empty")
        expected = "rewrite" if self.kind is SpanKind.ADD else "question"
        if self.side != expected:
            raise ValueError(f"{self.kind.value} spans live on the {expected} side")

    def indices(self) -> range:
        return range(self.start, self.end_exclusive)


class OpKind(Enum):
    SUBSTITUTE = "Substitute"
    INSERT = "Insert"


@dataclass(frozen=True)
class EditOp:
    """A grounded edit: a context span substituted for, or inserted before,
    question tokens.

    ``question_anchor`` is the replaced range start for substitutes and the
    insertion point for inserts; an anchor equal to ``len(question)`` means
    a virtual end-of-question insertion point.
    """

    kind: OpKind
    context_range: tuple[int, int]
    question_anchor: int
    question_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        cs, ce = self.context_range
        if cs >= ce:
            raise ValueError("context_range must be non-empty")
        if self.kind is OpKind.INSERT:
            if self.question_range is not None:
                raise ValueError("insert ops carry no question_range")
        else:
            if self.question_range is None:
                raise ValueError("substitute ops require a question_range")
            qs, qe = self.question_range
            if qs >= qe:
                raise ValueError("question_range must be non-empty")
            if qs != self.question_anchor:
                raise ValueError("substitute anchor must equal question_range start")


class RewriteRelation(Enum):
    """Directional relation types between question and context tokens."""

    Q_C_INS = "Q-C-Ins"
    Q_C_SUB = "Q-C-Sub"
    C_Q_INS = "C-Q-Ins"
    C_Q_SUB = "C-Q-Sub"


REWRITE_RELATION_NAMES = tuple(rel.value for rel in RewriteRelation)


@dataclass(frozen=True)
class RewriteEditMatrix:
    """Sparse square relation matrix over the ``[context; question]`` layout.

    A missing cell means "no relation".  Indices ``0..len(context)-1`` are
    context positions, the rest question positions.
    """

    context_tokens: TokenSeq
    question_tokens: TokenSeq
    cells: dict[tuple[int, int], RewriteRelation] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "context_tokens", token_seq(self.context_tokens))
        object.__setattr__(self, "question_tokens", token_seq(self.question_tokens))
        n = self.size
        for (i, j), rel in self.cells.items():
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"cell ({i},{j}) out of bounds for size {n}")
            if not isinstance(rel, RewriteRelation):
                raise ValueError(f"cell ({i},{j}) carries a non-relation value")

    @property
    def context_size(self) -> int:
        return len(self.context_tokens)

    @property
    def question_size(self) -> int:
        return len(self.question_tokens)

    @property
    def size(self) -> int:
        return self.context_size + self.question_size

    def relation_at(self, i: int, j: int) -> RewriteRelation | None:
        return self.cells.get((i, j))

    def sorted_cells(self) -> list[tuple[int, int, RewriteRelation]]:
        return [(i, j, rel) for (i, j), rel in sorted(self.cells.items())]

    def is_context_index(self, i: int) -> bool:
        return i < self.context_size


def lcs(
    a: Sequence[str], b: Sequence[str], policy: MatchPolicy = DEFAULT_POLICY
) -> tuple[tuple[int, int], ...]:
    """Longest common subsequence alignment between two token sequences.

    Returns index pairs, strictly increasing in both coordinates, whose
    tokens are equal under ``policy``.  Among all maximum-length alignments
    the lexicographically smallest pair list is returned (leftmost
    tie-break), which keeps downstream anchoring deterministic.
    """
    n, m = len(a), len(b)
    eq = [[policy.matches(a[i], b[j]) for j in range(m)] for i in range(n)]
    # dp[i][j] = LCS length of the suffixes a[i:], b[j:]
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = dp[i], dp[i + 1]
        for j in range(m - 1, -1, -1):
            if eq[i][j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = below[j] if below[j] >= row[j + 1] else row[j + 1]
    pairs: list[tuple[int, int]] = []
    i = j = 0
    while dp[i][j] > 0:
        target = dp[i][j]
        found = False
        for i2 in range(i, n):
            if dp[i2][j] < target:
                break
            for j2 in range(j, m):
                if dp[i2][j2] < target:
                    break
                if eq[i2][j2] and dp[i2 + 1][j2 + 1] == target - 1:
                    pairs.append((i2, j2))
                    i, j = i2 + 1, j2 + 1
                    found = True
                    break
            if found:
                break
    return tuple(pairs)


def _unaligned_runs(length: int, aligned: set[int]) -> Iterator[tuple[int, int]]:
    start = None
    for idx in range(length):
        if idx in aligned:
            if start is not None:
                yield start, idx
                start = None
        elif start is None:
            start = idx
    if start is not None:
        yield start, length


def tag_edits(
    question: Sequence[str],
    rewrite: Sequence[str],
    policy: MatchPolicy = DEFAULT_POLICY,
) -> tuple[list[EditSpan], list[EditSpan]]:
    """Tag question/rewrite tokens outside the LCS alignment as DEL/ADD spans.

    Consecutive same-tag tokens are merged into a single span.  Returns
    ``(del_spans, add_spans)``.
    """
    pairs = lcs(question, rewrite, policy)
    return _spans_from_alignment(len(question), len(rewrite), pairs)


def _spans_from_alignment(
    question_len: int, rewrite_len: int, pairs: Sequence[tuple[int, int]]
) -> tuple[list[EditSpan], list[EditSpan]]:
    q_aligned = {i for i, _ in pairs}
    r_aligned = {j for _, j in pairs}
    del_spans = [
        EditSpan(SpanKind.DEL, s, e, "question")
        for s, e in _unaligned_runs(question_len, q_aligned)
    ]
    add_spans = [
        EditSpan(SpanKind.ADD, s, e, "rewrite")
        for s, e in _unaligned_runs(rewrite_len, r_aligned)
    ]
    return del_spans, add_spans


def _left_anchor(pairs: Sequence[tuple[int, int]], coord: int, axis: int) -> int:
    """Index into ``pairs`` of the last alignment pair strictly left of
    ``coord`` on the given axis (0 = question, 1 = rewrite), or -1."""
    k = -1
    for idx, pair in enumerate(pairs):
        if pair[axis] < coord:
            k = idx
        else:
            break
    return k


def _find_context_occurrence(
    context: Sequence[str],
    span_tokens: Sequence[str],
    policy: MatchPolicy,
    occurrence: str,
) -> tuple[int, int] | None:
    width = len(span_tokens)
    hits = [
        start
        for start in range(len(context) - width + 1)
        if all(policy.matches(context[start + k], span_tokens[k]) for k in range(width))
    ]
    if not hits:
        return None
    start = hits[-1] if occurrence == "last" else hits[0]
    return start, start + width


def extract_edit_ops(
    question: Sequence[str],
    context: Sequence[str],
    rewrite: Sequence[str],
    policy: MatchPolicy = DEFAULT_POLICY,
    occurrence: str = "last",
) -> list[EditOp]:
    """Ground the rewrite's ADD spans in the context as edit operations.

    An ADD span that occurs contiguously in the context becomes a
    Substitute when a DEL span shares its flanking LCS anchor pair, and an
    Insert (anchored at the right LCS anchor's question index) otherwise.
    ADD spans with no context occurrence are dropped.  ``occurrence``
    selects the "last" (most recent turn) or "first" context occurrence
    when the span appears more than once.
    """
    if occurrence not in ("last", "first"):
        raise ValueError(f"occurrence must be 'last' or 'first', got {occurrence!r}")
    pairs = lcs(question, rewrite, policy)
    del_spans, add_spans = _spans_from_alignment(len(question), len(rewrite), pairs)
    # Between two consecutive alignment pairs there is at most one DEL run,
    # so the left anchor index identifies a DEL span uniquely.
    del_by_anchor = {_left_anchor(pairs, span.start, 0): span for span in del_spans}
    ops: list[EditOp] = []
    for span in add_spans:
        ctx_range = _find_context_occurrence(
            context, rewrite[span.start : span.end_exclusive], policy, occurrence
        )
        if ctx_range is None:
            continue
        left_k = _left_anchor(pairs, span.start, 1)
        matched_del = del_by_anchor.get(left_k)
        if matched_del is not None:
            ops.append(
                EditOp(
                    OpKind.SUBSTITUTE,
                    ctx_range,
                    question_anchor=matched_del.start,
                    question_range=(matched_del.start, matched_del.end_exclusive),
                )
            )
        else:
            right = pairs[left_k + 1] if left_k + 1 < len(pairs) else None
            anchor = right[0] if right is not None else len(question)
            ops.append(EditOp(OpKind.INSERT, ctx_range, question_anchor=anchor))
    return ops


def build_rewrite_matrix(
    ops: Iterable[EditOp],
    context: Sequence[str],
    question: Sequence[str],
) -> RewriteEditMatrix:
    """Expand edit operations into the bi-directional sparse relation matrix.

    Each Substitute pairs every context token in its range with every
    question token in its range (C-Q-Sub one way, Q-C-Sub the other); each
    Insert pairs its context tokens with the single anchor question token.
    A virtual end-of-question anchor folds onto the final question token.
    Raises :class:`EditConflictError` when two ops disagree on one cell.
    """
    context = token_seq(context)
    question = token_seq(question)
    n_ctx, n_q = len(context), len(question)
    ops = list(ops)
    if ops and n_q == 0:
        raise ValueError("an empty question cannot host edit operations")
    cells: dict[tuple[int, int], RewriteRelation] = {}

    def put(i: int, j: int, rel: RewriteRelation) -> None:
        existing = cells.get((i, j))
        if existing is not None and existing is not rel:
            raise EditConflictError(
                f"cell ({i},{j}) assigned both {existing.value} and {rel.value}"
            )
        cells[(i, j)] = rel

    for op in ops:
        cs, ce = op.context_range
        if not (0 <= cs < ce <= n_ctx):
            raise ValueError(f"context_range {op.context_range} out of bounds")
        if op.kind is OpKind.SUBSTITUTE:
            qs, qe = op.question_range  # type: ignore[misc]
            if not (0 <= qs < qe <= n_q):
                raise ValueError(f"question_range {op.question_range} out of bounds")
            for ci in range(cs, ce):
                for qi in range(qs, qe):
                    put(ci, n_ctx + qi, RewriteRelation.C_Q_SUB)
                    put(n_ctx + qi, ci, RewriteRelation.Q_C_SUB)
        else:
            if not (0 <= op.question_anchor <= n_q):
                raise ValueError(f"insert anchor {op.question_anchor} out of bounds")
            anchor = min(op.question_anchor, n_q - 1)
            for ci in range(cs, ce):
                put(ci, n_ctx + anchor, RewriteRelation.C_Q_INS)
                put(n_ctx + anchor, ci, RewriteRelation.Q_C_INS)
    return RewriteEditMatrix(context, question, cells)


def build_from_interaction(
    interaction: Interaction,
    rewrite: Sequence[str] | None = None,
    policy: MatchPolicy = DEFAULT_POLICY,
    occurrence: str = "last",
) -> RewriteEditMatrix:
    """Build the edit matrix for an interaction against a rewritten question.

    ``rewrite`` defaults to the interaction's gold rewrite.  The context is
    flattened chronologically with no separator tokens.
    """
    if rewrite is None:
        rewrite = interaction.gold_rewrite
        if rewrite is None:
            raise ValueError("interaction has no gold rewrite and none was given")
    context = interaction.flat_context()
    ops = extract_edit_ops(interaction.question, context, rewrite, policy, occurrence)
    return build_rewrite_matrix(ops, context, interaction.question)
