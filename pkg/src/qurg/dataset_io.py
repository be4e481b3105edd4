"""File formats: interaction corpora, rewrite corpora, schemas, matrices,
and score reports.

All files are UTF-8 JSON carrying a ``"qurg_fmt": 1`` version field.  The
native interaction format is a single JSON document; rewrite corpora are
JSON lines (one example per line, the version field optional per line but
always written).  Serialization is canonical: reloading and re-saving any
file reproduces it byte for byte.

Tokenization rule: whitespace split with the punctuation marks ``. , ? !``
detached from word boundaries as separate tokens.  Case is preserved;
matching policies decide about case folding later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .rewrite_diff import (
    Interaction,
    RewriteEditMatrix,
    RewriteRelation,
    TokenSeq,
    token_seq,
)
from .rouge_eval import NORMALIZATION, CorpusRougeReport, RougeScore
from .schema_link import (
    Column,
    LinkRelation,
    LINK_RELATION_NAMES,
    Schema,
    SchemaLinkMatrix,
)

__all__ = [
    "DatasetError",
    "FormatVersionError",
    "FORMAT_VERSION",
    "tokenize",
    "RewriteExample",
    "Corpus",
    "load_interactions",
    "save_interactions",
    "load_rewrite_corpus",
    "save_rewrite_corpus",
    "load_matrix",
    "save_matrix",
    "load_link_matrix",
    "save_link_matrix",
    "load_schema",
    "save_schema",
    "save_rouge_report",
    "load_rouge_report",
    "convert_sparc_interactions",
]

FORMAT_VERSION = 1

_DETACHED_PUNCT = (".", ",", "?", "!")


class DatasetError(ValueError):
    """A file failed to parse or validate."""


class FormatVersionError(DatasetError):
    """The file's format version is missing or unsupported."""


def tokenize(text: str) -> TokenSeq:
    """Whitespace tokenization with ``. , ? !`` detached as own tokens."""
    tokens: list[str] = []
    for chunk in text.split():
        lead: list[str] = []
        trail: list[str] = []
        while chunk and chunk[0] in _DETACHED_PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and chunk[-1] in _DETACHED_PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tuple(tokens)


@dataclass(frozen=True)
class RewriteExample:
    """A (history, question, rewrite) training/evaluation triple."""

    history: tuple[TokenSeq, ...]
    question: TokenSeq
    rewrite: TokenSeq
    example_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(token_seq(t) for t in self.history))
        object.__setattr__(self, "question", token_seq(self.question))
        object.__setattr__(self, "rewrite", token_seq(self.rewrite))
        if not self.rewrite:
            raise ValueError("rewrite must be non-empty")

    def as_interaction(self) -> Interaction:
        return Interaction(
            self.history, self.question, self.rewrite, interaction_id=self.example_id
        )


@dataclass(frozen=True)
class Corpus:
    """A loaded example collection with its provenance tag."""

    examples: tuple[RewriteExample, ...]
    source: str = ""

    @property
    def counts(self) -> dict[str, int]:
        return {"examples": len(self.examples)}


def _dump_canonical(payload: Mapping[str, Any]) -> str:
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n"


def _write_json(path: str | Path, payload: Mapping[str, Any]) -> None:
    Path(path).write_text(_dump_canonical(payload), encoding="utf-8")


def _read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc


def _check_version(payload: Any, path: str | Path) -> None:
    if not isinstance(payload, dict) or "qurg_fmt" not in payload:
        raise FormatVersionError(f"{path}: missing qurg_fmt version field")
    if payload["qurg_fmt"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: unsupported format version {payload['qurg_fmt']!r}"
        )


def _require(record: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in record:
        raise DatasetError(f"{where}: missing required field {key!r}")
    return record[key]


def load_interactions(path: str | Path, format: str = "native") -> list[Interaction]:
    """Load interactions from the native JSON document (or SParC-style JSON).

    An empty (zero-byte or whitespace-only) file yields an empty list.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    if format == "sparc":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(
                f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}"
            ) from exc
        return convert_sparc_interactions(raw)
    if format != "native":
        raise ValueError(f"unknown interactions format {format!r}")
    payload = _read_json(path)
    _check_version(payload, path)
    records = _require(payload, "interactions", str(path))
    out: list[Interaction] = []
    for pos, record in enumerate(records):
        where = f"{path}: interaction {pos}"
        utterances = _require(record, "utterances", where)
        if not utterances:
            raise DatasetError(f"{where}: empty interaction")
        turns = [tokenize(u) for u in utterances]
        if not turns[-1]:
            raise DatasetError(f"{where}: current question has no tokens")
        rewrite = tokenize(record["rewrite"]) if record.get("rewrite") else None
        out.append(
            Interaction(
                tuple(turns[:-1]),
                turns[-1],
                rewrite,
                interaction_id=record.get("id", str(pos)),
            )
        )
    return out


def save_interactions(path: str | Path, interactions: Sequence[Interaction]) -> None:
    records = []
    for inter in interactions:
        record: dict[str, Any] = {
            "id": inter.interaction_id,
            "utterances": [" ".join(t) for t in (*inter.context_turns, inter.question)],
        }
        if inter.gold_rewrite is not None:
            record["rewrite"] = " ".join(inter.gold_rewrite)
        records.append(record)
    _write_json(path, {"qurg_fmt": FORMAT_VERSION, "interactions": records})


def convert_sparc_interactions(raw: Sequence[Mapping[str, Any]]) -> list[Interaction]:
    """Adapt raw SParC/CoSQL-style JSON: every turn of every interaction
    becomes one Interaction with the cumulative preceding turns as context."""
    out: list[Interaction] = []
    for pos, entry in enumerate(raw):
        turns = [tokenize(item["utterance"]) for item in entry.get("interaction", [])]
        for t in range(len(turns)):
            if not turns[t]:
                raise DatasetError(f"interaction {pos}: turn {t + 1} has no tokens")
            out.append(
                Interaction(
                    tuple(turns[:t]),
                    turns[t],
                    None,
                    interaction_id=f"{entry.get('database_id', pos)}#{pos}.{t + 1}",
                )
            )
    return out


def load_rewrite_corpus(path: str | Path) -> list[RewriteExample]:
    """Load a JSON-lines rewrite corpus.

    Each line is ``{"history": [...], "question": "...", "rewrite": "...",
    "id": "..."}``.  Example ids must be unique; blank lines are skipped.
    """
    examples: list[RewriteExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON: {exc.msg}") from exc
            if "qurg_fmt" in record and record["qurg_fmt"] != FORMAT_VERSION:
                raise FormatVersionError(
                    f"{where}: unsupported format version {record['qurg_fmt']!r}"
                )
            history = [tokenize(turn) for turn in _require(record, "history", where)]
            question = tokenize(_require(record, "question", where))
            rewrite = tokenize(_require(record, "rewrite", where))
            example_id = str(_require(record, "id", where))
            if example_id in seen:
                raise DatasetError(f"{where}: duplicate example id {example_id!r}")
            seen.add(example_id)
            if not question:
                raise DatasetError(f"{where}: question has no tokens")
            if not rewrite:
                raise DatasetError(f"{where}: rewrite has no tokens")
            examples.append(RewriteExample(tuple(history), question, rewrite, example_id))
    return examples


def save_rewrite_corpus(path: str | Path, examples: Iterable[RewriteExample]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for ex in examples:
            handle.write(
                _dump_canonical(
                    {
                        "qurg_fmt": FORMAT_VERSION,
                        "history": [" ".join(t) for t in ex.history],
                        "question": " ".join(ex.question),
                        "rewrite": " ".join(ex.rewrite),
                        "id": ex.example_id,
                    }
                )
            )


def _cells_payload(cells: list[tuple[int, int, str]]) -> list[dict[str, Any]]:
    return [{"i": i, "j": j, "rel": rel} for i, j, rel in cells]


def save_matrix(path: str | Path, matrix: RewriteEditMatrix) -> None:
    """Write a rewrite edit matrix; cells sorted by (i, j) for determinism."""
    _write_json(
        path,
        {
            "qurg_fmt": FORMAT_VERSION,
            "context_tokens": list(matrix.context_tokens),
            "question_tokens": list(matrix.question_tokens),
            "cells": _cells_payload(
                [(i, j, rel.value) for i, j, rel in matrix.sorted_cells()]
            ),
        },
    )


_REWRITE_RELATIONS_BY_NAME = {rel.value: rel for rel in RewriteRelation}


def load_matrix(path: str | Path) -> RewriteEditMatrix:
    payload = _read_json(path)
    _check_version(payload, path)
    context = token_seq(_require(payload, "context_tokens", str(path)))
    question = token_seq(_require(payload, "question_tokens", str(path)))
    size = len(context) + len(question)
    cells: dict[tuple[int, int], RewriteRelation] = {}
    for cell in _require(payload, "cells", str(path)):
        i, j, name = cell.get("i"), cell.get("j"), cell.get("rel")
        rel = _REWRITE_RELATIONS_BY_NAME.get(name)
        if rel is None:
            raise DatasetError(f"{path}: cell ({i},{j}) has unknown relation {name!r}")
        if not (isinstance(i, int) and isinstance(j, int) and 0 <= i < size and 0 <= j < size):
            raise DatasetError(f"{path}: cell ({i},{j}) out of bounds for size {size}")
        cells[(i, j)] = rel
    return RewriteEditMatrix(context, question, cells)


def save_link_matrix(path: str | Path, matrix: SchemaLinkMatrix) -> None:
    schema = matrix.schema
    _write_json(
        path,
        {
            "qurg_fmt": FORMAT_VERSION,
            "question_tokens": list(matrix.question_tokens),
            "context_tokens": list(matrix.context_tokens),
            "tables": [list(name) for name in schema.tables],
            "columns": [
                {"name": list(col.name), "table": col.table, "type": col.type}
                for col in schema.columns
            ],
            "primary_keys": sorted(schema.primary_keys),
            "foreign_keys": [list(fk) for fk in sorted(schema.foreign_keys)],
            "relations": list(LINK_RELATION_NAMES),
            "cells": _cells_payload(
                [(i, j, rel.value) for i, j, rel in matrix.sorted_cells()]
            ),
        },
    )


_LINK_RELATIONS_BY_NAME = {rel.value: rel for rel in LinkRelation}


def load_link_matrix(path: str | Path) -> SchemaLinkMatrix:
    payload = _read_json(path)
    _check_version(payload, path)
    schema = _schema_from_payload(payload, path)
    question = token_seq(_require(payload, "question_tokens", str(path)))
    context = token_seq(_require(payload, "context_tokens", str(path)))
    matrix = SchemaLinkMatrix(question, context, schema, {})
    for cell in _require(payload, "cells", str(path)):
        i, j, name = cell.get("i"), cell.get("j"), cell.get("rel")
        rel = _LINK_RELATIONS_BY_NAME.get(name)
        if rel is None:
            raise DatasetError(f"{path}: cell ({i},{j}) has unknown relation {name!r}")
        if not (isinstance(i, int) and isinstance(j, int) and 0 <= i < matrix.size and 0 <= j < matrix.size):
            raise DatasetError(
                f"{path}: cell ({i},{j}) out of bounds for size {matrix.size}"
            )
        matrix.cells[(i, j)] = rel
    return matrix


def _schema_from_payload(payload: Mapping[str, Any], path: str | Path) -> Schema:
    columns = tuple(
        Column(
            token_seq(_require(col, "name", f"{path}: column {idx}")),
            _require(col, "table", f"{path}: column {idx}"),
            col.get("type", "text"),
        )
        for idx, col in enumerate(_require(payload, "columns", str(path)))
    )
    return Schema(
        tuple(token_seq(name) for name in _require(payload, "tables", str(path))),
        columns,
        frozenset(payload.get("primary_keys", ())),
        frozenset(tuple(fk) for fk in payload.get("foreign_keys", ())),
    )


def load_schema(path: str | Path) -> Schema:
    """Load a simplified Spider-style schema file; invariants are enforced."""
    payload = _read_json(path)
    _check_version(payload, path)
    return _schema_from_payload(payload, path)


def save_schema(path: str | Path, schema: Schema) -> None:
    _write_json(
        path,
        {
            "qurg_fmt": FORMAT_VERSION,
            "tables": [list(name) for name in schema.tables],
            "columns": [
                {"name": list(col.name), "table": col.table, "type": col.type}
                for col in schema.columns
            ],
            "primary_keys": sorted(schema.primary_keys),
            "foreign_keys": [list(fk) for fk in sorted(schema.foreign_keys)],
        },
    )


def _score_payload(score: RougeScore) -> dict[str, float]:
    return {"precision": score.precision, "recall": score.recall, "f1": score.f1}


def save_rouge_report(path: str | Path, report: CorpusRougeReport) -> None:
    _write_json(
        path,
        {
            "qurg_fmt": FORMAT_VERSION,
            "normalization": NORMALIZATION,
            "r1": _score_payload(report.r1),
            "r2": _score_payload(report.r2),
            "rl": _score_payload(report.rl),
            "pairs": report.pair_count,
        },
    )


def load_rouge_report(path: str | Path) -> CorpusRougeReport:
    payload = _read_json(path)
    _check_version(payload, path)

    def score(key: str) -> RougeScore:
        block = _require(payload, key, str(path))
        return RougeScore(block["precision"], block["recall"], block["f1"])

    return CorpusRougeReport(
        score("r1"), score("r2"), score("rl"), _require(payload, "pairs", str(path))
    )
