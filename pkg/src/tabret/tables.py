"""Table, query and corpus data model plus the line-delimited loaders."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .text import tokenize

logger = logging.getLogger(__name__)

ASPECTS = ("headers", "cells", "caption")


class ParseError(ValueError):
    """A record is missing a required field or is structurally malformed."""


class RegularityError(ParseError):
    """A table record has rows whose width differs from the header count."""

    def __init__(self, table_id: str, violations: list[str]):
        self.table_id = table_id
        self.violations = violations
        super().__init__(f"table {table_id!r} is not regular: " + "; ".join(violations))


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Table:
    id: str
    headers: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]
    caption: str | None = None

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": self.id}
        if self.caption is not None:
            rec["caption"] = self.caption
        rec["headers"] = list(self.headers)
        rec["rows"] = [list(r) for r in self.cells]
        return rec

    def permuted(self, row_order: Iterable[int], col_order: Iterable[int]) -> "Table":
        """Copy of the table with rows and columns reordered (headers follow columns)."""
        rows = list(row_order)
        cols = list(col_order)
        return Table(
            id=self.id,
            headers=tuple(self.headers[c] for c in cols),
            cells=tuple(tuple(self.cells[r][c] for c in cols) for r in rows),
            caption=self.caption,
        )


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    tokens: tuple[str, ...]
    relevant_table_ids: tuple[str, ...] = ()

    @classmethod
    def from_text(cls, qid: str, text: str, relevant: Iterable[str] = ()) -> "Query":
        return cls(id=qid, text=text, tokens=tuple(tokenize(text)), relevant_table_ids=tuple(relevant))


@dataclass
class RegularityReport:
    table_id: str
    is_regular: bool
    violations: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Corpus:
    tables: dict[str, Table]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tables)

    def __iter__(self) -> Iterator[Table]:
        return iter(self.tables.values())

    def __getitem__(self, table_id: str) -> Table:
        return self.tables[table_id]

    def ids(self) -> list[str]:
        return sorted(self.tables)

    @classmethod
    def from_tables(cls, tables: Iterable[Table], **provenance: Any) -> "Corpus":
        out: dict[str, Table] = {}
        for t in tables:
            if t.id in out:
                raise CorpusError(f"duplicate table id {t.id!r}")
            out[t.id] = t
        return cls(tables=out, provenance=dict(provenance))


def validate_regular(table: Table) -> RegularityReport:
    violations = []
    width = len(table.headers)
    if width == 0:
        violations.append("table has no headers")
    if len(table.cells) == 0:
        violations.append("table has no rows")
    for i, row in enumerate(table.cells):
        if width and len(row) != width:
            violations.append(f"row {i} has {len(row)} cells, expected {width}")
    return RegularityReport(table.id, not violations, violations)


def _string_list(value: Any, name: str, table_id: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"table {table_id!r}: field {name!r} must be a list of strings")
    return tuple(value)


def parse_table_record(raw: dict[str, Any], *, check: bool = True) -> Table:
    """Build a Table from a decoded record, copying text verbatim.

    With ``check`` set (the default) ragged tables raise RegularityError.
    """
    if not isinstance(raw, dict):
        raise ParseError("record must be an object")
    if "id" not in raw or raw["id"] in (None, ""):
        raise ParseError("missing field 'id'")
    tid = str(raw["id"])
    if "headers" not in raw:
        raise ParseError(f"table {tid!r}: missing field 'headers'")
    headers = _string_list(raw["headers"], "headers", tid)
    rows_raw = raw.get("rows", [])
    if not isinstance(rows_raw, list):
        raise ParseError(f"table {tid!r}: field 'rows' must be a list")
    cells = tuple(_string_list(r, "rows", tid) for r in rows_raw)
    caption = raw.get("caption")
    if caption is not None and not isinstance(caption, str):
        raise ParseError(f"table {tid!r}: field 'caption' must be a string")
    table = Table(id=tid, headers=headers, cells=cells, caption=caption)
    if check:
        report = validate_regular(table)
        if not report.is_regular:
            raise RegularityError(tid, report.violations)
    return table


def aspect_text(table: Table, aspect: str) -> list[str]:
    if aspect == "headers":
        return [tok for h in table.headers for tok in tokenize(h)]
    if aspect == "cells":
        return [tok for row in table.cells for c in row for tok in tokenize(c)]
    if aspect == "caption":
        return tokenize(table.caption) if table.caption else []
    raise ValueError(f"unknown aspect {aspect!r}")


def parse_aspects(spec: str | Iterable[str]) -> tuple[str, ...]:
    """Normalise an aspect list such as ``"caption,headers"`` into canonical order."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip() for n in names if n.strip()]
    unknown = [n for n in names if n not in ASPECTS]
    if unknown or not names:
        raise ValueError(f"bad aspect list {spec!r}; choose from {','.join(ASPECTS)}")
    return tuple(a for a in ASPECTS if a in names)


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    tables: dict[str, Table] = {}
    rejected: list[RegularityReport] = []
    for lineno, raw in _read_jsonl(path):
        try:
            table = parse_table_record(raw, check=False)
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        report = validate_regular(table)
        if not report.is_regular:
            logger.warning("rejecting irregular table %s: %s", table.id, "; ".join(report.violations))
            rejected.append(report)
            continue
        if table.id in tables:
            raise CorpusError(f"{path}:{lineno}: duplicate table id {table.id!r}")
        tables[table.id] = table
    if rejected:
        logger.info("loaded %d tables from %s, rejected %d irregular", len(tables), path, len(rejected))
    return Corpus(
        tables=tables,
        provenance={"path": str(path), "rejected": [r.table_id for r in rejected]},
    )


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in corpus.ids():
            fh.write(json.dumps(corpus[tid].to_record(), ensure_ascii=False) + "\n")


def load_queries(path: str | Path) -> list[Query]:
    path = Path(path)
    out = []
    seen = set()
    for lineno, raw in _read_jsonl(path):
        if not isinstance(raw, dict) or "id" not in raw or "text" not in raw:
            raise ParseError(f"{path}:{lineno}: query record needs 'id' and 'text'")
        qid = str(raw["id"])
        if qid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate query id {qid!r}")
        seen.add(qid)
        out.append(Query.from_text(qid, raw["text"], raw.get("relevant_table_ids", ())))
    return out


def save_queries(queries: Iterable[Query], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            rec: dict[str, Any] = {"id": q.id, "text": q.text}
            if q.relevant_table_ids:
                rec["relevant_table_ids"] = list(q.relevant_table_ids)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
