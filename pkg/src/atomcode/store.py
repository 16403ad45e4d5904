"""Tabular workspace and append-only run ledger.

A table is a UTF-8 CSV file with one row per analytic unit. Column roles are
inferred from header names:

* ``id``, ``doc_id``, ``segment_index`` -- identifiers (role ``id``)
* ``data`` -- the segment text sent to the model (exactly one)
* ``out:<label>:<pass>`` -- model outputs
* anything else -- context; ``context_<k>`` columns feed ``{{context_<k>}}``
  placeholders

The ledger is a JSONL file holding one :class:`RunRecord` per line.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
import warnings
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Mapping

from ._util import atomic_write_text, content_hash, parse_timestamp
from .errors import DuplicateRunError, FormatError, IoError, NotFoundError, SchemaError

logger = logging.getLogger(__name__)

ROLES = ("id", "data", "context", "output")
ID_COLUMNS = ("id", "doc_id", "segment_index")
DATA_COLUMN = "data"

COLUMN_NAME_RE = re.compile(r"[A-Za-z0-9_:.-]+")
OUTPUT_COLUMN_RE = re.compile(r"out:([A-Za-z0-9_.-]+):([A-Za-z0-9_.-]+)")
CONTEXT_COLUMN_RE = re.compile(r"context_([1-9][0-9]*)")

CELL_STATUSES = ("ok", "error", "skipped")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    pass_tag: str | None = None

    @property
    def label(self) -> str | None:
        m = OUTPUT_COLUMN_RE.fullmatch(self.name)
        return m.group(1) if m else None


@dataclass(frozen=True)
class Row:
    index: int
    doc_id: str
    values: dict[str, str]

    @property
    def data(self) -> str:
        return self.values.get(DATA_COLUMN, "")


@dataclass(frozen=True)
class CellOutput:
    raw_text: str
    status: str = "ok"
    run_id: str = ""

    def __post_init__(self):
        if self.status not in CELL_STATUSES:
            raise ValueError(f"unknown cell status {self.status!r}")
        if self.status == "ok" and not self.raw_text:
            raise ValueError("an ok cell must carry non-empty text")

    @property
    def cell_value(self) -> str:
        # error and skipped cells are persisted empty; their status lives in the ledger
        return self.raw_text if self.status == "ok" else ""


def parse_output_column(name: str) -> tuple[str, str]:
    """Split ``out:<label>:<pass>`` into ``(label, pass_tag)``."""
    m = OUTPUT_COLUMN_RE.fullmatch(name)
    if not m:
        raise SchemaError(f"output column {name!r} does not match out:<label>:<pass>")
    return m.group(1), m.group(2)


def output_column_name(label: str, pass_tag: str) -> str:
    name = f"out:{label}:{pass_tag}"
    parse_output_column(name)
    return name


def infer_column(name: str) -> ColumnSpec:
    if not name:
        raise SchemaError("empty column name")
    if not COLUMN_NAME_RE.fullmatch(name):
        raise SchemaError(f"column name {name!r} contains characters outside [A-Za-z0-9_:.-]")
    if name in ID_COLUMNS:
        return ColumnSpec(name, "id")
    if name == DATA_COLUMN:
        return ColumnSpec(name, "data")
    if name.startswith("out:"):
        _, pass_tag = parse_output_column(name)
        return ColumnSpec(name, "output", pass_tag)
    return ColumnSpec(name, "context")


@dataclass
class SegmentTable:
    columns: list[ColumnSpec]
    rows: list[Row]
    source_path: Path | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column names: {', '.join(dupes)}")
        for c in self.columns:
            if c.role not in ROLES:
                raise SchemaError(f"column {c.name!r} has unknown role {c.role!r}")
            if not c.name or not COLUMN_NAME_RE.fullmatch(c.name):
                raise SchemaError(f"invalid column name {c.name!r}")
        data_cols = [c for c in self.columns if c.role == "data"]
        if len(data_cols) != 1:
            raise SchemaError(f"table needs exactly one data column, found {len(data_cols)}")
        name_set = set(names)
        for i, row in enumerate(self.rows):
            if row.index != i:
                raise SchemaError(f"row indices must be contiguous from 0; row {i} has index {row.index}")
            if set(row.values) != name_set:
                raise SchemaError(f"row {i} value keys do not match the table columns")

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def data_column(self) -> str:
        return next(c.name for c in self.columns if c.role == "data")

    @property
    def context_columns(self) -> list[str]:
        """Context columns, ``context_<k>`` first in k order, then the rest in file order."""
        ctx = [c.name for c in self.columns if c.role == "context"]
        numbered = sorted(
            (n for n in ctx if CONTEXT_COLUMN_RE.fullmatch(n)),
            key=lambda n: int(CONTEXT_COLUMN_RE.fullmatch(n).group(1)),
        )
        return numbered + [n for n in ctx if n not in numbered]

    @property
    def output_columns(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "output"]

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def column(self, name: str) -> list[str]:
        if not self.has_column(name):
            raise SchemaError(f"no column named {name!r}")
        return [r.values[name] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def _doc_id(values: Mapping[str, str], index: int) -> str:
    for key in ("doc_id", "id"):
        if key in values:
            return values[key]
    return str(index)


def make_table(
    header: list[str], records: Iterable[list[str]], source_path: str | os.PathLike | None = None
) -> SegmentTable:
    columns = [infer_column(name) for name in header]
    rows = []
    for i, rec in enumerate(records):
        values = dict(zip(header, rec))
        rows.append(Row(i, _doc_id(values, i), values))
    return SegmentTable(columns, rows, Path(source_path) if source_path is not None else None)


def load_table(path: str | os.PathLike) -> SegmentTable:
    path = Path(path)
    try:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            reader = csv.reader(fh, strict=True)
            try:
                header = next(reader)
            except StopIteration:
                raise FormatError(f"{path}: missing header row") from None
            records = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise FormatError(
                        f"{path}: record {lineno} has {len(rec)} fields, header has {len(header)}"
                    )
                records.append(rec)
    except csv.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not header or header == [""]:
        raise FormatError(f"{path}: missing header row")
    return make_table(header, records, path)


def table_to_csv(table: SegmentTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    # QUOTE_MINIMAL leaves a bare CR unquoted when the terminator is LF
    quoted = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_ALL)
    names = table.column_names
    writer.writerow(names)
    for row in table.rows:
        cells = [row.values[n] for n in names]
        (quoted if any("\r" in c for c in cells) else writer).writerow(cells)
    return buf.getvalue()


def save_table(table: SegmentTable, path: str | os.PathLike | None = None) -> Path:
    target = Path(path) if path is not None else table.source_path
    if target is None:
        raise ValueError("table has no source_path; pass an explicit path")
    try:
        atomic_write_text(target, table_to_csv(table))
    except OSError as exc:
        raise IoError(f"cannot write {target}: {exc}") from exc
    return target


def write_outputs(
    table: SegmentTable,
    column: str,
    cells: Mapping[int, CellOutput],
    persist: bool = True,
) -> SegmentTable:
    """Return a copy of ``table`` with ``cells`` written into output ``column``.

    The column is appended if absent. Only the addressed cells change. When
    ``persist`` is true and the table has a ``source_path`` the new table is
    written back with an atomic replace.
    """
    return set_cells(table, column, {i: c.cell_value for i, c in cells.items()}, persist=persist)


def set_cells(
    table: SegmentTable,
    column: str,
    values: Mapping[int, str],
    persist: bool = True,
) -> SegmentTable:
    """Raw-string variant of :func:`write_outputs` (used for derived columns)."""
    _, pass_tag = parse_output_column(column)
    n = len(table.rows)
    for idx in values:
        if not 0 <= idx < n:
            raise IndexError(f"row index {idx} out of range for a {n}-row table")

    columns = list(table.columns)
    adding = not table.has_column(column)
    if adding:
        columns.append(ColumnSpec(column, "output", pass_tag))

    rows = []
    for row in table.rows:
        value = values.get(row.index)
        if value is None and not adding:
            rows.append(row)
            continue
        new_values = dict(row.values)
        if adding:
            new_values[column] = ""
        if value is not None:
            new_values[column] = value
        rows.append(replace(row, values=new_values))

    new = SegmentTable(columns, rows, table.source_path)
    if persist and new.source_path is not None:
        save_table(new)
    return new


# -- ledger -----------------------------------------------------------------


class LedgerWarning(UserWarning):
    """A ledger line could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, lineno: int):
        super().__init__(message)
        self.lineno = lineno


@dataclass
class PerRowEntry:
    row_index: int
    prompt_hash: str
    response_hash: str
    status: str
    latency_ms: int = 0
    token_usage: dict[str, int] | None = None
    error: str | None = None


@dataclass
class RunRecord:
    run_id: str
    timestamp: str
    module: str
    model_config: dict[str, Any] | None
    template_hash: str
    template_body: str
    source: str
    row_range: tuple[int, int]
    output_column: str
    per_row: list[PerRowEntry] = field(default_factory=list)
    session_id: str | None = None
    template_name: str | None = None
    outcome: str = "completed"
    params: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.run_id:
            raise SchemaError("run record needs a run_id")
        if self.template_hash != content_hash(self.template_body):
            raise SchemaError("template_hash is not the content hash of template_body")
        start, end = self.row_range
        if not 0 <= start <= end:
            raise SchemaError(f"bad row_range {self.row_range}")
        for entry in self.per_row:
            if not start <= entry.row_index < end:
                raise SchemaError(f"per_row index {entry.row_index} outside row_range {self.row_range}")
        parse_timestamp(self.timestamp)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["row_range"] = list(self.row_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunRecord:
        d = dict(d)
        d["row_range"] = tuple(d["row_range"])
        d["per_row"] = [PerRowEntry(**e) for e in d.get("per_row", [])]
        return cls(**d)

    @property
    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in CELL_STATUSES}
        for e in self.per_row:
            out[e.status] = out.get(e.status, 0) + 1
        return out


def _existing_run_ids(path: Path) -> set[str]:
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict) and "run_id" in obj:
                ids.add(obj["run_id"])
    return ids


def append_run_record(ledger_path: str | os.PathLike, record: RunRecord) -> None:
    record.validate()
    path = Path(ledger_path)
    line = json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True)
    try:
        needs_newline = False
        if path.exists():
            if record.run_id in _existing_run_ids(path):
                raise DuplicateRunError(f"run_id {record.run_id} already present in {path}")
            size = path.stat().st_size
            if size:
                with open(path, "rb") as fh:
                    fh.seek(size - 1)
                    needs_newline = fh.read(1) != b"\n"
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8", newline="") as fh:
            fh.write(("\n" if needs_newline else "") + line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise IoError(f"cannot append to ledger {path}: {exc}") from exc


def read_ledger(ledger_path: str | os.PathLike) -> list[RunRecord]:
    """All parseable records in file order; bad lines raise :class:`LedgerWarning`."""
    path = Path(ledger_path)
    if not path.exists():
        raise NotFoundError(f"ledger not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                msg = f"{path}:{lineno}: unreadable ledger line ({exc.__class__.__name__})"
                logger.warning(msg)
                warnings.warn(LedgerWarning(msg, lineno), stacklevel=2)
    return records


def _model_matches(config: Mapping[str, Any] | None, model: str) -> bool:
    if not config:
        return False
    model_id = config.get("model_id")
    return model in (model_id, f"{config.get('kind')}:{model_id}")


def query_history(
    ledger_path: str | os.PathLike,
    model: str | None = None,
    column: str | None = None,
    since: str | datetime | None = None,
) -> list[RunRecord]:
    """Ledger records matching every given filter, newest first.

    ``model`` matches either the bare model id or ``<kind>:<model_id>``.
    """
    records = list(enumerate(read_ledger(ledger_path)))
    if since is not None:
        cutoff = parse_timestamp(since) if isinstance(since, str) else since
        if cutoff.tzinfo is None:
            cutoff = parse_timestamp(cutoff.isoformat())
    out = []
    for pos, rec in records:
        if model is not None and not _model_matches(rec.model_config, model):
            continue
        if column is not None and rec.output_column != column:
            continue
        if since is not None and parse_timestamp(rec.timestamp) < cutoff:
            continue
        out.append((parse_timestamp(rec.timestamp), pos, rec))
    out.sort(key=lambda t: (t[0], t[1]), reverse=True)
    return [rec for _, _, rec in out]
