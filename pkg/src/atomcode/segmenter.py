"""Split documents into analytic units and lay them out as a table.

All spans are ``[start, end)`` offsets into the *normalized* document text:
BOM stripped, CRLF/CR folded to LF, trailing whitespace removed from every
line. Segment text is always exactly ``doc.text[start:end]`` and never begins
or ends with whitespace.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Union

from .errors import EmptyDocumentError, SchemaError
from .store import ColumnSpec, Row, SegmentTable, infer_column

logger = logging.getLogger(__name__)

MAX_SPEAKER_LABEL = 40

_LABEL_EDGE = r"[\w.'’\-]"
_LABEL_BODY = r"[\w.'’\- ]"
SPEAKER_RE = re.compile(
    rf"[ \t]*({_LABEL_EDGE}(?:{_LABEL_BODY}{{0,{MAX_SPEAKER_LABEL - 2}}}{_LABEL_EDGE})?):(?=\s|$)"
)
_TERMINATOR_RE = re.compile(r"[.!?][\"'”’)\]]*")
_PARAGRAPH_BREAK_RE = re.compile(r"\n{2,}")


class SegmentationWarning(UserWarning):
    pass


def normalize(text: str) -> str:
    if text.startswith("\ufeff"):
        text = text[1:]
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in text.split("\n"))


@dataclass
class Document:
    doc_id: str
    text: str
    origin: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        self.text = normalize(self.text)


def load_document(path: str | Path, doc_id: str | None = None) -> Document:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return Document(doc_id or path.stem, text, str(path))


@dataclass(frozen=True)
class Segment:
    doc_id: str
    index: int
    text: str
    span: tuple[int, int]


# -- modes --------------------------------------------------------------------


@dataclass(frozen=True)
class Paragraph:
    pass


@dataclass(frozen=True)
class SpeakerTurn:
    pass


@dataclass(frozen=True)
class Delimiter:
    token: str

    def __post_init__(self):
        if not self.token:
            raise ValueError("delimiter token must be non-empty")


@dataclass(frozen=True)
class SentenceCount:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sentence count must be >= 1")


@dataclass(frozen=True)
class EntireFile:
    pass


SegmentationMode = Union[Paragraph, SpeakerTurn, Delimiter, SentenceCount, EntireFile]

MODE_NAMES = ("paragraph", "speaker", "delimiter", "sentences", "whole")


def parse_mode(name: str, delimiter: str | None = None, sentences: int | None = None) -> SegmentationMode:
    """Build a mode from its CLI name."""
    if name == "paragraph":
        return Paragraph()
    if name == "speaker":
        return SpeakerTurn()
    if name == "delimiter":
        if not delimiter:
            raise ValueError("--mode delimiter needs --delimiter <token>")
        return Delimiter(delimiter)
    if name == "sentences":
        if sentences is None:
            raise ValueError("--mode sentences needs --sentences <n>")
        return SentenceCount(sentences)
    if name == "whole":
        return EntireFile()
    raise ValueError(f"unknown segmentation mode {name!r}; expected one of {', '.join(MODE_NAMES)}")


# -- helpers ------------------------------------------------------------------


def _trim(text: str, start: int, end: int) -> tuple[int, int] | None:
    piece = text[start:end]
    stripped = piece.strip()
    if not stripped:
        return None
    lead = len(piece) - len(piece.lstrip())
    return start + lead, start + lead + len(stripped)


def _split_at(text: str, cuts: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Trimmed, non-empty pieces of ``text`` between the separator spans ``cuts``."""
    spans = []
    pos = 0
    for cut_start, cut_end in cuts:
        span = _trim(text, pos, cut_start)
        if span:
            spans.append(span)
        pos = cut_end
    span = _trim(text, pos, len(text))
    if span:
        spans.append(span)
    return spans


def detect_speaker_line(line: str) -> str | None:
    """Return the speaker label if ``line`` opens a speaker turn (``"P01: ..."``)."""
    m = SPEAKER_RE.match(line)
    return m.group(1) if m else None


def _speaker_starts(text: str) -> list[int]:
    starts = []
    offset = 0
    for line in text.split("\n"):
        if detect_speaker_line(line) is not None:
            starts.append(offset)
        offset += len(line) + 1
    return starts


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Sentence spans under the terminator heuristic.

    A boundary is one of ``.``, ``!``, ``?`` (plus closing quotes/brackets)
    followed by whitespace and an uppercase letter or digit, or by the end of
    the text. There is no abbreviation list, so "Dr. Smith" splits.
    """
    ends = []
    n = len(text)
    for m in _TERMINATOR_RE.finditer(text):
        j = m.end()
        while j < n and text[j].isspace():
            j += 1
        if j == n or (j > m.end() and (text[j].isupper() or text[j].isdigit())):
            ends.append(m.end())
    return _split_at(text, [(e, e) for e in ends])


# -- main entry points -------------------------------------------------------


def segment(doc: Document, mode: SegmentationMode) -> list[Segment]:
    text = doc.text
    if not text.strip():
        raise EmptyDocumentError(f"document {doc.doc_id!r} is empty after normalization")

    if isinstance(mode, EntireFile):
        spans = _split_at(text, [])
    elif isinstance(mode, Paragraph):
        spans = _split_at(text, [m.span() for m in _PARAGRAPH_BREAK_RE.finditer(text)])
    elif isinstance(mode, Delimiter):
        cuts = []
        pos = text.find(mode.token)
        while pos != -1:
            cuts.append((pos, pos + len(mode.token)))
            pos = text.find(mode.token, pos + len(mode.token))
        spans = _split_at(text, cuts)
    elif isinstance(mode, SpeakerTurn):
        starts = _speaker_starts(text)
        if not starts:
            msg = f"no speaker lines found in {doc.doc_id!r}; emitting the whole document as one segment"
            logger.warning(msg)
            warnings.warn(msg, SegmentationWarning, stacklevel=2)
            spans = _split_at(text, [])
        else:
            spans = _split_at(text, [(s, s) for s in starts])
    elif isinstance(mode, SentenceCount):
        sentences = sentence_spans(text)
        spans = [
            (sentences[i][0], sentences[min(i + mode.n, len(sentences)) - 1][1])
            for i in range(0, len(sentences), mode.n)
        ]
    else:
        raise TypeError(f"unsupported segmentation mode: {mode!r}")

    return [Segment(doc.doc_id, j, text[a:b], (a, b)) for j, (a, b) in enumerate(spans)]


def to_table(
    segments: list[Segment],
    context_defaults: Mapping[str, str] | None = None,
    source_path: str | Path | None = None,
) -> SegmentTable:
    """One row per segment, grouped by document in first-seen order."""
    context_defaults = dict(context_defaults or {})
    for name in context_defaults:
        if infer_column(name).role != "context":
            raise SchemaError(f"{name!r} cannot be used as a context column name")

    doc_order: dict[str, int] = {}
    for seg in segments:
        doc_order.setdefault(seg.doc_id, len(doc_order))
    ordered = sorted(segments, key=lambda s: (doc_order[s.doc_id], s.index))

    columns = [ColumnSpec("doc_id", "id"), ColumnSpec("segment_index", "id"), ColumnSpec("data", "data")]
    columns += [ColumnSpec(name, "context") for name in context_defaults]
    rows = []
    for i, seg in enumerate(ordered):
        values = {"doc_id": seg.doc_id, "segment_index": str(seg.index), "data": seg.text}
        values.update(context_defaults)
        rows.append(Row(i, seg.doc_id, values))
    return SegmentTable(columns, rows, Path(source_path) if source_path else None)
