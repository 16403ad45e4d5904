"""Turn raw model output into scores, labels, counts and quotes.

Parsing never raises: the outcome is recorded in ``parse_mode`` (``json``,
``fallback_regex`` or ``failed``) and the raw text is always kept alongside
the extracted values.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

from .store import SegmentTable, parse_output_column

FIELDS = ("score", "label", "count", "quotes", "rationale")
PRIMARY_FIELDS = ("score", "label", "count")
PARSE_MODES = ("json", "fallback_regex", "failed")


@dataclass(frozen=True)
class OutputSchema:
    """Which fields a model answer is expected to carry.

    ``score`` holds inclusive ``(min, max)`` bounds, ``labels`` the allowed
    categorical values; ``None`` means the field is not expected.
    """

    score: tuple[float, float] | None = None
    labels: tuple[str, ...] | None = None
    count: bool = False
    quotes: bool = False
    rationale: bool = False

    def __post_init__(self):
        if self.score is not None:
            lo, hi = self.score
            if lo > hi:
                raise ValueError(f"score bounds reversed: {self.score}")
            object.__setattr__(self, "score", (lo, hi))
        if self.labels is not None:
            labels = tuple(str(v).strip() for v in self.labels)
            if not labels or any(not v for v in labels):
                raise ValueError("label field needs at least one non-empty allowed value")
            if len(set(labels)) != len(labels):
                raise ValueError("allowed labels must be unique")
            object.__setattr__(self, "labels", labels)
        if not self.expected:
            raise ValueError("output schema must expect at least one field")

    @property
    def expected(self) -> tuple[str, ...]:
        present = {
            "score": self.score is not None,
            "label": self.labels is not None,
            "count": self.count,
            "quotes": self.quotes,
            "rationale": self.rationale,
        }
        return tuple(f for f in FIELDS if present[f])

    @property
    def primary(self) -> tuple[str, ...]:
        return tuple(f for f in self.expected if f in PRIMARY_FIELDS)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {}
        if self.score is not None:
            d["score"] = {"min": self.score[0], "max": self.score[1]}
        if self.labels is not None:
            d["label"] = {"allowed": list(self.labels)}
        for name in ("count", "quotes", "rationale"):
            if getattr(self, name):
                d[name] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> OutputSchema:
        unknown = set(d) - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown output fields: {', '.join(sorted(unknown))}")
        score = d.get("score")
        if isinstance(score, Mapping):
            score = (score["min"], score["max"])
        elif score is not None:
            score = tuple(score)
        labels = d.get("label")
        if isinstance(labels, Mapping):
            labels = labels["allowed"]
        return cls(
            score=score,
            labels=tuple(labels) if labels is not None else None,
            count=bool(d.get("count", False)),
            quotes=bool(d.get("quotes", False)),
            rationale=bool(d.get("rationale", False)),
        )


@dataclass
class StructuredOutput:
    raw: str
    parse_mode: str
    score: float | None = None
    label: str | None = None
    count: int | None = None
    quotes: list[str] = field(default_factory=list)
    rationale: str | None = None
    problems: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _failed(raw: str, problems: list[str]) -> StructuredOutput:
    return StructuredOutput(raw=raw, parse_mode="failed", problems=problems)


# -- JSON path -------------------------------------------------------------


def _json_objects(raw: str):
    decoder = json.JSONDecoder()
    i = raw.find("{")
    while i != -1:
        try:
            obj, end = decoder.raw_decode(raw, i)
        except json.JSONDecodeError:
            i = raw.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        i = raw.find("{", end)


def _schema_keys(obj: Mapping[str, Any], schema: OutputSchema) -> dict[str, Any]:
    lowered = {str(k).strip().lower(): v for k, v in obj.items()}
    return {f: lowered[f] for f in schema.expected if f in lowered}


def _find_schema_object(raw: str, schema: OutputSchema) -> dict[str, Any] | None:
    """First JSON object carrying any expected field, looking one level into wrappers."""
    for obj in _json_objects(raw):
        found = _schema_keys(obj, schema)
        if found:
            return found
        for value in obj.values():
            if isinstance(value, dict):
                found = _schema_keys(value, schema)
                if found:
                    return found
    return None


def _as_number(value: Any) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return value if math.isfinite(value) else None
    if isinstance(value, str):
        try:
            num = float(value.strip())
        except ValueError:
            return None
        if not math.isfinite(num):
            return None
        return int(num) if num.is_integer() and re.fullmatch(r"\s*-?\d+\s*", value) else num
    return None


def _validate(values: dict[str, Any], schema: OutputSchema) -> tuple[dict[str, Any], list[str]]:
    out: dict[str, Any] = {}
    problems = []
    for name in schema.primary:
        if name not in values or values[name] is None:
            problems.append(f"missing field {name!r}")

    if values.get("score") is not None:
        num = _as_number(values["score"])
        lo, hi = schema.score
        if num is None:
            problems.append(f"score {values['score']!r} is not a number")
        elif not lo <= num <= hi:
            problems.append(f"score {num} outside [{lo}, {hi}]")
        else:
            out["score"] = num

    if values.get("label") is not None:
        label = values["label"]
        if not isinstance(label, str):
            problems.append(f"label {label!r} is not a string")
        elif label.strip() not in schema.labels:
            problems.append(f"label {label.strip()!r} not in {list(schema.labels)}")
        else:
            out["label"] = label.strip()

    if values.get("count") is not None:
        num = _as_number(values["count"])
        if num is None or float(num) != int(num) or num < 0:
            problems.append(f"count {values['count']!r} is not a non-negative integer")
        else:
            out["count"] = int(num)

    if values.get("quotes") is not None:
        quotes = values["quotes"]
        if isinstance(quotes, str):
            quotes = [quotes]
        if not isinstance(quotes, list) or not all(isinstance(q, str) for q in quotes):
            problems.append("quotes must be a list of strings")
        else:
            out["quotes"] = list(quotes)

    if values.get("rationale") is not None:
        if not isinstance(values["rationale"], str):
            problems.append("rationale must be a string")
        else:
            out["rationale"] = values["rationale"]

    return out, problems


# -- fallback path ---------------------------------------------------------

_INT_TOKEN_RE = re.compile(r"(?<![\w.])-?\d+(?!\.\d)(?![\w])")
_SCORE_NEAR_RE = re.compile(r"\b(?:score|rating)\b[^\w\n]{0,3}(?:(?:is|of|=)\s*)?[^\w\n]{0,3}(-?\d+)(?!\.\d)(?!\w)", re.I)
_LABEL_KEY_RE = re.compile(r"\b(?:label|classification|category|code|answer)\b\s*[:=\-]\s*[\"'*]*", re.I)
_COUNT_RE = re.compile(
    r"\b(?:count|mentions?|number of mentions)\b[^\w\n]{0,3}(?:(?:is|of|=)\s*)?(\d+)(?!\.\d)(?!\w)"
    r"|(?<![\w.])(\d+)\s+(?:mentions?|times)\b",
    re.I,
)
_QUOTE_RE = re.compile(r"\"([^\"\n]{2,})\"|“([^”\n]{2,})”")
_RATIONALE_RE = re.compile(r"\b(?:rationale|justification|reasoning)\b\s*[:\-]\s*(.+)", re.I | re.S)


def _fallback_score(raw: str, bounds: tuple[float, float]) -> int | None:
    lo, hi = bounds
    for m in _SCORE_NEAR_RE.finditer(raw):
        value = int(m.group(1))
        if lo <= value <= hi:
            return value
    for m in _INT_TOKEN_RE.finditer(raw):
        value = int(m.group(0))
        if lo <= value <= hi:
            return value
    return None


def _fallback_label(raw: str, allowed: tuple[str, ...]) -> str | None:
    by_length = sorted(allowed, key=len, reverse=True)
    for m in _LABEL_KEY_RE.finditer(raw):
        rest = raw[m.end():]
        for label in by_length:
            if rest.startswith(label) and not rest[len(label):len(label) + 1].isalnum():
                return label
    best = None
    for label in allowed:
        m = re.search(rf"(?<!\w){re.escape(label)}(?!\w)", raw)
        if m and (best is None or m.start() < best[0]):
            best = (m.start(), label)
    return best[1] if best else None


def _fallback_count(raw: str) -> int | None:
    m = _COUNT_RE.search(raw)
    if not m:
        return None
    return int(m.group(1) or m.group(2))


def _fallback(raw: str, schema: OutputSchema) -> dict[str, Any] | None:
    found: dict[str, Any] = {}
    if schema.score is not None:
        score = _fallback_score(raw, schema.score)
        if score is not None:
            found["score"] = score
    if schema.labels is not None:
        label = _fallback_label(raw, schema.labels)
        if label is not None:
            found["label"] = label
    if schema.count:
        count = _fallback_count(raw)
        if count is not None:
            found["count"] = count
    if schema.quotes:
        quotes = [a or b for a, b in _QUOTE_RE.findall(raw)]
        if quotes:
            found["quotes"] = quotes
    if schema.rationale:
        m = _RATIONALE_RE.search(raw)
        if m and m.group(1).strip():
            found["rationale"] = m.group(1).strip()

    if schema.primary:
        return found if all(f in found for f in schema.primary) else None
    return found or None


# -- public API --------------------------------------------------------------


def parse_structured(raw: str, schema: OutputSchema) -> StructuredOutput:
    """Parse a model answer against ``schema``.

    The first JSON object (fenced or bare) that carries any expected field
    decides the result: valid gives ``json``, invalid gives ``failed``. Only
    when no such object exists are the field regexes tried.
    """
    if not isinstance(raw, str):
        return _failed(str(raw), ["raw output is not text"])
    values = _find_schema_object(raw, schema)
    if values is not None:
        fields, problems = _validate(values, schema)
        if problems:
            return _failed(raw, problems)
        return StructuredOutput(raw=raw, parse_mode="json", **fields)
    fields = _fallback(raw, schema)
    if fields is not None:
        return StructuredOutput(raw=raw, parse_mode="fallback_regex", **fields)
    return _failed(raw, ["no JSON object with expected fields and no regex match"])


def extract_score(raw: str, bounds: tuple[float, float]) -> float | None:
    return parse_structured(raw, OutputSchema(score=tuple(bounds))).score


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def verify_quotes(quotes: list[str], source: str) -> list[bool]:
    """Whether each quote occurs in ``source`` once whitespace runs are collapsed."""
    haystack = _normalize_ws(source)
    return [bool(_normalize_ws(q)) and _normalize_ws(q) in haystack for q in quotes]


# -- pass tabulation -------------------------------------------------------


@dataclass(frozen=True)
class TabulationPolicy:
    """Combine two passes: mean when they differ by at most ``threshold``."""

    threshold: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {"rule": "mean_with_adjudication", "threshold": self.threshold}


@dataclass(frozen=True)
class Tabulated:
    value: float | None
    flag: str


DEFAULT_POLICY = TabulationPolicy()


def tabulate_passes(a: float | None, b: float | None, policy: TabulationPolicy = DEFAULT_POLICY) -> Tabulated:
    if a is None or b is None:
        return Tabulated(None, "missing")
    if abs(a - b) > policy.threshold:
        return Tabulated(None, "adjudicate")
    return Tabulated((a + b) / 2, "ok")


def format_number(value: float | None) -> str:
    if value is None:
        return ""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


# -- table helpers used by the CLI --------------------------------------------


def derived_column(column: str, field_name: str) -> str:
    """``out:score:pass1`` + ``score`` -> ``out:score.score:pass1``."""
    label, pass_tag = parse_output_column(column)
    return f"out:{label}.{field_name}:{pass_tag}"


def extract_column(
    table: SegmentTable, column: str, schema: OutputSchema, check_quotes: bool = False
) -> tuple[dict[str, dict[int, str]], list[StructuredOutput]]:
    """Parse every non-empty cell of ``column`` into derived column values."""
    names = {f: derived_column(column, f) for f in schema.expected}
    names["parse_mode"] = derived_column(column, "parse_mode")
    if check_quotes and schema.quotes:
        names["quotes_verified"] = derived_column(column, "quotes_verified")

    columns: dict[str, dict[int, str]] = {name: {} for name in names.values()}
    parsed = []
    for row in table.rows:
        raw = row.values.get(column, "")
        if not raw.strip():
            continue
        out = parse_structured(raw, schema)
        parsed.append(out)
        columns[names["parse_mode"]][row.index] = out.parse_mode
        if out.parse_mode == "failed":
            continue
        if "score" in names:
            columns[names["score"]][row.index] = format_number(out.score)
        if "label" in names:
            columns[names["label"]][row.index] = out.label or ""
        if "count" in names:
            columns[names["count"]][row.index] = "" if out.count is None else str(out.count)
        if "quotes" in names:
            columns[names["quotes"]][row.index] = json.dumps(out.quotes, ensure_ascii=False)
        if "rationale" in names:
            columns[names["rationale"]][row.index] = out.rationale or ""
        if "quotes_verified" in names:
            ok = verify_quotes(out.quotes, row.data)
            columns[names["quotes_verified"]][row.index] = f"{sum(ok)}/{len(ok)}"
    return columns, parsed
