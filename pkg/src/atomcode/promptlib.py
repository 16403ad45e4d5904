"""Prompt templates, the codebook-to-prompt builder, and the on-disk library.

Templates use ``{{data}}`` for the segment and ``{{context_<k>}}`` for the
k-th context column. Substitution is a single scan over the template body, so
placeholder-looking text inside substituted values is never expanded.

Library layout::

    <lib>/index.jsonl          one line per save, oldest first
    <lib>/<name>/<hash>.txt    template body, byte-exact
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ._util import atomic_write_text, content_hash, utc_now
from .errors import EmptyDataError, IoError, MissingFieldError, NotFoundError, SchemaError
from .extract import OutputSchema
from .store import DATA_COLUMN, Row

PLACEHOLDER_RE = re.compile(r"\{\{(data|context_[1-9][0-9]*)\}\}")
TEMPLATE_NAME_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.-]*")
INDEX_FILE = "index.jsonl"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def __post_init__(self):
        if not TEMPLATE_NAME_RE.fullmatch(self.name):
            raise SchemaError(f"invalid template name {self.name!r}")
        n_data = sum(1 for m in PLACEHOLDER_RE.finditer(self.body) if m.group(1) == "data")
        if n_data != 1:
            raise SchemaError(f"template must contain {{{{data}}}} exactly once, found {n_data}")

    @property
    def declared_fields(self) -> frozenset[str]:
        return frozenset(m.group(1) for m in PLACEHOLDER_RE.finditer(self.body))

    @property
    def context_fields(self) -> list[str]:
        return sorted((f for f in self.declared_fields if f != "data"), key=lambda f: int(f.split("_")[1]))

    @property
    def version_hash(self) -> str:
        return content_hash(self.body)


def render(template: PromptTemplate, row: Row) -> str:
    """Substitute the row's cells into the template. Pure in (template, row)."""
    missing = [f for f in template.context_fields if f not in row.values]
    if missing:
        raise MissingFieldError(f"template {template.name!r} needs column(s) {', '.join(missing)}")
    if not row.values.get(DATA_COLUMN, "").strip():
        raise EmptyDataError(f"row {row.index} has an empty data cell")
    return PLACEHOLDER_RE.sub(lambda m: row.values[m.group(1)], template.body)


def check_fields(template: PromptTemplate, columns: list[str]) -> None:
    """Raise MissingFieldError unless every placeholder has a column."""
    missing = [f for f in sorted(template.declared_fields) if f not in columns]
    if missing:
        raise MissingFieldError(f"template {template.name!r} needs column(s) {', '.join(missing)}")


# -- codebooks -----------------------------------------------------------------


@dataclass(frozen=True)
class Level:
    label: str
    criteria: str


@dataclass(frozen=True)
class FewShot:
    input: str
    expected_output: str


@dataclass(frozen=True)
class Codebook:
    construct_name: str
    definition: str
    output_schema: OutputSchema
    indicators: tuple[str, ...] = ()
    levels: tuple[Level, ...] = ()
    few_shot: tuple[FewShot, ...] = ()
    template_name: str | None = None

    def __post_init__(self):
        if not self.construct_name.strip():
            raise SchemaError("codebook construct name is empty")
        labels = [lv.label for lv in self.levels]
        if len(set(labels)) != len(labels):
            raise SchemaError("codebook level labels must be unique")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Codebook:
        try:
            construct = d["construct"]
            return cls(
                construct_name=str(construct.get("name", "")),
                definition=str(construct.get("definition", "")),
                output_schema=OutputSchema.from_dict(d["output_schema"]),
                indicators=tuple(d.get("indicators", ())),
                levels=tuple(Level(lv["label"], lv["criteria"]) for lv in d.get("levels", ())),
                few_shot=tuple(FewShot(ex["input"], ex["expected_output"]) for ex in d.get("few_shot", ())),
                template_name=d.get("name"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed codebook: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "construct": {"name": self.construct_name, "definition": self.definition},
            "indicators": list(self.indicators),
            "levels": [{"label": lv.label, "criteria": lv.criteria} for lv in self.levels],
            "few_shot": [{"input": ex.input, "expected_output": ex.expected_output} for ex in self.few_shot],
            "output_schema": self.output_schema.to_dict(),
        }
        if self.template_name:
            d["name"] = self.template_name
        return d


def load_codebook(path: str | os.PathLike) -> Codebook:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return Codebook.from_dict(data)


def slugify(text: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "-", text.strip().lower()).strip("-")
    return slug or "template"


def _output_instruction(schema: OutputSchema) -> list[str]:
    lines = ["Respond with one JSON object and nothing else. It must have these fields:"]
    example: dict[str, Any] = {}
    if schema.score is not None:
        lo, hi = schema.score
        lines.append(f'- "score": a number from {lo:g} to {hi:g}')
        example["score"] = lo
    if schema.labels is not None:
        allowed = ", ".join(f'"{v}"' for v in schema.labels)
        lines.append(f'- "label": exactly one of {allowed}')
        example["label"] = schema.labels[0]
    if schema.count:
        lines.append('- "count": a whole number >= 0, the number of mentions found')
        example["count"] = 0
    if schema.quotes:
        lines.append('- "quotes": a list of passages copied verbatim from the material that support your answer')
        example["quotes"] = []
    if schema.rationale:
        lines.append('- "rationale": a brief justification referring to the evidence')
        example["rationale"] = "..."
    lines.append("Shape: " + json.dumps(example, ensure_ascii=False))
    return lines


def build_from_codebook(codebook: Codebook, name: str | None = None) -> PromptTemplate:
    """Assemble a template from a codebook in a fixed section order.

    Sections: construct definition, level rules, indicators, output format,
    worked examples, then the material slot. Equal codebooks give equal bodies.
    """
    parts = [f"# Construct: {codebook.construct_name.strip()}", codebook.definition.strip()]
    if codebook.levels:
        parts.append("## Levels")
        parts.append("\n".join(f"- {lv.label}: {lv.criteria.strip()}" for lv in codebook.levels))
    if codebook.indicators:
        parts.append("## Indicators")
        parts.append("\n".join(f"- {ind.strip()}" for ind in codebook.indicators))
    parts.append("## Output format")
    parts.append("\n".join(_output_instruction(codebook.output_schema)))
    if codebook.few_shot:
        parts.append("## Examples")
        blocks = []
        for i, ex in enumerate(codebook.few_shot, start=1):
            blocks.append(
                f"### Example {i}\nInput:\n{ex.input.strip()}\n\nExpected output:\n{ex.expected_output.strip()}"
            )
        parts.append("\n\n".join(blocks))
    parts.append("## Material to analyze")
    parts.append("{{data}}")

    body = "\n\n".join(p for p in parts if p) + "\n"
    # {{context_k}} in codebook text is a deliberate reference; a second {{data}} is not
    if body.count("{{data}}") != 1:
        raise SchemaError("codebook text must not contain the {{data}} placeholder")
    return PromptTemplate(name or codebook.template_name or slugify(codebook.construct_name), body)


# -- library -------------------------------------------------------------------


@dataclass
class LibraryEntry:
    name: str
    hash: str
    saved_at: str
    fields: list[str] = field(default_factory=list)


def _read_index(library: Path) -> list[LibraryEntry]:
    index = library / INDEX_FILE
    if not index.exists():
        return []
    entries = []
    with open(index, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(LibraryEntry(**json.loads(line)))
    return entries


def save_template(library_path: str | os.PathLike, template: PromptTemplate) -> Path:
    library = Path(library_path)
    target = library / template.name / f"{template.version_hash}.txt"
    entry = LibraryEntry(template.name, template.version_hash, utc_now(), sorted(template.declared_fields))
    try:
        if not target.exists():
            atomic_write_text(target, template.body)
        with open(library / INDEX_FILE, "a", encoding="utf-8", newline="") as fh:
            fh.write(json.dumps(entry.__dict__, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write to prompt library {library}: {exc}") from exc
    return target


def list_templates(library_path: str | os.PathLike, name: str | None = None) -> list[LibraryEntry]:
    entries = _read_index(Path(library_path))
    return [e for e in entries if name is None or e.name == name]


def load_template(library_path: str | os.PathLike, name: str, hash: str | None = None) -> PromptTemplate:
    """Load ``name`` at ``hash`` (full or unique prefix), or its latest save."""
    library = Path(library_path)
    entries = list_templates(library, name)
    if not entries:
        raise NotFoundError(f"no template named {name!r} in {library}")
    if hash is None:
        chosen = entries[-1].hash
    else:
        matches = sorted({e.hash for e in entries if e.hash.startswith(hash)})
        if len(matches) != 1:
            what = "ambiguous" if matches else "unknown"
            raise NotFoundError(f"{what} version {hash!r} for template {name!r}")
        chosen = matches[0]
    path = library / name / f"{chosen}.txt"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            body = fh.read()
    except FileNotFoundError:
        raise NotFoundError(f"template file missing: {path}") from None
    template = PromptTemplate(name, body)
    if template.version_hash != chosen:
        raise SchemaError(f"{path} content does not match its hash")
    return template


def resolve_template(ref: str, library_path: str | os.PathLike) -> PromptTemplate:
    """Resolve ``name``, ``name@hash`` or a path to a template text file."""
    path = Path(ref)
    if path.suffix in (".txt", ".md") and path.is_file():
        with open(path, encoding="utf-8", newline="") as fh:
            return PromptTemplate(slugify(path.stem), fh.read())
    name, _, version = ref.partition("@")
    return load_template(library_path, name, version or None)
