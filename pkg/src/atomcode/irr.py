"""Agreement between two rating columns: Cohen's kappa, percent agreement,
confusion matrices and count-difference statistics.

Rows where either side is empty are dropped and counted in ``n_missing``;
they are never treated as a category of their own. Categorical values are
compared after trimming, case-sensitively.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Hashable, Sequence

from .errors import InsufficientData
from .store import SegmentTable

KINDS = ("categorical", "count")
DEGENERATE_NOTE = "degenerate marginals: both raters used one and the same category (p_e = 1)"

_INT_RE = re.compile(r"[+-]?\d+")


@dataclass
class RatingPairs:
    kind: str
    pairs: list[tuple[Hashable, Hashable]]
    n_total: int
    n_missing: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rating kind {self.kind!r}")
        if len(self.pairs) + self.n_missing != self.n_total:
            raise ValueError("pairs + missing must equal total")

    @classmethod
    def of(cls, a: Sequence[Any], b: Sequence[Any], kind: str = "categorical") -> RatingPairs:
        """Pair two equally long rating sequences, dropping rows with a blank side."""
        if len(a) != len(b):
            raise ValueError(f"rating columns differ in length ({len(a)} vs {len(b)})")
        pairs = []
        missing = 0
        for x, y in zip(a, b):
            x, y = _clean(x, kind), _clean(y, kind)
            if x is None or y is None:
                missing += 1
            else:
                pairs.append((x, y))
        return cls(kind, pairs, len(a), missing)


def _clean(value: Any, kind: str) -> Hashable | None:
    if value is None:
        return None
    if isinstance(value, str):
        value = value.strip()
        if not value:
            return None
        if kind == "count":
            if not _INT_RE.fullmatch(value):
                raise TypeError(f"count value {value!r} is not an integer")
            return int(value)
        return value
    if kind == "count":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"count value {value!r} is not an integer")
    return value


def _require(pairs: RatingPairs) -> int:
    n = len(pairs.pairs)
    if n == 0:
        raise InsufficientData("no complete rating pairs")
    return n


def kappa_with_note(pairs: RatingPairs) -> tuple[float | None, str | None]:
    """Unweighted Cohen's kappa plus an explanatory note for the degenerate case.

    Computed in integers: with ``agree`` matching pairs out of ``n`` and
    ``sum_c count_a(c) * count_b(c) = m``, kappa = (agree*n - m) / (n*n - m).
    """
    n = _require(pairs)
    agree = sum(1 for x, y in pairs.pairs if x == y)
    count_a = Counter(x for x, _ in pairs.pairs)
    count_b = Counter(y for _, y in pairs.pairs)
    m = sum(count_a[c] * count_b[c] for c in count_a)
    if m == n * n:
        if agree == n:
            return 1.0, DEGENERATE_NOTE + "; perfect agreement reported as 1.0"
        return None, DEGENERATE_NOTE + "; kappa undefined"
    return (agree * n - m) / (n * n - m), None


def cohens_kappa(pairs: RatingPairs) -> float | None:
    return kappa_with_note(pairs)[0]


def percent_agreement(pairs: RatingPairs) -> float:
    n = _require(pairs)
    return sum(1 for x, y in pairs.pairs if x == y) / n


@dataclass
class CountAgreement:
    exact_agreement: float
    mean_signed_diff: float
    mean_abs_diff: float
    max_abs_diff: int


def count_agreement(pairs: RatingPairs) -> CountAgreement:
    n = _require(pairs)
    for x, y in pairs.pairs:
        for v in (x, y):
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError(f"count value {v!r} is not an integer")
    diffs = [x - y for x, y in pairs.pairs]
    return CountAgreement(
        exact_agreement=sum(1 for d in diffs if d == 0) / n,
        mean_signed_diff=sum(diffs) / n,
        mean_abs_diff=sum(abs(d) for d in diffs) / n,
        max_abs_diff=max(abs(d) for d in diffs),
    )


@dataclass
class ConfusionMatrix:
    alphabet: list[Hashable]
    counts: list[list[int]]

    def total(self) -> int:
        return sum(map(sum, self.counts))


def confusion_matrix(pairs: RatingPairs) -> ConfusionMatrix:
    """Rows are rater A, columns rater B, both over the sorted observed alphabet."""
    alphabet = sorted({v for pair in pairs.pairs for v in pair})
    pos = {v: i for i, v in enumerate(alphabet)}
    counts = [[0] * len(alphabet) for _ in alphabet]
    for x, y in pairs.pairs:
        counts[pos[x]][pos[y]] += 1
    return ConfusionMatrix(alphabet, counts)


@dataclass
class IRRReport:
    kind: str
    n: int
    n_total: int
    n_missing: int
    percent_agreement: float
    kappa: float | None
    kappa_note: str | None
    confusion: ConfusionMatrix
    exact_agreement: float | None = None
    mean_signed_diff: float | None = None
    mean_abs_diff: float | None = None
    max_abs_diff: int | None = None
    col_a: str | None = None
    col_b: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["confusion"] = {"alphabet": list(self.confusion.alphabet), "counts": self.confusion.counts}
        return d

    def format_text(self) -> str:
        head = f"{self.col_a} vs {self.col_b}" if self.col_a else "rater A vs rater B"
        lines = [
            f"IRR {head} ({self.kind})",
            f"rows considered: {self.n_total}  pairs: {self.n}  missing: {self.n_missing}",
            f"percent agreement: {self.percent_agreement:.3f}",
            "Cohen's kappa:     " + ("undefined" if self.kappa is None else f"{self.kappa:.3f}"),
        ]
        if self.kappa_note:
            lines.append(f"  note: {self.kappa_note}")
        if self.kind == "count":
            lines += [
                f"exact agreement:   {self.exact_agreement:.4f}",
                f"mean signed diff:  {self.mean_signed_diff:+.4f}",
                f"mean abs diff:     {self.mean_abs_diff:.4f}",
                f"max abs diff:      {self.max_abs_diff}",
            ]
        labels = [str(v) for v in self.confusion.alphabet]
        width = max([len(s) for s in labels] + [5])
        lines.append("confusion (rows = A, columns = B):")
        lines.append(" " * (width + 2) + " ".join(s.rjust(width) for s in labels))
        for label, row in zip(labels, self.confusion.counts):
            lines.append("  " + label.ljust(width) + " ".join(str(c).rjust(width) for c in row))
        return "\n".join(lines)


def irr_report(pairs: RatingPairs, col_a: str | None = None, col_b: str | None = None) -> IRRReport:
    kappa, note = kappa_with_note(pairs)
    report = IRRReport(
        kind=pairs.kind,
        n=len(pairs.pairs),
        n_total=pairs.n_total,
        n_missing=pairs.n_missing,
        percent_agreement=percent_agreement(pairs),
        kappa=kappa,
        kappa_note=note,
        confusion=confusion_matrix(pairs),
        col_a=col_a,
        col_b=col_b,
    )
    if pairs.kind == "count":
        stats = count_agreement(pairs)
        report.exact_agreement = stats.exact_agreement
        report.mean_signed_diff = stats.mean_signed_diff
        report.mean_abs_diff = stats.mean_abs_diff
        report.max_abs_diff = stats.max_abs_diff
    return report


def compare_columns(table: SegmentTable, col_a: str, col_b: str, kind: str = "categorical") -> IRRReport:
    pairs = RatingPairs.of(table.column(col_a), table.column(col_b), kind)
    return irr_report(pairs, col_a, col_b)
