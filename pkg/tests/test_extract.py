import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomcode.extract import (
    OutputSchema,
    TabulationPolicy,
    derived_column,
    extract_column,
    extract_score,
    parse_structured,
    tabulate_passes,
    verify_quotes,
)
from atomcode.store import make_table

from .conftest import FIXTURES

CORPUS = json.loads((FIXTURES / "extraction_corpus.json").read_text(encoding="utf-8"))
SCORE = OutputSchema(score=(1, 6), rationale=True)
BINARY = OutputSchema(labels=("Present", "Absent"), count=True, quotes=True)


def test_corpus_covers_every_mode():
    assert len(CORPUS) >= 20
    modes = {case["expected"]["parse_mode"] for case in CORPUS}
    assert modes == {"json", "fallback_regex", "failed"}
    assert any("```" in case["raw"] for case in CORPUS)


@pytest.mark.parametrize("case", CORPUS, ids=[c["id"] for c in CORPUS])
def test_corpus(case):
    out = parse_structured(case["raw"], OutputSchema.from_dict(case["schema"]))
    for key, want in case["expected"].items():
        assert getattr(out, key) == want, (key, out.problems)
    if out.parse_mode == "failed":
        assert (out.score, out.label, out.count, out.rationale, out.quotes) == (None, None, None, None, [])
    assert out.raw == case["raw"]


def test_extract_score_examples():
    assert extract_score('{"score": 5}', (1, 6)) == 5
    assert extract_score("I would give this a 2.", (1, 6)) == 2
    assert extract_score("no number here", (1, 6)) is None


def test_fields_outside_schema_ignored():
    out = parse_structured('{"score": 3, "label": "x", "count": 7}', OutputSchema(score=(1, 6)))
    assert out.parse_mode == "json"
    assert (out.label, out.count) == (None, None)


def test_schema_invariants():
    with pytest.raises(ValueError):
        OutputSchema()
    with pytest.raises(ValueError):
        OutputSchema(score=(6, 1))
    assert OutputSchema.from_dict(BINARY.to_dict()) == BINARY


@given(st.text(max_size=200))
def test_never_throws_and_preserves_raw(raw):
    for schema in (SCORE, BINARY):
        before = str(raw)
        out = parse_structured(raw, schema)
        assert out.raw == raw == before
        assert out.parse_mode in {"json", "fallback_regex", "failed"}


@given(st.integers(-50, 50), st.text(alphabet=" abc\n", max_size=20), st.text(alphabet=" xyz\n", max_size=20))
def test_json_precedence_over_fallback(score, pre, post):
    raw = f"Score: 2 {pre}{json.dumps({'score': score})}{post}"
    out = parse_structured(raw, OutputSchema(score=(1, 6)))
    if 1 <= score <= 6:
        assert (out.parse_mode, out.score) == ("json", score)
    else:
        assert out.parse_mode == "failed"


# -- tabulation -----------------------------------------------------------------


@pytest.mark.parametrize(
    "a, b, value, flag",
    [(4, 4, 4.0, "ok"), (4, 5, 4.5, "ok"), (2, 5, None, "adjudicate"), (4, None, None, "missing"), (None, None, None, "missing")],
)
def test_tabulation_table(a, b, value, flag):
    got = tabulate_passes(a, b)
    assert (got.value, got.flag) == (value, flag)


optional_scores = st.one_of(st.none(), st.integers(1, 6), st.floats(1, 6, allow_nan=False))


@given(optional_scores, optional_scores)
def test_tabulation_symmetric(a, b):
    assert tabulate_passes(a, b) == tabulate_passes(b, a)


def test_tabulation_threshold_configurable():
    assert tabulate_passes(2, 5, TabulationPolicy(threshold=3)).flag == "ok"
    assert tabulate_passes(4, 5, TabulationPolicy(threshold=0)).flag == "adjudicate"


# -- quotes and table helpers -----------------------------------------------------


def test_verify_quotes():
    src = "P01: I signed the\n   consent form   yesterday."
    assert verify_quotes(["signed the consent form", "never signed", "  "], src) == [True, False, False]


def test_derived_column():
    assert derived_column("out:dev:pass1", "score") == "out:dev.score:pass1"


def test_extract_column():
    table = make_table(
        ["doc_id", "data", "out:c:p1"],
        [
            ["a", "we signed the form", '{"label": "Present", "count": 1, "quotes": ["signed the form"]}'],
            ["b", "nothing", "gibberish"],
            ["c", "empty output", ""],
        ],
    )
    cols, parsed = extract_column(table, "out:c:p1", BINARY, check_quotes=True)
    assert len(parsed) == 2
    assert cols["out:c.parse_mode:p1"] == {0: "json", 1: "failed"}
    assert cols["out:c.label:p1"] == {0: "Present"}
    assert cols["out:c.count:p1"] == {0: "1"}
    assert json.loads(cols["out:c.quotes:p1"][0]) == ["signed the form"]
    assert cols["out:c.quotes_verified:p1"] == {0: "1/1"}
