import itertools
import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomcode.errors import InsufficientData
from atomcode.irr import (
    RatingPairs,
    cohens_kappa,
    compare_columns,
    confusion_matrix,
    count_agreement,
    irr_report,
    kappa_with_note,
    percent_agreement,
)
from atomcode.store import load_table


def brute_force_kappa(a, b):
    """Textbook kappa over explicit marginal proportions, in exact rationals."""
    n = len(a)
    p_o = Fraction(sum(1 for x, y in zip(a, b) if x == y), n)
    p_e = Fraction(0)
    for c in set(a) | set(b):
        p_e += Fraction(a.count(c), n) * Fraction(b.count(c), n)
    if p_e == 1:
        return 1.0 if p_o == 1 else None
    return float((p_o - p_e) / (1 - p_e))


def pairs(a, b, kind="categorical"):
    return RatingPairs.of(a, b, kind)


def test_identical_binary_23():
    col = [1, 0, 1, 1, 0] * 4 + [1, 0, 0]
    p = pairs(col, col)
    assert cohens_kappa(p) == 1.0
    assert percent_agreement(p) == 1.0
    assert len(p.pairs) == 23


def test_half_agreement_is_zero_kappa():
    p = pairs([1, 1, 0, 0], [1, 0, 1, 0])
    assert cohens_kappa(p) == 0.0
    assert percent_agreement(p) == 0.5


def test_degenerate_marginals():
    kappa, note = kappa_with_note(pairs([1, 1, 1], [1, 1, 1]))
    assert kappa == 1.0
    assert "degenerate" in note


def test_degenerate_marginals_imply_perfect_agreement():
    # p_e = 1 needs both raters on one shared category, which forces p_o = 1
    for n in range(1, 8):
        kappa, note = kappa_with_note(pairs(["a"] * n, ["a"] * n))
        assert kappa == 1.0 and note


def test_disjoint_labels():
    assert percent_agreement(pairs(["a", "b"], ["c", "d"])) == 0.0


def test_empty_raises():
    with pytest.raises(InsufficientData):
        cohens_kappa(pairs([], []))
    with pytest.raises(InsufficientData):
        percent_agreement(pairs(["", " "], ["a", "b"]))


def test_count_examples():
    stats = count_agreement(pairs([0], [2], "count"))
    assert (stats.exact_agreement, stats.mean_signed_diff, stats.max_abs_diff) == (0.0, -2.0, 2)
    stats = count_agreement(pairs([1, 2, 3], [1, 2, 3], "count"))
    assert (stats.exact_agreement, stats.mean_abs_diff) == (1.0, 0.0)


def test_count_rejects_non_integers():
    with pytest.raises(TypeError):
        pairs(["1.5"], ["1"], "count")
    with pytest.raises(TypeError):
        count_agreement(RatingPairs("count", [(1.5, 1)], 1, 0))


def test_confusion_example():
    m = confusion_matrix(pairs(["x", "x"], ["x", "y"]))
    assert m.alphabet == ["x", "y"]
    assert m.counts == [[1, 1], [0, 0]]


def test_missing_rows_dropped_not_categorized():
    p = pairs(["a", "", "b", None, "a"], ["a", "b", "", "a", " a "])
    assert p.n_total == 5
    assert p.n_missing == 3
    assert p.pairs == [("a", "a"), ("a", "a")]
    assert "" not in confusion_matrix(p).alphabet


def test_trim_but_case_sensitive():
    p = pairs([" Present", "Absent"], ["present", "Absent "])
    assert percent_agreement(p) == 0.5


def test_exhaustive_binary_oracle():
    checked = 0
    for n in range(1, 6):
        for a in itertools.product([0, 1], repeat=n):
            for b in itertools.product([0, 1], repeat=n):
                got = cohens_kappa(pairs(list(a), list(b)))
                want = brute_force_kappa(list(a), list(b))
                if want is None:
                    assert got is None
                else:
                    assert abs(got - want) <= 1e-12
                checked += 1
    assert checked == sum(4**n for n in range(1, 6))


labels = st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=30)


@given(labels)
def test_symmetry(rows):
    a, b = [x for x, _ in rows], [y for _, y in rows]
    assert cohens_kappa(pairs(a, b)) == cohens_kappa(pairs(b, a))
    assert percent_agreement(pairs(a, b)) == percent_agreement(pairs(b, a))


@given(labels, st.permutations("abcd"))
def test_label_permutation_invariance(rows, perm):
    relabel = dict(zip("abcd", perm))
    a, b = [x for x, _ in rows], [y for _, y in rows]
    ra, rb = [relabel[x] for x in a], [relabel[y] for y in b]
    assert cohens_kappa(pairs(a, b)) == cohens_kappa(pairs(ra, rb))
    assert percent_agreement(pairs(a, b)) == percent_agreement(pairs(ra, rb))


@given(labels)
def test_kappa_bounds_and_conservation(rows):
    a, b = [x for x, _ in rows], [y for _, y in rows]
    p = pairs(a, b)
    k = cohens_kappa(p)
    assert k is not None and k <= 1.0
    assert (k == 1.0) == (percent_agreement(p) == 1.0)
    assert confusion_matrix(p).total() == len(rows)
    assert 0.0 <= percent_agreement(p) <= 1.0


@given(labels)
def test_matches_oracle_on_larger_alphabets(rows):
    a, b = [x for x, _ in rows], [y for _, y in rows]
    assert abs(cohens_kappa(pairs(a, b)) - brute_force_kappa(a, b)) <= 1e-12


def test_count_fixture(fixtures_dir):
    table = load_table(fixtures_dir / "count_pairs_23.csv")
    report = compare_columns(table, "out:consent.count:pass1", "out:consent.count:pass2", "count")
    assert report.n == 23
    assert abs(report.exact_agreement - 20 / 23) < 1e-9
    assert abs(report.mean_abs_diff - 3 / 23) < 1e-9
    assert report.max_abs_diff == 1


def test_report_serializes():
    report = irr_report(pairs(["a", "b", "a"], ["a", "b", "b"]), "A", "B")
    d = json.loads(json.dumps(report.to_dict()))
    assert d["confusion"]["alphabet"] == ["a", "b"]
    text = report.format_text()
    assert "percent agreement" in text and "kappa" in text
