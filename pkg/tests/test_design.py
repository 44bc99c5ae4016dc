import numpy as np
import pytest
from hypothesis import given, strategies as st

from sensi.design import (ColumnSchema, DesignError, HypothesisSpec, MatchedDesign, Stratum,
                          apply_hypothesis, canonicalize, load_design)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_two_pairs(tmp_path):
    p = write(tmp_path, "stratum,treated,y1\nA,1,5\nA,0,3\nA2,1,2\nA2,0,4\n")
    d = load_design(p, ColumnSchema(("y1",)))
    assert (d.I, d.K) == (2, 1)
    assert d.sizes.tolist() == [2, 2]
    assert d.stratum_ids == ("A", "A2")
    assert d.treated.tolist() == [True, False, True, False]


def test_strata_grouped_by_first_appearance(tmp_path):
    p = write(tmp_path, "s,z,y\nb,0,1\na,1,2\nb,1,3\na,0,4\n")
    d = load_design(p, ColumnSchema(("y",), "s", "z"))
    assert d.stratum_ids == ("b", "a")
    assert d.outcomes[:, 0].tolist() == [1, 3, 2, 4]


def test_empty_file_has_no_strata(tmp_path):
    p = write(tmp_path, "stratum,treated,y1\n")
    with pytest.raises(DesignError, match="no strata"):
        load_design(p, ColumnSchema(("y1",)))


@pytest.mark.parametrize("text,msg", [
    ("stratum,treated\nA,1\n", "missing column 'y1'"),
    ("stratum,treated,y1\nA,1,5\nA,2,3\n", "row 3, column 'treated'"),
    ("stratum,treated,y1\nA,1,5\nA,0,abc\n", "row 3, column 'y1'"),
    ("stratum,treated,y1\nA,1,5\nA,0,inf\n", "non-finite"),
    ("stratum,treated,y1\nA,1,5\n", "at least 2"),
    ("stratum,treated,y1\nA,0,5\nA,0,3\n", "0 treated"),
])
def test_bad_input_messages(tmp_path, text, msg):
    with pytest.raises(DesignError, match=msg):
        load_design(write(tmp_path, text), ColumnSchema(("y1",)))


def test_two_treated_two_controls_is_rejected():
    s = Stratum((True, True, False, False), ((1.0,), (2.0,), (3.0,), (4.0,)))
    with pytest.raises(DesignError, match="one-treated form"):
        canonicalize(s)


def test_one_control_stratum_is_flipped():
    s = Stratum((True, True, False), ((1.0,), (2.0,), (3.0,)))
    c = canonicalize(s)
    assert c.treated == (False, False, True) and c.flipped
    d = MatchedDesign.from_strata([s])
    assert d.actual_treated.tolist() == [True, True, False]


@given(st.lists(st.integers(2, 5), min_size=1, max_size=5), st.data())
def test_canonicalize_idempotent(sizes, data):
    for n in sizes:
        k = data.draw(st.sampled_from([1, n - 1]))
        flags = tuple(j < k for j in range(n))
        s = Stratum(flags, tuple((float(j),) for j in range(n)))
        once = canonicalize(s)
        assert canonicalize(once) == once
        assert sum(once.treated) == 1


def test_design_roundtrips_through_strata():
    d = MatchedDesign.pairs([[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [5.0, 6.0]])
    again = MatchedDesign.from_strata(d.strata)
    assert np.array_equal(again.outcomes, d.outcomes)
    assert np.array_equal(again.treated, d.treated)


def test_design_arrays_are_read_only():
    d = MatchedDesign.pairs([1.0], [0.0])
    with pytest.raises(ValueError):
        d.outcomes[0, 0] = 3.0


def test_sharp_null_is_identity():
    d = MatchedDesign.pairs([5.0], [3.0])
    assert apply_hypothesis(d, HypothesisSpec()).tolist() == [[5.0], [3.0]]


def test_additive_shift_only_moves_treated():
    d = MatchedDesign.pairs([5.0], [3.0])
    F = apply_hypothesis(d, HypothesisSpec("additive", 2.0))
    assert F.tolist() == [[3.0], [3.0]]


def test_multiplicative_on_log_scale():
    e = np.e
    d = MatchedDesign.pairs([e ** 4], [e ** 2])
    F = apply_hypothesis(d, HypothesisSpec("multiplicative", e))
    assert F[:, 0] == pytest.approx([3.0, 2.0])


def test_additive_uses_recorded_treatment_in_flipped_strata():
    s = Stratum((True, True, False), ((5.0,), (6.0,), (3.0,)))
    d = MatchedDesign.from_strata([s])
    F = apply_hypothesis(d, HypothesisSpec("additive", 1.0))
    assert F[:, 0].tolist() == [4.0, 5.0, 3.0]


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        HypothesisSpec("multiplicative", -1.0)
    with pytest.raises(ValueError):
        HypothesisSpec("additive", float("nan"))
    d = MatchedDesign.pairs([1.0], [-1.0])
    with pytest.raises(DesignError, match="positive"):
        apply_hypothesis(d, HypothesisSpec("multiplicative", 2.0))
