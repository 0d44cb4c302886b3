import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from echolab.errors import DuplicateIdError, ParseError, ValidationError
from echolab.ontology import (LABELS_BY_RANK, SeverityLabel, aggregate_labels, load_ontology,
                              severity_rank, simplify_label)

L = SeverityLabel

INI = """
[ontology]
version = 3

[as]
id = as
display_name = Aortic stenosis
labels = NoLabel, Normal, Mild, Moderate, Severe

[pe]
id = pe
display_name = Pericardial effusion
labels = NoLabel, Normal, Present
"""


class TestLabels:
    """Severity order, parsing and the two label reductions."""

    def test_rank_order(self):
        assert [lab.value for lab in LABELS_BY_RANK] == [
            "NoLabel", "Normal", "Present", "Mild", "Moderate", "Severe"]
        assert severity_rank(L.SEVERE) == 5

    @pytest.mark.parametrize("text", ["mild", "MILD", " Mild", "no_label", "No Label"])
    def test_parse_lenient(self, text):
        assert SeverityLabel.parse(text) in (L.MILD, L.NO_LABEL)

    def test_parse_unknown(self):
        with pytest.raises(ValidationError):
            SeverityLabel.parse("huge")

    def test_aggregate_most_severe(self):
        assert aggregate_labels([L.NORMAL, L.MILD, L.SEVERE]) == L.SEVERE
        assert aggregate_labels([]) == L.NO_LABEL
        assert aggregate_labels([L.PRESENT, L.NORMAL]) == L.PRESENT

    def test_simplify(self):
        assert simplify_label(L.NO_LABEL) == L.NO_LABEL
        assert simplify_label(L.NORMAL) == L.NORMAL
        for lab in (L.MILD, L.MODERATE, L.SEVERE, L.PRESENT):
            assert simplify_label(lab) == L.PRESENT

    def test_aggregation_commutes_exhaustive(self):
        """simplify(aggregate(m)) == aggregate(simplify(m)) for all multisets up to size 4."""
        n = 0
        for k in range(1, 5):
            for combo in itertools.product(LABELS_BY_RANK, repeat=k):
                n += 1
                assert simplify_label(aggregate_labels(combo)) == aggregate_labels(
                    simplify_label(x) for x in combo)
        assert n == 6 + 36 + 216 + 1296

    @given(st.lists(st.sampled_from(list(SeverityLabel)), max_size=12))
    def test_aggregate_is_max(self, labels):
        agg = aggregate_labels(labels)
        assert all(severity_rank(x) <= severity_rank(agg) for x in labels)
        assert agg in labels or agg == L.NO_LABEL

    @given(st.lists(st.sampled_from(list(SeverityLabel)), max_size=6),
           st.lists(st.sampled_from(list(SeverityLabel)), max_size=6))
    def test_aggregate_associative(self, a, b):
        assert aggregate_labels(a + b) == aggregate_labels(
            [aggregate_labels(a), aggregate_labels(b)])


class TestOntologyFile:
    def test_default(self, ontology):
        assert len(ontology) == 11
        assert ontology.version == 1
        pe = ontology["pericardial_effusion"]
        assert pe.admits("Present")
        assert pe.ordered_labels[0] == L.NO_LABEL

    def test_parse_text(self):
        ont = load_ontology(INI)
        assert ont.version == 3
        assert ont.ids == ["as", "pe"]
        assert not ont["pe"].admits(L.MILD)

    def test_from_path(self, tmp_path):
        p = tmp_path / "o.ini"
        p.write_text(INI)
        assert load_ontology(str(p)).ids == ["as", "pe"]

    def test_duplicate_id(self):
        bad = INI + "\n[pe2]\nid = pe\ndisplay_name = x\nlabels = NoLabel, Normal\n"
        with pytest.raises(DuplicateIdError):
            load_ontology(bad)

    def test_missing_field_reports_line(self):
        bad = "[x]\nid = x\nlabels = NoLabel, Normal\n"
        with pytest.raises(ParseError) as err:
            load_ontology(bad)
        assert "display_name" in str(err.value)

    def test_unknown_label(self):
        with pytest.raises(ParseError):
            load_ontology("[x]\nid = x\ndisplay_name = X\nlabels = NoLabel, Normal, Huge\n")

    def test_requires_nolabel_and_normal(self):
        with pytest.raises(ParseError):
            load_ontology("[x]\nid = x\ndisplay_name = X\nlabels = Mild, Severe\n")

    def test_unknown_characteristic(self, ontology):
        with pytest.raises(ValidationError):
            ontology["nope"]
