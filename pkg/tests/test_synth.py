import numpy as np
import pytest

from echolab import corpus
from echolab.errors import ValidationError
from echolab.ontology import SeverityLabel as L
from echolab.rule_engine import compile_rules, match_document
from echolab.synth import expand_slot, generate_synthetic, load_profile, load_templates
from echolab.textproc import tokenize


class TestGenerator:
    def test_deterministic(self, ontology):
        a = corpus.dumps(generate_synthetic(ontology, 50, 3))
        assert a == corpus.dumps(generate_synthetic(ontology, 50, 3))
        assert a != corpus.dumps(generate_synthetic(ontology, 50, 4))

    def test_spans_valid_and_textual(self, small_corpus, ontology):
        for d in small_corpus:
            corpus.validate_document(d, ontology)
            assert d.spans
            assert len(d.text) >= 30

    def test_emission_log_matches_spans(self, ontology):
        log = []
        docs = generate_synthetic(ontology, 20, 1, emission_log=log)
        assert len(log) == sum(len(d.spans) for d in docs)
        by_id = {d.doc_id: d for d in docs}
        for rec in log:
            assert rec["text"].lower() in by_id[rec["doc_id"]].text.lower()

    def test_label_shares_follow_profile(self, ontology):
        docs = generate_synthetic(ontology, 3000, 0)
        prof = load_profile()
        share = np.mean([d.label("lv_systolic_dysfunction") == L.NORMAL for d in docs])
        # redraws of all-NoLabel reports only shift shares slightly
        assert share == pytest.approx(prof["lv_systolic_dysfunction"]["Normal"], abs=0.04)

    def test_rules_cover_gold(self, small_corpus, ontology):
        rules = compile_rules(None, ontology)
        d = small_corpus[0]
        pred = match_document(tokenize(d.text, d.doc_id), rules)
        assert {(s.start, s.end, s.characteristic_id, s.label) for s in pred} == {
            (s.start, s.end, s.characteristic_id, s.label) for s in d.spans}

    def test_invalid_n(self, ontology):
        with pytest.raises(ValidationError):
            generate_synthetic(ontology, 0, 1)

    def test_data_files(self):
        t = load_templates()
        assert {"slots", "characteristics", "distractors", "headers"} <= set(t)
        assert expand_slot({"int": [1, 3]}) == ["1", "2", "3"]
