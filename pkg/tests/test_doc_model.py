import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import doc_model as dm
from echolab.corpus import SpanAnnotation
from echolab.errors import TrainingError, ValidationError
from echolab.ontology import SeverityLabel as L


class TestTfidf:
    DOCS = [["lv", "goed", "lv"], ["ai", "graad", "i"], ["lv", "ai"]]

    def test_vocab_order(self):
        v = dm.Vocabulary.build(self.DOCS)
        assert v.terms[:2] == ["ai", "lv"]          # df 2, alphabetical
        assert dm.Vocabulary.build(self.DOCS, max_size=3).terms == ["ai", "lv", "goed"]

    def test_values_match_formula(self):
        model = dm.fit_tfidf(self.DOCS)
        X = model.transform(self.DOCS)
        N = 3
        for r, doc in enumerate(self.DOCS):
            raw = {}
            for t in set(doc):
                df = sum(t in d for d in self.DOCS)
                raw[t] = doc.count(t) * (math.log((1 + N) / (1 + df)) + 1)
            norm = math.sqrt(sum(v * v for v in raw.values()))
            for t, v in raw.items():
                assert X[r, model.vocab.index[t]] == pytest.approx(v / norm, rel=1e-12)

    def test_oov_and_empty(self):
        model = dm.fit_tfidf(self.DOCS)
        X = model.transform([["onbekend"], []])
        assert not X.any()
        with pytest.raises(ValidationError):
            dm.fit_tfidf([])

    @settings(max_examples=30)
    @given(st.lists(st.lists(st.sampled_from(list("abcdefg")), max_size=8), min_size=1,
                    max_size=10))
    def test_rows_unit_or_zero(self, docs):
        if not any(docs):
            return
        X = dm.fit_tfidf(docs).transform(docs)
        norms = np.linalg.norm(X, axis=1)
        assert np.isfinite(X).all()
        assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))


class TestLda:
    def planted(self, rng, n=60):
        docs = []
        for i in range(n):
            base = 0 if i % 2 == 0 else 10
            docs.append(list(rng.integers(base, base + 10, 15)))
        return docs

    def test_token_conservation(self, rng):
        docs = self.planted(rng)
        total = sum(map(len, docs))
        seen = []
        dm.fit_lda(docs, 20, n_topics=4, sweeps=15,
                   callback=lambda s, nkw: seen.append(int(nkw.sum())))
        assert seen == [total] * 15

    def test_planted_topics_separate(self, rng):
        docs = self.planted(rng)
        lda = dm.fit_lda(docs, 20, n_topics=2, sweeps=60, seed=1)
        a = lda.infer(list(range(0, 10)) * 2)
        b = lda.infer(list(range(10, 20)) * 2)
        assert a.argmax() != b.argmax()
        assert max(a) > 0.8 and max(b) > 0.8
        np.testing.assert_allclose(lda.phi().sum(axis=1), 1.0)

    def test_inference_deterministic_and_normalised(self, rng):
        lda = dm.fit_lda(self.planted(rng), 20, n_topics=3, sweeps=10)
        x = lda.infer([1, 2, 3])
        assert np.array_equal(x, lda.infer([1, 2, 3]))
        assert x.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(lda.infer([]), 1 / 3)

    def test_same_seed_same_counts(self, rng):
        docs = self.planted(rng)
        a = dm.fit_lda(docs, 20, n_topics=3, sweeps=5, seed=9)
        b = dm.fit_lda(docs, 20, n_topics=3, sweeps=5, seed=9)
        assert np.array_equal(a.topic_word, b.topic_word)


class TestGbdt:
    def test_root_leaf_value(self, rng):
        """A depth-0 tree is one Newton step: -G / (H + lambda) * shrinkage."""
        X = rng.random((30, 2)).astype(np.float32)
        g = rng.normal(size=30)
        h = rng.uniform(0.1, 0.3, 30)
        cfg = dm.GbdtConfig(max_depth=0)
        tree, pred = dm.build_tree(dm.ColumnIndex(X), g, h, cfg)
        want = np.float32(-g.sum() / (h.sum() + 1.0) * 0.1)
        assert tree.value[0] == want
        np.testing.assert_array_equal(pred, np.float64(want))

    def test_training_preds_match_tree(self, rng):
        X = (rng.random((200, 6)) * (rng.random((200, 6)) < 0.5)).astype(np.float32)
        g = rng.normal(size=200)
        h = rng.uniform(0.1, 0.25, 200)
        tree, pred = dm.build_tree(dm.ColumnIndex(X), g, h, dm.GbdtConfig(max_depth=4))
        np.testing.assert_array_equal(tree.predict(X), pred)
        assert (tree.feature >= 0).sum() >= 1
        arr = dm.Tree.from_array(tree.to_array())
        np.testing.assert_array_equal(arr.predict(X), pred)

    def test_fits_separable(self, rng):
        X = rng.random((300, 4)).astype(np.float32)
        y = np.where(X[:, 0] > 0.5, "hi", "lo")
        m = dm.train_gbdt(X, list(y), dm.GbdtConfig(n_estimators=20, max_depth=2))
        assert np.mean(np.array(m.predict(X)) == y) == 1.0
        for curve in m.train_loss:
            assert curve[-1] < curve[0]

    def test_rejects(self, rng):
        with pytest.raises(TrainingError):
            dm.train_gbdt(np.ones((3, 2)), ["a"] * 3)
        with pytest.raises(ValidationError):
            dm.train_gbdt(-np.ones((3, 2)), ["a", "b", "a"])


SMALL_BOW = dm.BowConfig(n_topics=5, lda_sweeps=20, infer_sweeps=10, n_estimators=15,
                         max_depth=3)


class TestBow:
    @pytest.fixture(scope="class")
    @classmethod
    def bow(cls, small_corpus, ontology):
        return dm.train_bow(small_corpus[:240], ontology, SMALL_BOW,
                            char_ids={"aortic_stenosis", "pericardial_effusion"})

    def test_predicts_labels(self, bow, small_corpus):
        preds = bow.predict(small_corpus[240:])
        assert set(preds[0]) == {"aortic_stenosis", "pericardial_effusion"}
        train_acc = np.mean([p["aortic_stenosis"] == d.label("aortic_stenosis")
                             for p, d in zip(bow.predict(small_corpus[:240]), small_corpus)])
        assert train_acc > 0.9

    def test_features(self, bow, small_corpus):
        X = bow.features(small_corpus[:5])
        assert X.shape == (5, len(bow.tfidf.vocab) + 5)
        np.testing.assert_allclose(X[:, -5:].sum(axis=1), 1.0, rtol=1e-5)

    def test_roundtrip(self, bow, small_corpus, tmp_path):
        bow.save(tmp_path / "bow.ecl")
        back = dm.BowDocModel.load(tmp_path / "bow.ecl")
        assert back.predict(small_corpus[240:]) == bow.predict(small_corpus[240:])

    def test_simplified_training(self, small_corpus, ontology):
        from echolab.corpus import apply_scheme
        docs = apply_scheme(small_corpus[:200], "simplified")
        m = dm.train_bow(docs, ontology, SMALL_BOW, char_ids={"aortic_stenosis"},
                         scheme="simplified")
        assert set(m.heads["aortic_stenosis"].classes) <= {L.NO_LABEL, L.NORMAL, L.PRESENT}


TINY_CNN = dm.CnnConfig(embed_dim=6, filters=4, kernel_sizes=(2, 3), hidden=5, dropout=0.0)


class TestCnn:
    def test_gradients_float64(self, rng):
        P = dm.cnn_init(TINY_CNN, 22, 3, dtype=np.float64)
        seqs = [rng.integers(1, 22, n) for n in (1, 4, 6, 3)]
        fwd, rev, lens = dm._pad_batch(seqs, 3)
        y = np.array([0, 2, 1, 2])
        loss, G = dm.cnn_loss_and_grads(P, fwd, rev, lens, y, TINY_CNN)
        from test_span_model import grad_check
        # the PAD row is a fixed zero vector, so only rows 1: are trainable
        views = {k: v for k, v in P.items() if k != "embed"}
        views["embed_rows"] = P["embed"][1:]
        grads = dict(G, embed_rows=G["embed"][1:])
        worst = grad_check(views, lambda: dm.cnn_loss_and_grads(P, fwd, rev, lens, y,
                                                                TINY_CNN)[0], grads)
        assert worst <= 1e-4
        assert not G["embed"][dm.PAD].any()

    def test_padding_invariant(self, rng):
        P = dm.cnn_init(TINY_CNN, 22, 3, dtype=np.float64)
        short = rng.integers(1, 22, 3)
        long = rng.integers(1, 22, 12)
        alone = dm.cnn_forward(P, *dm._pad_batch([short], 3), TINY_CNN)
        both = dm.cnn_forward(P, *dm._pad_batch([short, long], 3), TINY_CNN)
        np.testing.assert_allclose(alone[0], both[0], rtol=1e-12)

    def test_encode_ids(self):
        v = dm.Vocabulary(["lv", "ai"])
        assert dm.encode_ids(v, ["ai", "xx", "lv"], 10).tolist() == [3, dm.OOV, 2]
        assert len(dm.encode_ids(v, ["lv"] * 50, 10)) == 10

    def test_train_deterministic_and_roundtrip(self, small_corpus, ontology, tmp_path):
        cfg = dm.CnnConfig(embed_dim=16, filters=8, epochs=3, batch_size=32, seed=5)
        a = dm.train_cnn(small_corpus[:200], "aortic_stenosis", cfg, ontology)
        b = dm.train_cnn(small_corpus[:200], "aortic_stenosis", cfg, ontology)
        a.save(tmp_path / "a.ecl")
        b.save(tmp_path / "b.ecl")
        assert (tmp_path / "a.ecl").read_bytes() == (tmp_path / "b.ecl").read_bytes()
        back = dm.CnnDocModel.load(tmp_path / "a.ecl")
        np.testing.assert_allclose(back.predict_proba(small_corpus[200:]),
                                   a.predict_proba(small_corpus[200:]), rtol=1e-6)
        assert a.training_log[-1]["loss"] < a.training_log[0]["loss"]

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            dm.CnnConfig(dropout=1.0)
        with pytest.raises(ValidationError):
            dm.CnnConfig(kernel_sizes=())


class TestIndirect:
    def test_most_severe_span(self):
        spans = [SpanAnnotation(0, 2, "x", L.MILD), SpanAnnotation(3, 5, "x", L.SEVERE),
                 SpanAnnotation(6, 8, "x", L.NORMAL)]
        assert dm.spans_to_doc_label(spans) == L.SEVERE
        assert dm.spans_to_doc_label([]) == L.NO_LABEL
