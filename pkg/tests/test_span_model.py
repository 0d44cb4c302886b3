import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import span_model as sm
from echolab.errors import TrainingError, ValidationError
from echolab.evaluation import evaluate_spans
from echolab.ontology import SeverityLabel as L
from echolab.textproc import hash_rows, tokenize

TINY = dict(embed_rows=(50, 20, 30, 30), width=8, hidden=6, depth=2)


def grad_check(P, loss_fn, grads, eps=1e-6):
    """Worst relative error (per tensor, L2) between analytic and central differences."""
    worst = 0.0
    for k, v in P.items():
        num = np.zeros_like(v)
        flat, nf = v.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            nf[i] = (lp - lm) / (2 * eps)
        denom = max(np.linalg.norm(grads[k]), np.linalg.norm(num), 1e-12)
        worst = max(worst, np.linalg.norm(grads[k] - num) / denom)
    return worst


class TestSuggester:
    @settings(max_examples=60)
    @given(st.integers(0, 60), st.integers(1, 30), st.integers(1, 30))
    def test_count_and_enumeration(self, L_, a, b):
        lo, hi = min(a, b), max(a, b)
        cfg = sm.SuggesterConfig(lo, hi)
        spans = sm.suggest_spans(L_, cfg)
        brute = [(i, j) for i in range(L_) for j in range(i + 1, L_ + 1) if lo <= j - i <= hi]
        assert sorted(map(tuple, spans.tolist())) == sorted(brute)
        assert len(spans) == sm.suggestion_count(L_, cfg) == sum(
            L_ - k + 1 for k in range(lo, min(hi, L_) + 1))

    def test_order(self):
        spans = sm.suggest_spans(3, sm.SuggesterConfig(1, 2)).tolist()
        assert spans == [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]

    def test_invalid(self):
        with pytest.raises(ValidationError):
            sm.SuggesterConfig(3, 2)


def tiny_batch(cfg, rng, texts=("geen MI , lichte AI", "LVEF 45 %")):
    items = []
    for text in texts:
        td = tokenize(text)
        spans = sm.suggest_spans(td, cfg.suggester)
        items.append((hash_rows(td, cfg.embed_rows), spans, rng.integers(0, 3, len(spans))))
    return sm.make_batch(items, cfg.window)


class TestNetwork:
    def test_gradients_float64(self, rng):
        cfg = sm.SpanModelConfig(**TINY, dropout=0.0)
        P = sm.init_params(cfg, 3, seed=1, dtype=np.float64)
        for k in P:  # move off the zero-initialised output layer
            P[k] = P[k] + rng.normal(0, 0.3, P[k].shape)
        batch = tiny_batch(cfg, rng)
        loss, G = sm.loss_and_grads(P, batch, cfg, 0.7)
        worst = grad_check(P, lambda: sm.loss_and_grads(P, batch, cfg, 0.7)[0], G)
        assert worst <= 1e-4

    def test_zero_output_is_uniform(self, rng):
        cfg = sm.SpanModelConfig(**TINY)
        P = sm.init_params(cfg, 4, seed=0)
        P["out_W"][:] = 0
        P["out_b"][:] = 0
        probs = sm.forward(P, tiny_batch(cfg, rng), cfg)
        np.testing.assert_allclose(probs, 0.25, atol=1e-7)

    def test_loss_weighting(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        labels = np.array([0, 1])
        full = sm.span_loss(probs, labels, 1.0)
        half = sm.span_loss(probs, labels, 0.5)
        assert full == pytest.approx(-(np.log(0.5) + np.log(0.75)) / 2)
        assert half == pytest.approx(-(0.5 * np.log(0.5) + np.log(0.75)) / 2)

    def test_batch_independent(self, rng):
        """A document's span scores do not depend on its batch neighbours."""
        cfg = sm.SpanModelConfig(**TINY)
        P = sm.init_params(cfg, 3, seed=2, dtype=np.float64)
        P["out_W"] = rng.normal(size=P["out_W"].shape)
        model = sm.SpanModel("aortic_stenosis", [L.NO_LABEL, L.NORMAL, L.MILD], cfg, P)
        a, b = tokenize("lichte AoS"), tokenize("geen pericardvocht , goede LV functie")
        alone = model.span_probs([a])[0][1]
        paired = model.span_probs([b, a])[1][1]
        np.testing.assert_allclose(alone, paired, rtol=1e-10)
        np.testing.assert_allclose(model.classify_range(a, 0, 2),
                                   alone[sm.suggest_spans(a, cfg.suggester).tolist().index([0, 2])],
                                   rtol=1e-10)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            sm.SpanModelConfig(width=10)
        with pytest.raises(ValidationError):
            sm.SpanModelConfig(negative_weight=0.0)
        cfg = sm.SpanModelConfig.desk(seed=3)
        assert sm.SpanModelConfig.from_json(cfg.to_json()) == cfg


FAST = dict(TINY, width=16, hidden=16, max_steps=300, eval_frequency=50, patience=300,
            batch_size=2, max_len=8, lr=0.01)


@pytest.fixture(scope="module")
def trained(small_corpus, ontology):
    cfg = sm.SpanModelConfig(**FAST, seed=4)
    return sm.train_span_model(small_corpus[:200], "aortic_stenosis", cfg, ontology)


class TestTraining:
    def test_log_and_classes(self, trained):
        assert trained.classes[0] == L.NO_LABEL
        steps = [e["step"] for e in trained.training_log if "step" in e]
        assert steps == sorted(steps) and steps[0] == 50
        assert "best_dev_f1" in trained.training_log[-1]

    def test_learns_something(self, trained, small_corpus, ontology):
        test = small_corpus[200:]
        preds = sm.predict_corpus(test, {"aortic_stenosis": trained})
        rep = evaluate_spans(test, {d.doc_id: p for d, p in zip(test, preds)}, ontology)
        assert rep.rows["aortic_stenosis"].jaccard > 0.3

    def test_predictions_non_overlapping(self, trained, small_corpus):
        for doc_ranges in trained.predict_ranges([tokenize(d.text) for d in small_corpus[:40]],
                                                 threshold=0.0):
            for (a, b, _, _), (c, d, _, _) in zip(doc_ranges, doc_ranges[1:]):
                assert b <= c

    def test_save_load_roundtrip(self, trained, tmp_path, small_corpus):
        p = tmp_path / "m.ecl"
        trained.save(p)
        back = sm.SpanModel.load(p)
        docs = [tokenize(d.text) for d in small_corpus[:5]]
        assert back.predict_ranges(docs) == trained.predict_ranges(docs)
        assert back.config == trained.config and back.classes == trained.classes

    def test_deterministic_bytes(self, trained, small_corpus, ontology, tmp_path):
        again = sm.train_span_model(small_corpus[:200], "aortic_stenosis",
                                    sm.SpanModelConfig(**FAST, seed=4), ontology)
        trained.save(tmp_path / "a.ecl")
        again.save(tmp_path / "b.ecl")
        assert (tmp_path / "a.ecl").read_bytes() == (tmp_path / "b.ecl").read_bytes()

    def test_no_positive_spans(self, small_corpus, ontology):
        docs = [d for d in small_corpus if not d.spans_for("pericardial_effusion")][:20]
        with pytest.raises(TrainingError):
            sm.train_span_model(docs, "pericardial_effusion", sm.SpanModelConfig(**FAST), ontology)

    def test_sweep_log(self, small_corpus, ontology):
        cfg = sm.SpanModelConfig(**dict(FAST, max_steps=60, eval_frequency=20, patience=60))
        m = sm.train_sweep(small_corpus[:80], "lv_systolic_dysfunction", cfg, ontology)
        log = m.sweep_log
        assert [e["negative_weight"] for e in log[:3]] == [0.6, 0.8, 1.0]
        scores = [e["dev_f1"] for e in log[:3]]
        assert log[3]["selected"] == [0.6, 0.8, 1.0][int(np.argmax(scores))]
        assert m.config.negative_weight == log[3]["selected"]
