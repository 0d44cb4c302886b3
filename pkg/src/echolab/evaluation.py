"""Span and document evaluation: P/R/F1 averaging, Jaccard coverage, false labels."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .ontology import Ontology, SeverityLabel, simplify_label
from .textproc import tokenize

NEUTRAL = (SeverityLabel.NO_LABEL, SeverityLabel.NORMAL)


@dataclass
class ConfusionTable:
    """Gold x predicted counts over an ordered class list."""

    classes: list
    counts: np.ndarray = None

    def __post_init__(self):
        self.classes = list(self.classes)
        self._index = {c: i for i, c in enumerate(self.classes)}
        n = len(self.classes)
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (n, n):
                raise ValidationError("confusion table must be square over its classes")
            if (self.counts < 0).any():
                raise ValidationError("confusion counts must be nonnegative")

    def add(self, gold, pred, n: int = 1):
        self.counts[self._index[gold], self._index[pred]] += n

    @property
    def support(self) -> dict:
        return {c: int(s) for c, s in zip(self.classes, self.counts.sum(axis=1))}

    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionTable") -> "ConfusionTable":
        if other.classes != self.classes:
            raise ValidationError("cannot merge tables over different classes")
        return ConfusionTable(self.classes, self.counts + other.counts)


def per_class_prf(conf: ConfusionTable):
    """Per-class precision, recall, F1 and support arrays (0/0 taken as 0)."""
    m = conf.counts.astype(np.float64)
    tp = np.diag(m)
    pred_tot = m.sum(axis=0)
    gold_tot = m.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        r = np.where(gold_tot > 0, tp / gold_tot, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f, gold_tot


def prf(conf: ConfusionTable, averaging: str = "weighted", exclude=()) -> tuple:
    """Averaged (precision, recall, F1).

    Classes listed in ``exclude`` still shape the other classes' scores
    but are left out of the average.  Classes with neither gold nor
    predicted instances are ignored.
    """
    if averaging not in ("weighted", "macro"):
        raise ValueError(f"unknown averaging {averaging!r}")
    if conf.total() == 0:
        raise ValidationError("empty confusion table")
    p, r, f, support = per_class_prf(conf)
    pred_tot = conf.counts.sum(axis=0)
    keep = np.array([c not in exclude and (support[i] > 0 or pred_tot[i] > 0)
                     for i, c in enumerate(conf.classes)])
    if not keep.any():
        return 0.0, 0.0, 0.0
    if averaging == "macro":
        return float(p[keep].mean()), float(r[keep].mean()), float(f[keep].mean())
    w = support[keep]
    if w.sum() == 0:
        return 0.0, 0.0, 0.0
    w = w / w.sum()
    return float(p[keep] @ w), float(r[keep] @ w), float(f[keep] @ w)


def _char_classes(ontology: Ontology, cid: str, scheme: str = "full") -> list:
    labs = ontology[cid].ordered_labels
    if scheme == "simplified":
        labs = [lab for lab in labs if lab in (SeverityLabel.NO_LABEL, SeverityLabel.NORMAL,
                                               SeverityLabel.PRESENT)]
        if SeverityLabel.PRESENT not in labs and len(ontology[cid].ordered_labels) > 2:
            labs.append(SeverityLabel.PRESENT)
    return list(labs)


def _token_ranges(tokdoc, spans, doc_id):
    n = len(tokdoc.tokens)
    text_len = tokdoc.tokens[-1].end if n else 0
    out = []
    for s in spans:
        if s.start < 0 or s.end < s.start:
            raise ValidationError(f"doc {doc_id!r}: invalid span offsets [{s.start},{s.end})")
        i, j = tokdoc.token_range(s.start, s.end)
        if j <= i and s.end > text_len:
            raise ValidationError(f"doc {doc_id!r}: span [{s.start},{s.end}) out of bounds")
        out.append((i, j, s.label))
    return out


def align(gold, pred):
    """One-to-one alignment of (start, end, label) token ranges by overlap.

    Pairs are taken greedily by largest token overlap (ties to the
    earliest gold, then earliest prediction); only positive overlaps
    align.  Returns ``(pairs, unmatched_gold, unmatched_pred)`` as index
    lists.
    """
    cands = []
    for gi, (gs, ge, _) in enumerate(gold):
        for pi, (ps, pe, _) in enumerate(pred):
            ov = min(ge, pe) - max(gs, ps)
            if ov > 0:
                cands.append((-ov, gs, gi, ps, pi))
    cands.sort()
    used_g, used_p, pairs = set(), set(), []
    for _, _, gi, _, pi in cands:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        pairs.append((gi, pi))
    ug = [i for i in range(len(gold)) if i not in used_g]
    up = [i for i in range(len(pred)) if i not in used_p]
    return pairs, ug, up


class _Prepared:
    """Tokenized gold documents and per-characteristic token ranges."""

    def __init__(self, gold_docs, predictions, ontology):
        self.ontology = ontology
        self.docs = list(gold_docs)
        ids = {d.doc_id for d in self.docs}
        unknown = set(predictions or {}) - ids
        if unknown:
            raise ValidationError(f"predictions for unknown doc ids: {sorted(unknown)[:3]}")
        self.tok = {d.doc_id: tokenize(d.text, d.doc_id) for d in self.docs}
        self.gold = {}
        self.pred = {}
        for d in self.docs:
            td = self.tok[d.doc_id]
            preds = (predictions or {}).get(d.doc_id, [])
            for s in preds:
                if s.start < 0 or s.end > len(d.text) or s.end <= s.start:
                    raise ValidationError(
                        f"doc {d.doc_id!r}: predicted span [{s.start},{s.end}) out of bounds")
            for ch in ontology:
                self.gold[d.doc_id, ch.id] = _token_ranges(td, d.spans_for(ch.id), d.doc_id)
                self.pred[d.doc_id, ch.id] = _token_ranges(
                    td, [s for s in preds if s.characteristic_id == ch.id], d.doc_id)


def span_eval(gold_docs, predictions=None, ontology: Ontology = None, mode: str = "end_to_end",
              classifier=None, prepared=None) -> dict:
    """Confusion tables per characteristic for span classification.

    ``end_to_end`` aligns predicted spans (``{doc_id: [SpanAnnotation]}``)
    with gold spans.  ``matched`` ignores ``predictions`` and calls
    ``classifier(tokenized_doc, char_id, start_tok, end_tok)`` on each
    gold token range.
    """
    if mode not in ("end_to_end", "matched"):
        raise ValueError(f"unknown span evaluation mode {mode!r}")
    if mode == "matched" and classifier is None:
        raise ValueError("matched mode needs a range classifier")
    prep = prepared or _Prepared(gold_docs, predictions, ontology)
    ontology = prep.ontology
    tables = {ch.id: ConfusionTable(_char_classes(ontology, ch.id)) for ch in ontology}
    for d in prep.docs:
        td = prep.tok[d.doc_id]
        for ch in ontology:
            conf = tables[ch.id]
            gold = prep.gold[d.doc_id, ch.id]
            if mode == "matched":
                for i, j, lab in gold:
                    conf.add(lab, classifier(td, ch.id, i, j))
            else:
                add_aligned(conf, gold, prep.pred[d.doc_id, ch.id])
    return tables


def add_aligned(conf: ConfusionTable, gold, pred) -> None:
    """Add one document's aligned (start, end, label) ranges to ``conf``."""
    pairs, ug, up = align(gold, pred)
    for gi, pi in pairs:
        conf.add(gold[gi][2], pred[pi][2])
    for gi in ug:
        conf.add(gold[gi][2], SeverityLabel.NO_LABEL)
    for pi in up:
        conf.add(SeverityLabel.NO_LABEL, pred[pi][2])


def span_f1(gold_ranges, pred_ranges, classes, averaging="weighted") -> float:
    """End-to-end F1 over labelled classes for lists of per-document ranges.

    Returns 0.0 when there is nothing to score.
    """
    conf = ConfusionTable(classes)
    for gold, pred in zip(gold_ranges, pred_ranges):
        add_aligned(conf, gold, pred)
    if conf.total() == 0:
        return 0.0
    return prf(conf, averaging, exclude=(SeverityLabel.NO_LABEL,))[2]


def _covered(ranges):
    out = set()
    for i, j, lab in ranges:
        if lab != SeverityLabel.NO_LABEL:
            out.update(range(i, j))
    return out


def jaccard_coverage(gold_docs, predictions=None, ontology: Ontology = None,
                     prepared=None) -> dict:
    """Token-level Jaccard index of gold vs predicted labelled coverage."""
    prep = prepared or _Prepared(gold_docs, predictions, ontology)
    out = {}
    for ch in prep.ontology:
        inter = union = 0
        for d in prep.docs:
            g = _covered(prep.gold[d.doc_id, ch.id])
            p = _covered(prep.pred[d.doc_id, ch.id])
            inter += len(g & p)
            union += len(g | p)
        out[ch.id] = 1.0 if union == 0 else inter / union
    return out


def false_label_rate(gold_docs, predictions=None, ontology: Ontology = None,
                     prepared=None) -> dict:
    """Share of predicted spans asserting an abnormality where gold has none."""
    prep = prepared or _Prepared(gold_docs, predictions, ontology)
    out = {}
    for ch in prep.ontology:
        false = total = 0
        for d in prep.docs:
            gold = prep.gold[d.doc_id, ch.id]
            pred = prep.pred[d.doc_id, ch.id]
            total += len(pred)
            pairs, _, up = align(gold, pred)
            for gi, pi in pairs:
                if pred[pi][2] not in NEUTRAL and gold[gi][2] in NEUTRAL:
                    false += 1
            false += sum(1 for pi in up if pred[pi][2] not in NEUTRAL)
        out[ch.id] = false / total if total else 0.0
    return out


def doc_eval(gold: dict, predicted: dict, ontology: Ontology, scheme: str = "full") -> dict:
    """Confusion tables per characteristic for document labels.

    ``gold`` and ``predicted`` map doc_id -> {char_id: SeverityLabel}.
    """
    if set(gold) != set(predicted):
        raise ValidationError(
            f"document id mismatch: {len(set(gold) ^ set(predicted))} ids differ")
    tables = {}
    for ch in ontology:
        conf = ConfusionTable(_char_classes(ontology, ch.id, scheme))
        for doc_id in sorted(gold):
            g = gold[doc_id].get(ch.id, SeverityLabel.NO_LABEL)
            p = predicted[doc_id].get(ch.id, SeverityLabel.NO_LABEL)
            if scheme == "simplified":
                g, p = simplify_label(g), simplify_label(p)
            conf.add(g, p)
        tables[ch.id] = conf
    return tables


@dataclass
class CharReport:
    weighted: tuple
    macro: tuple
    support: dict
    jaccard: float | None = None
    false_label_rate: float | None = None


@dataclass
class EvalReport:
    title: str = ""
    rows: dict = field(default_factory=dict)

    def f1(self, cid, averaging="weighted") -> float:
        return getattr(self.rows[cid], averaging)[2]


def build_report(tables: dict, title: str = "", jaccard=None, false_labels=None,
                 exclude=()) -> EvalReport:
    rep = EvalReport(title)
    for cid, conf in tables.items():
        if conf.total() == 0:
            continue
        rep.rows[cid] = CharReport(
            weighted=prf(conf, "weighted", exclude),
            macro=prf(conf, "macro", exclude),
            support={str(k): v for k, v in conf.support.items()},
            jaccard=None if jaccard is None else jaccard[cid],
            false_label_rate=None if false_labels is None else false_labels[cid],
        )
    return rep


def evaluate_spans(gold_docs, predictions, ontology: Ontology, title="") -> EvalReport:
    """End-to-end span report with Jaccard coverage and false-label rate.

    Averages run over the labelled classes; NoLabel only appears as the
    miss / spurious column and row of each table.
    """
    prep = _Prepared(gold_docs, predictions, ontology)
    tables = span_eval(None, None, ontology, "end_to_end", prepared=prep)
    return build_report(tables, title, jaccard_coverage(None, prepared=prep),
                        false_label_rate(None, prepared=prep),
                        exclude=(SeverityLabel.NO_LABEL,))


def _metric_rows(rep: EvalReport):
    for cid in sorted(rep.rows):
        row = rep.rows[cid]
        for avg in ("weighted", "macro"):
            vals = getattr(row, avg)
            for name, v in zip(("precision", "recall", "f1"), vals):
                yield cid, name, avg, v
        if row.jaccard is not None:
            yield cid, "jaccard", "none", row.jaccard
        if row.false_label_rate is not None:
            yield cid, "false_label_rate", "none", row.false_label_rate


def render_report(rep: EvalReport, fmt: str = "markdown") -> str:
    """CSV (``characteristic,metric,averaging,value``) or a markdown table.

    Markdown cells read ``weighted (macro)``.
    """
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["characteristic", "metric", "averaging", "value"])
        for cid, name, avg, v in _metric_rows(rep):
            w.writerow([cid, name, avg, f"{v:.6f}"])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    extra = []
    if any(r.jaccard is not None for r in rep.rows.values()):
        extra.append("Jaccard")
    if any(r.false_label_rate is not None for r in rep.rows.values()):
        extra.append("False labels")
    head = ["Characteristic", "F1", "recall", "precision"] + extra
    lines = []
    if rep.title:
        lines += [f"### {rep.title}", ""]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "|".join(["---"] * len(head)) + "|")
    for cid in sorted(rep.rows):
        r = rep.rows[cid]
        cells = [cid]
        for k in (2, 1, 0):
            cells.append(f"{r.weighted[k]:.2f} ({r.macro[k]:.2f})")
        if "Jaccard" in extra:
            cells.append("" if r.jaccard is None else f"{r.jaccard:.2f}")
        if "False labels" in extra:
            v = r.false_label_rate
            cells.append("" if v is None else ("<0.01" if 0 < v < 0.005 else f"{v:.2f}"))
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "Weighted and macro (in brackets) scores."]
    return "\n".join(lines) + "\n"
