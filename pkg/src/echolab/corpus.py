"""Annotated report ingestion, filtering, splitting and corpus statistics."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .ontology import Ontology, SeverityLabel, aggregate_labels, default_ontology, simplify_label
from .textproc import tokenize


@dataclass(frozen=True)
class SpanAnnotation:
    start: int
    end: int
    characteristic_id: str
    label: SeverityLabel

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "label": self.label.value,
                "characteristic": self.characteristic_id}


@dataclass
class AnnotatedDocument:
    doc_id: str
    text: str
    spans: list = field(default_factory=list)
    doc_labels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def spans_for(self, char_id: str) -> list:
        return [s for s in self.spans if s.characteristic_id == char_id]

    def label(self, char_id: str) -> SeverityLabel:
        return self.doc_labels.get(char_id, SeverityLabel.NO_LABEL)

    def to_json(self) -> dict:
        spans = sorted(self.spans, key=lambda s: (s.start, s.end, s.characteristic_id))
        return {"doc_id": self.doc_id, "text": self.text,
                "spans": [s.to_json() for s in spans], "meta": self.meta}


def derive_doc_labels(spans, ontology: Ontology) -> dict:
    by_char = defaultdict(list)
    for s in spans:
        by_char[s.characteristic_id].append(s.label)
    return {cid: aggregate_labels(by_char.get(cid, ())) for cid in ontology.ids}


def validate_document(doc: AnnotatedDocument, ontology: Ontology) -> None:
    n = len(doc.text)
    by_char = defaultdict(list)
    for s in doc.spans:
        if not (0 <= s.start < s.end <= n):
            raise ValidationError(
                f"doc {doc.doc_id!r}: span [{s.start},{s.end}) out of bounds for text of length {n}")
        if s.label == SeverityLabel.NO_LABEL:
            raise ValidationError(f"doc {doc.doc_id!r}: spans cannot carry NoLabel")
        if not ontology[s.characteristic_id].admits(s.label):
            raise ValidationError(
                f"doc {doc.doc_id!r}: label {s.label} inadmissible for {s.characteristic_id}")
        by_char[s.characteristic_id].append(s)
    for cid, spans in by_char.items():
        spans = sorted(spans, key=lambda s: (s.start, s.end))
        for a, b in zip(spans, spans[1:]):
            if b.start < a.end:
                raise ValidationError(
                    f"doc {doc.doc_id!r}: overlapping spans for {cid} at "
                    f"[{a.start},{a.end}) and [{b.start},{b.end})")


def make_document(doc_id, text, spans, ontology: Ontology, meta=None) -> AnnotatedDocument:
    doc = AnnotatedDocument(doc_id, text, list(spans), {}, dict(meta or {}))
    validate_document(doc, ontology)
    doc.doc_labels = derive_doc_labels(doc.spans, ontology)
    return doc


def synth_doc_id(text: str) -> str:
    return "doc-" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


def ingest(lines, ontology: Ontology | None = None, source: str = "<jsonl>") -> list:
    """Parse annotation JSONL into validated documents.

    ``lines`` may be an iterable of strings or several such iterables
    (one per single-characteristic export); documents sharing a
    ``doc_id`` are merged.  Missing ids are derived from the text so that
    separate exports of the same report merge.
    """
    ontology = ontology or default_ontology()
    if isinstance(lines, (str, bytes)):
        lines = lines.splitlines()
    merged = {}
    order = []
    for lineno, line in enumerate(lines, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise ParseError(f"malformed JSON: {err.msg}", line=lineno, source=source) from None
        if not isinstance(obj, dict) or "text" not in obj:
            raise ParseError("record must be an object with a 'text' field",
                             line=lineno, source=source)
        text = obj["text"]
        meta = obj.get("meta") or {}
        default_char = meta.get("characteristic")
        doc_id = obj.get("doc_id") or synth_doc_id(text)
        spans = []
        for raw in obj.get("spans") or []:
            try:
                cid = raw.get("characteristic", default_char)
                if cid is None:
                    raise ValidationError("span has no characteristic")
                if cid not in ontology:
                    raise ValidationError(f"unknown characteristic {cid!r}")
                spans.append(SpanAnnotation(int(raw["start"]), int(raw["end"]), cid,
                                            SeverityLabel.parse(raw["label"])))
            except (KeyError, TypeError) as err:
                raise ParseError(f"bad span record {raw!r} ({err})", line=lineno,
                                 source=source) from None
            except ValidationError as err:
                raise ParseError(str(err), line=lineno, source=source) from None
        if doc_id in merged:
            prev = merged[doc_id]
            if prev["text"] != text:
                raise ParseError(f"doc_id {doc_id!r} reused with different text",
                                 line=lineno, source=source)
            prev["spans"].extend(spans)
            prev["meta"].update({k: v for k, v in meta.items() if k != "characteristic"})
        else:
            merged[doc_id] = {"text": text, "spans": spans,
                              "meta": {k: v for k, v in meta.items() if k != "characteristic"},
                              "line": lineno}
            order.append(doc_id)
    docs = []
    for doc_id in order:
        rec = merged[doc_id]
        try:
            docs.append(make_document(doc_id, rec["text"], rec["spans"], ontology, rec["meta"]))
        except ValidationError as err:
            raise ParseError(str(err), line=rec["line"], source=source) from None
    return docs


def ingest_files(paths, ontology: Ontology | None = None) -> list:
    """Ingest and merge one or more JSONL files."""
    lines = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            lines.extend(fh.read().splitlines())
    return ingest(lines, ontology, source=",".join(str(p) for p in paths))


def dumps(docs) -> str:
    buf = io.StringIO()
    for doc in docs:
        buf.write(json.dumps(doc.to_json(), ensure_ascii=False, sort_keys=True))
        buf.write("\n")
    return buf.getvalue()


def write_jsonl(docs, path) -> None:
    from .modelio import atomic_write_text
    atomic_write_text(path, dumps(docs))


def read_jsonl(path, ontology: Ontology | None = None) -> list:
    return ingest_files([path], ontology)


def filter_reports(docs, rules=None) -> list:
    """Drop reports that are too short to describe any finding.

    Texts under 15 characters are always dropped; texts under 30 are
    dropped unless the rule dictionary finds at least one phrase.
    """
    from .rule_engine import match_document

    kept = []
    for doc in docs:
        n = len(doc.text)
        if n < 15:
            continue
        if n < 30:
            if rules is None or not match_document(tokenize(doc.text, doc.doc_id), rules):
                continue
        kept.append(doc)
    return kept


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple
    test: tuple
    seed: int

    def to_json(self) -> dict:
        return {"seed": self.seed, "train_ids": list(self.train), "test_ids": list(self.test)}

    @classmethod
    def from_json(cls, obj) -> "CorpusSplit":
        return cls(tuple(obj["train_ids"]), tuple(obj["test_ids"]), int(obj["seed"]))

    def partition(self, docs):
        by_id = {d.doc_id: d for d in docs}
        missing = [i for i in self.train + self.test if i not in by_id]
        if missing:
            raise ValidationError(f"split references {len(missing)} unknown doc ids "
                                  f"(first: {missing[0]!r})")
        return [by_id[i] for i in self.train], [by_id[i] for i in self.test]


def split(docs, ratio: float = 0.8, seed: int = 0) -> CorpusSplit:
    """Seeded shuffle followed by a prefix split."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = [d.doc_id if hasattr(d, "doc_id") else d for d in docs]
    if not ids:
        raise ValidationError("cannot split an empty corpus")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate doc ids in corpus")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    shuffled = [ids[i] for i in perm]
    return CorpusSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:]), seed)


def apply_scheme(docs, scheme: str = "full") -> list:
    """Return documents whose doc-level labels follow ``scheme``."""
    if scheme == "full":
        return list(docs)
    if scheme != "simplified":
        raise ValidationError(f"unknown label scheme {scheme!r}")
    out = []
    for d in docs:
        out.append(AnnotatedDocument(d.doc_id, d.text, d.spans,
                                     {k: simplify_label(v) for k, v in d.doc_labels.items()},
                                     d.meta))
    return out


def label_distribution(docs, ontology: Ontology) -> dict:
    """Document label counts per characteristic, as in a label-count table.

    Returns ``{char_id: {"cases": n, "any": (count, pct),
    label_name: (count, pct), ...}}`` with percentages of cases.
    """
    docs = list(docs)
    table = {}
    for ch in ontology:
        counts = Counter(d.label(ch.id) for d in docs)
        cases = len(docs)
        row = {"cases": cases}
        pct = (lambda c: 100.0 * c / cases) if cases else (lambda c: 0.0)
        any_count = cases - counts.get(SeverityLabel.NO_LABEL, 0)
        row["any"] = (any_count, pct(any_count))
        for lab in SeverityLabel:
            if lab == SeverityLabel.NO_LABEL:
                continue
            row[lab.value] = (counts.get(lab, 0), pct(counts.get(lab, 0)))
        table[ch.id] = row
    return table


@dataclass
class SpanClassStats:
    count: int
    mean_len: float | None
    sd: float | None
    bd: float | None


def kl_distinctiveness(counts: Counter, background: Counter, vocab) -> float:
    """KL(class || background) in nats, both add-one smoothed over ``vocab``."""
    v = len(vocab)
    n_c = sum(counts.values())
    n_b = sum(background.values())
    total = 0.0
    for w in vocab:
        p = (counts.get(w, 0) + 1) / (n_c + v)
        q = (background.get(w, 0) + 1) / (n_b + v)
        total += p * math.log(p / q)
    return total


def span_stats(docs, ontology: Ontology, tokenizer=tokenize) -> dict:
    """Span count, mean token length, span and boundary distinctiveness.

    Keys are ``(char_id, severity)`` where severity is a label name or
    ``"Overall"``.  Classes without spans are omitted.
    """
    background = Counter()
    collected = defaultdict(lambda: {"lens": [], "inner": Counter(), "edge": Counter()})
    for doc in docs:
        toks = tokenizer(doc.text, doc.doc_id)
        background.update(toks.norms)
        for s in doc.spans:
            i, j = toks.token_range(s.start, s.end)
            if j <= i:
                continue
            norms = toks.norms[i:j]
            edges = [norms[0]] if j - i == 1 else [norms[0], norms[-1]]
            for key in ((s.characteristic_id, s.label.value), (s.characteristic_id, "Overall")):
                c = collected[key]
                c["lens"].append(j - i)
                c["inner"].update(norms)
                c["edge"].update(edges)
    vocab = sorted(background)
    out = {}
    for ch in ontology:
        for sev in ["Overall"] + [lab.value for lab in ch.ordered_labels
                                  if lab != SeverityLabel.NO_LABEL]:
            c = collected.get((ch.id, sev))
            if not c or not c["lens"]:
                continue
            out[(ch.id, sev)] = SpanClassStats(
                count=len(c["lens"]),
                mean_len=float(np.mean(c["lens"])),
                sd=kl_distinctiveness(c["inner"], background, vocab),
                bd=kl_distinctiveness(c["edge"], background, vocab),
            )
    return out


def stats_csv(stats: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["characteristic", "severity", "count", "mean_len", "sd", "bd"])
    for (cid, sev), s in stats.items():
        w.writerow([cid, sev, s.count, f"{s.mean_len:.4f}", f"{s.sd:.4f}", f"{s.bd:.4f}"])
    return buf.getvalue()


def distribution_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labels = [lab.value for lab in SeverityLabel if lab != SeverityLabel.NO_LABEL]
    w.writerow(["characteristic", "cases", "any"] + labels)
    for cid, row in table.items():
        cells = [f"{row['any'][0]} ({row['any'][1]:.1f}%)"]
        cells += [f"{row[lab][0]} ({row[lab][1]:.1f}%)" for lab in labels]
        w.writerow([cid, row["cases"]] + cells)
    return buf.getvalue()
