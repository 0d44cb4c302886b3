"""Synthetic echocardiogram-style reports with gold span annotations.

Phrases come from a template data file whose wording follows the
labelling instructions: severity synonyms, LVEF bands per grade and
pericardial effusion diameter bands in millimetres.  Each template is
emitted verbatim as one gold span.
"""
from __future__ import annotations

import json
import re
from importlib import resources

import numpy as np

from .corpus import SpanAnnotation, make_document
from .errors import ValidationError
from .ontology import Ontology, SeverityLabel

_SLOT = re.compile(r"\{([A-Za-z_]+)\}")


def load_templates(path=None) -> dict:
    if path is None:
        text = resources.files("echolab.data").joinpath("templates.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def load_profile(source=None) -> dict:
    """Label shares per characteristic.

    ``source`` may be None (bundled shares), ``"uniform"`` (equal share
    for every admissible label, NoLabel included), a path, or a dict.
    """
    if isinstance(source, dict):
        raw = source
    elif source is None:
        raw = json.loads(resources.files("echolab.data")
                         .joinpath("profile_default.json").read_text("utf-8"))
    elif source == "uniform":
        return "uniform"
    else:
        with open(source, encoding="utf-8") as fh:
            raw = json.load(fh)
    return {k: v for k, v in raw.items() if not k.startswith("_")}


def _label_table(ontology: Ontology, profile) -> dict:
    table = {}
    if profile == "uniform":
        for ch in ontology:
            labs = list(ch.ordered_labels)
            table[ch.id] = (labs, np.full(len(labs), 1.0 / len(labs)))
        return table
    for cid in profile:
        if cid not in ontology:
            raise ValidationError(f"profile references unknown characteristic {cid!r}")
    for ch in ontology:
        shares = profile.get(ch.id, {})
        labs = [SeverityLabel.NO_LABEL]
        probs = [0.0]
        for name, p in shares.items():
            lab = SeverityLabel.parse(name)
            if lab == SeverityLabel.NO_LABEL:
                continue
            if not ch.admits(lab):
                raise ValidationError(f"profile label {lab} inadmissible for {ch.id}")
            labs.append(lab)
            probs.append(float(p))
        rest = 1.0 - sum(probs[1:])
        if rest < -1e-9:
            raise ValidationError(f"profile shares for {ch.id} exceed 1")
        probs[0] = max(rest, 0.0)
        probs = np.asarray(probs)
        table[ch.id] = (labs, probs / probs.sum())
    return table


def _fill(template: str, slots: dict, rng) -> tuple:
    values = {}

    def sub(m):
        name = m.group(1)
        spec = slots[name]
        if isinstance(spec, dict):
            lo, hi = spec["int"]
            val = str(int(rng.integers(lo, hi + 1)))
        else:
            val = spec[int(rng.integers(len(spec)))]
        values[name] = val
        return val

    return _SLOT.sub(sub, template), values


def _capitalize(text: str) -> str:
    return text[:1].upper() + text[1:]


def generate_synthetic(ontology: Ontology, n_docs: int, seed: int, profile=None,
                       templates=None, emission_log=None, max_distractors: int = 2,
                       conclusion_rate: float = 0.1) -> list:
    """Generate ``n_docs`` annotated reports, deterministic given ``seed``.

    Every report mentions 1-11 characteristics whose labels are drawn
    independently from ``profile`` (redrawn if all come up NoLabel).
    If ``emission_log`` is a list, one record per emitted phrase is
    appended to it.
    """
    if n_docs <= 0:
        raise ValidationError("n_docs must be positive")
    templates = templates or load_templates()
    table = _label_table(ontology, load_profile(profile))
    slots = templates["slots"]
    phrases = templates["characteristics"]
    for cid, (labs, probs) in table.items():
        for lab, p in zip(labs, probs):
            if lab != SeverityLabel.NO_LABEL and p > 0 and not phrases.get(cid, {}).get(lab.value):
                raise ValidationError(f"no template for {cid}/{lab}")
    rng = np.random.default_rng(seed)
    width = len(str(n_docs))
    docs = []
    for k in range(n_docs):
        doc_id = f"synth-{seed}-{k:0{width}d}"
        while True:
            chosen = []
            for ch in ontology:
                labs, probs = table[ch.id]
                lab = labs[int(rng.choice(len(labs), p=probs))]
                if lab != SeverityLabel.NO_LABEL:
                    chosen.append((ch.id, lab))
            if chosen:
                break
        order = rng.permutation(len(chosen))
        mentions = []
        for idx in order:
            cid, lab = chosen[idx]
            opts = phrases[cid][lab.value]
            tpl = opts[int(rng.integers(len(opts)))]
            text, values = _fill(tpl, slots, rng)
            mentions.append((cid, lab, text, tpl, values))

        # sentences of 1-3 mentions, interleaved with unannotated distractors
        sentences = []
        i = 0
        while i < len(mentions):
            size = int(rng.integers(1, 4))
            sentences.append(("mentions", mentions[i:i + size]))
            i += size
        n_distract = int(rng.integers(0, max_distractors + 1))
        for _ in range(n_distract):
            d = templates["distractors"][int(rng.integers(len(templates["distractors"])))]
            sentences.insert(int(rng.integers(len(sentences) + 1)), ("plain", d))
        if rng.random() < 0.5:
            h = templates["headers"][int(rng.integers(len(templates["headers"])))]
            sentences.insert(0, ("plain", h))
        if rng.random() < conclusion_rate:
            cid, lab, _, _, _ = mentions[int(rng.integers(len(mentions)))]
            opts = phrases[cid][lab.value]
            tpl = opts[int(rng.integers(len(opts)))]
            text, values = _fill(tpl, slots, rng)
            sentences.append(("conclusion", [(cid, lab, text, tpl, values)]))

        parts = []
        spans = []
        pos = 0

        def emit(s):
            nonlocal pos
            parts.append(s)
            pos += len(s)

        for si, (kind, body) in enumerate(sentences):
            if si:
                emit(" ")
            if kind == "plain":
                emit(body + ".")
                continue
            if kind == "conclusion":
                emit(templates["conclusion_prefix"] + " ")
            for mi, (cid, lab, text, tpl, values) in enumerate(body):
                if mi:
                    emit(", ")
                if mi == 0 and kind == "mentions":
                    text = _capitalize(text)
                spans.append(SpanAnnotation(pos, pos + len(text), cid, lab))
                if emission_log is not None:
                    emission_log.append({"doc_id": doc_id, "characteristic": cid,
                                         "label": lab.value, "template": tpl,
                                         "values": values, "text": text})
                emit(text)
            emit(".")
        text = "".join(parts)
        if len(text) < 30:
            d = templates["distractors"][int(rng.integers(len(templates["distractors"])))]
            text = text + " " + d + "."
        docs.append(make_document(doc_id, text, spans, ontology, {"source": "synthetic"}))
    return docs


def expand_slot(spec) -> list:
    if isinstance(spec, dict):
        lo, hi = spec["int"]
        return [str(v) for v in range(lo, hi + 1)]
    return list(spec)
