"""Dictionary baseline: token phrase patterns applied greedily to documents.

Rule file format (UTF-8, one rule per line)::

    characteristic_id <TAB> label <TAB> pattern

Pattern elements are whitespace separated; ``(a|b)`` is an alternation,
``*`` matches any single token and a leading ``?`` makes an element
optional.  Matching is on lower-cased token text.
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import SpanAnnotation
from .errors import ParseError, ValidationError
from .ontology import Ontology, SeverityLabel, default_ontology
from .textproc import TokenizedDocument

MAX_WINDOW = 25

WILDCARD = None  # element value meaning "any token"


@dataclass(frozen=True)
class Element:
    options: frozenset | None  # None is the wildcard
    optional: bool = False

    def accepts(self, norm: str) -> bool:
        return self.options is None or norm in self.options

    def __str__(self):
        if self.options is None:
            body = "*"
        elif len(self.options) == 1:
            body = next(iter(self.options))
        else:
            body = "(" + "|".join(sorted(self.options)) + ")"
        return ("?" if self.optional else "") + body


@dataclass(frozen=True)
class RulePattern:
    characteristic_id: str
    label: SeverityLabel
    elements: tuple
    source_line: int = 0

    def __post_init__(self):
        if not self.elements:
            raise ValidationError("empty pattern")
        if all(e.options is None for e in self.elements):
            raise ValidationError("pattern needs at least one non-wildcard element")
        if all(e.optional for e in self.elements):
            raise ValidationError("pattern cannot consist only of optional elements")

    def match_ends(self, norms, pos: int) -> set:
        """End positions ``j`` such that ``norms[pos:j]`` matches the whole pattern."""
        ends = set()
        limit = min(len(norms), pos + MAX_WINDOW)

        def walk(k, i):
            if k == len(self.elements):
                if i > pos:
                    ends.add(i)
                return
            el = self.elements[k]
            if el.optional:
                walk(k + 1, i)
            if i < limit and el.accepts(norms[i]):
                walk(k + 1, i + 1)

        walk(0, pos)
        return ends

    def matches(self, norms) -> bool:
        return len(norms) in self.match_ends(list(norms), 0)

    def first_set(self):
        """Possible first tokens, or None when a wildcard can come first."""
        out = set()
        for el in self.elements:
            if el.options is None:
                return None
            out |= el.options
            if not el.optional:
                break
        return out

    def __str__(self):
        return " ".join(str(e) for e in self.elements)


class RuleSet:
    def __init__(self, patterns, ontology: Ontology):
        self.patterns = tuple(patterns)
        self.ontology = ontology
        for p in self.patterns:
            if not ontology[p.characteristic_id].admits(p.label):
                raise ValidationError(
                    f"label {p.label} inadmissible for {p.characteristic_id}")
        self._by_first = defaultdict(list)
        self._anywhere = []
        for idx, p in enumerate(self.patterns):
            first = p.first_set()
            if first is None:
                self._anywhere.append(idx)
            else:
                for tok in first:
                    self._by_first[tok].append(idx)

    def __len__(self):
        return len(self.patterns)

    def counts(self) -> dict:
        """Number of patterns per characteristic."""
        c = Counter(p.characteristic_id for p in self.patterns)
        return {cid: c.get(cid, 0) for cid in self.ontology.ids}

    def candidates(self, norm: str) -> list:
        idx = self._by_first.get(norm, [])
        if self._anywhere:
            idx = sorted(set(idx) | set(self._anywhere))
        return idx


def _parse_pattern(text: str, source, line) -> tuple:
    elements = []
    for raw in text.split():
        optional = raw.startswith("?")
        body = raw[1:] if optional else raw
        if not body:
            raise ParseError(f"dangling '?' in pattern {text!r}", line=line, source=source)
        if body == "*":
            options = None
        elif body.startswith("(") and body.endswith(")"):
            parts = [p.strip().lower() for p in body[1:-1].split("|")]
            if not all(parts):
                raise ParseError(f"empty alternative in {raw!r}", line=line, source=source)
            options = frozenset(parts)
        elif any(c in body for c in "()|"):
            raise ParseError(f"malformed element {raw!r}", line=line, source=source)
        else:
            options = frozenset([body.lower()])
        elements.append(Element(options, optional))
    return tuple(elements)


def compile_rules(source=None, ontology: Ontology | None = None) -> RuleSet:
    """Parse and validate a rule file (path, text, or the bundled demo rules)."""
    ontology = ontology or default_ontology()
    name = "<string>"
    if source is None:
        text = resources.files("echolab.data").joinpath("rules.tsv").read_text("utf-8")
        name = "rules.tsv"
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                      and "\t" not in source and Path(source).is_file()):
        name = str(source)
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source
    patterns = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise ParseError("expected 3 tab-separated fields "
                             "(characteristic, label, pattern)", line=lineno, source=name)
        cid, lab, pat = (p.strip() for p in parts)
        if cid not in ontology:
            raise ParseError(f"unknown characteristic {cid!r}", line=lineno, source=name)
        try:
            label = SeverityLabel.parse(lab)
        except ValidationError as err:
            raise ParseError(str(err), line=lineno, source=name) from None
        if label == SeverityLabel.NO_LABEL:
            raise ParseError("rules cannot emit NoLabel", line=lineno, source=name)
        if not ontology[cid].admits(label):
            raise ParseError(f"label {label} inadmissible for {cid}", line=lineno, source=name)
        if not pat:
            raise ParseError("empty pattern", line=lineno, source=name)
        elements = _parse_pattern(pat, name, lineno)
        try:
            patterns.append(RulePattern(cid, label, elements, lineno))
        except ValidationError as err:
            raise ParseError(str(err), line=lineno, source=name) from None
    return RuleSet(patterns, ontology)


def find_matches(doc: TokenizedDocument, rules: RuleSet) -> list:
    """All ``(start_tok, end_tok, pattern_index)`` winners before overlap resolution.

    For each token window and characteristic the first matching pattern
    in rule order decides the label.
    """
    norms = doc.norms
    winners = {}
    for i, norm in enumerate(norms):
        for idx in rules.candidates(norm):
            pat = rules.patterns[idx]
            for j in pat.match_ends(norms, i):
                key = (pat.characteristic_id, i, j)
                if key not in winners or idx < winners[key]:
                    winners[key] = idx
    return [(i, j, idx) for (cid, i, j), idx in winners.items()]


def match_document(doc: TokenizedDocument, rules: RuleSet) -> list:
    """Greedy dictionary lookup returning non-overlapping spans per characteristic.

    Overlapping matches of one characteristic keep the longest window;
    ties go to the earlier pattern, then the earlier start.
    """
    by_char = defaultdict(list)
    for i, j, idx in find_matches(doc, rules):
        by_char[rules.patterns[idx].characteristic_id].append((i, j, idx))
    out = []
    for cid in sorted(by_char):
        cands = sorted(by_char[cid], key=lambda c: (-(c[1] - c[0]), c[2], c[0]))
        taken = []
        for i, j, idx in cands:
            if any(i < b and a < j for a, b in taken):
                continue
            taken.append((i, j))
            start, end = doc.char_span(i, j)
            out.append(SpanAnnotation(start, end, cid, rules.patterns[idx].label))
    out.sort(key=lambda s: (s.start, s.end, s.characteristic_id))
    return out


def classify_range(doc: TokenizedDocument, rules: RuleSet, char_id: str, i: int, j: int):
    """Label the exact token window ``[i, j)`` for one characteristic, or NoLabel."""
    norms = doc.norms
    for pat in rules.patterns:
        if pat.characteristic_id == char_id and j in pat.match_ends(norms, i):
            return pat.label
    return SeverityLabel.NO_LABEL


def winning_pattern(doc: TokenizedDocument, rules: RuleSet, char_id: str, i: int, j: int):
    norms = doc.norms
    for pat in rules.patterns:
        if pat.characteristic_id == char_id and j in pat.match_ends(norms, i):
            return pat
    return None
