"""Cardiac characteristics, severity labels and the label-scheme reductions."""
from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import DuplicateIdError, ParseError, ValidationError


class SeverityLabel(str, enum.Enum):
    NO_LABEL = "NoLabel"
    NORMAL = "Normal"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"
    PRESENT = "Present"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, text: str) -> "SeverityLabel":
        """Parse a canonical label name; case and spacing are ignored."""
        if isinstance(text, SeverityLabel):
            return text
        key = str(text).replace(" ", "").replace("_", "").lower()
        try:
            return _BY_KEY[key]
        except KeyError:
            raise ValidationError(f"unknown severity label {text!r}") from None


_BY_KEY = {lab.value.lower(): lab for lab in SeverityLabel}

# Graded statements outrank an unspecified "Present".
_RANK = {
    SeverityLabel.NO_LABEL: 0,
    SeverityLabel.NORMAL: 1,
    SeverityLabel.PRESENT: 2,
    SeverityLabel.MILD: 3,
    SeverityLabel.MODERATE: 4,
    SeverityLabel.SEVERE: 5,
}

LABELS_BY_RANK = tuple(sorted(_RANK, key=_RANK.get))

SIMPLIFIED_LABELS = (SeverityLabel.NO_LABEL, SeverityLabel.NORMAL, SeverityLabel.PRESENT)


def severity_rank(label: SeverityLabel) -> int:
    return _RANK[SeverityLabel.parse(label)]


def aggregate_labels(labels: Iterable[SeverityLabel]) -> SeverityLabel:
    """Most severe label of a multiset; NoLabel for an empty one."""
    best = SeverityLabel.NO_LABEL
    for lab in labels:
        lab = SeverityLabel.parse(lab)
        if _RANK[lab] > _RANK[best]:
            best = lab
    return best


def simplify_label(label: SeverityLabel) -> SeverityLabel:
    """Collapse graded severities onto the three-label scheme."""
    label = SeverityLabel.parse(label)
    if label in (SeverityLabel.NO_LABEL, SeverityLabel.NORMAL):
        return label
    return SeverityLabel.PRESENT


@dataclass(frozen=True)
class Characteristic:
    id: str
    display_name: str
    admissible_labels: frozenset

    def __post_init__(self):
        labels = frozenset(SeverityLabel.parse(x) for x in self.admissible_labels)
        missing = {SeverityLabel.NO_LABEL, SeverityLabel.NORMAL} - labels
        if missing:
            raise ValidationError(
                f"characteristic {self.id!r} must admit NoLabel and Normal")
        object.__setattr__(self, "admissible_labels", labels)

    @property
    def ordered_labels(self) -> tuple:
        """Admissible labels in severity order (NoLabel first)."""
        return tuple(lab for lab in LABELS_BY_RANK if lab in self.admissible_labels)

    def admits(self, label) -> bool:
        return SeverityLabel.parse(label) in self.admissible_labels


@dataclass(frozen=True)
class Ontology:
    characteristics: tuple
    version: int = 1

    def __post_init__(self):
        chars = tuple(self.characteristics)
        if not chars:
            raise ValidationError("ontology must define at least one characteristic")
        seen = set()
        for ch in chars:
            if ch.id in seen:
                raise DuplicateIdError(f"duplicate characteristic id {ch.id!r}")
            seen.add(ch.id)
        object.__setattr__(self, "characteristics", chars)
        object.__setattr__(self, "_index", {ch.id: ch for ch in chars})

    def __getitem__(self, char_id: str) -> Characteristic:
        try:
            return self._index[char_id]
        except KeyError:
            raise ValidationError(f"unknown characteristic {char_id!r}") from None

    def __contains__(self, char_id) -> bool:
        return char_id in self._index

    def __iter__(self):
        return iter(self.characteristics)

    def __len__(self):
        return len(self.characteristics)

    @property
    def ids(self) -> list:
        return [ch.id for ch in self.characteristics]


def _parse_labels(raw: str, source, line) -> frozenset:
    out = set()
    for part in raw.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.add(SeverityLabel.parse(part))
        except ValidationError as err:
            raise ParseError(str(err), line=line, source=source) from None
    return frozenset(out)


def load_ontology(source=None) -> Ontology:
    """Load an ontology from INI-style text, a path, or the bundled default.

    Each characteristic is one section with the keys ``id``,
    ``display_name`` and ``labels`` (comma separated canonical names).
    An optional ``[ontology]`` section carries ``version``.
    """
    name = "<string>"
    if source is None:
        text = resources.files("echolab.data").joinpath("ontology.ini").read_text("utf-8")
        name = "ontology.ini"
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                      and Path(source).is_file()):
        name = str(source)
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source

    parser = configparser.ConfigParser(strict=True, interpolation=None)
    try:
        parser.read_string(text, source=name)
    except configparser.DuplicateSectionError as err:
        raise DuplicateIdError(f"{name}:{err.lineno}: duplicate section {err.section!r}") from None
    except configparser.DuplicateOptionError as err:
        raise ParseError(f"duplicate field {err.option!r}", line=err.lineno, source=name) from None
    except configparser.Error as err:
        raise ParseError(str(err).splitlines()[0], line=getattr(err, "lineno", None),
                         source=name) from None

    lines = text.splitlines()

    def section_line(section):
        for i, ln in enumerate(lines, 1):
            if ln.strip() == f"[{section}]":
                return i
        return None

    version = 1
    chars = []
    seen = {}
    for section in parser.sections():
        fields = parser[section]
        line = section_line(section)
        if section == "ontology":
            try:
                version = int(fields.get("version", "1"))
            except ValueError:
                raise ParseError("version must be an integer", line=line, source=name) from None
            continue
        for key in ("id", "display_name", "labels"):
            if key not in fields:
                raise ParseError(f"section [{section}] missing field {key!r}",
                                 line=line, source=name)
        cid = fields["id"].strip()
        if cid in seen:
            raise DuplicateIdError(
                f"{name}:{line}: duplicate characteristic id {cid!r} "
                f"(first defined at line {seen[cid]})")
        seen[cid] = line
        labels = _parse_labels(fields["labels"], name, line)
        try:
            chars.append(Characteristic(cid, fields["display_name"].strip(), labels))
        except ValidationError as err:
            raise ParseError(str(err), line=line, source=name) from None
    return Ontology(tuple(chars), version)


def default_ontology() -> Ontology:
    return load_ontology(None)
