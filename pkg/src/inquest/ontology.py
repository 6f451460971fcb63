"""Two-level HPI element hierarchy and the question catalog built on top of it.

The ontology fixes both the state space (one ternary slot per element) and the
action space (one action per question). Values are immutable after load and are
safe to share across workers.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError

FIRST = 1
SECOND = 2

CLOSED = "closed"
OPEN = "open"

HPI_FILENAME = "hpi.csv"
QUESTIONS_FILENAME = "questions.csv"


@dataclass(frozen=True)
class HpiElement:
    """One finding in the two-level hierarchy.

    Ids are dense integers and are the canonical identity; names are
    display-only. ``parent`` is set iff ``level == SECOND``.
    """

    id: int
    level: int
    parent: int | None
    name: str


@dataclass(frozen=True)
class Question:
    """One catalog question. Closed questions probe a single element; open
    questions probe several sibling second-level elements at once."""

    id: int
    kind: str
    targets: tuple[int, ...]  # sorted, deduplicated


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings


@dataclass(frozen=True)
class HpiOntology:
    """Immutable element hierarchy plus question catalog."""

    elements: tuple[HpiElement, ...]
    questions: tuple[Question, ...]
    m1: int = field(init=False, default=0)
    m2: int = field(init=False, default=0)
    content_digest: str = field(init=False, default="")

    def __post_init__(self) -> None:
        m1 = sum(1 for e in self.elements if e.level == FIRST)
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "m2", len(self.elements) - m1)
        object.__setattr__(self, "content_digest", _digest(self.elements, self.questions))

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    def parent_of(self, element_id: int) -> int | None:
        return self.elements[element_id].parent

    def children_of(self, element_id: int) -> tuple[int, ...]:
        return self._children_map().get(element_id, ())

    def first_level_ids(self) -> tuple[int, ...]:
        return tuple(e.id for e in self.elements if e.level == FIRST)

    def _children_map(self) -> dict[int, tuple[int, ...]]:
        cached = getattr(self, "_children_cache", None)
        if cached is None:
            out: dict[int, list[int]] = {}
            for e in self.elements:
                if e.level == SECOND and e.parent is not None:
                    out.setdefault(e.parent, []).append(e.id)
            cached = {k: tuple(sorted(v)) for k, v in out.items()}
            object.__setattr__(self, "_children_cache", cached)
        return cached


def _digest(elements, questions) -> str:
    canon = {
        "elements": [[e.id, e.level, e.parent, e.name] for e in sorted(elements, key=lambda e: e.id)],
        "questions": [[q.id, q.kind, list(q.targets)] for q in sorted(questions, key=lambda q: q.id)],
    }
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def validate(ontology: HpiOntology) -> ValidationReport:
    """Check every structural invariant; findings are data, not failures."""
    findings: list[str] = []
    elements, questions = ontology.elements, ontology.questions

    ids = [e.id for e in elements]
    if not elements:
        findings.append("ontology has no elements")
    if sorted(ids) != list(range(len(elements))):
        findings.append("element ids are not dense and unique")
        return ValidationReport(tuple(findings))  # id-indexed checks below would misfire

    by_id = {e.id: e for e in elements}
    if not any(e.level == FIRST for e in elements):
        findings.append("at least one first-level element is required")
    for e in elements:
        if e.level not in (FIRST, SECOND):
            findings.append(f"element {e.id}: level must be 1 or 2")
        if e.level == FIRST and e.parent is not None:
            findings.append(f"element {e.id}: first-level element must not have a parent")
        if e.level == SECOND:
            if e.parent is None or e.parent not in by_id:
                findings.append(f"element {e.id}: missing parent")
            elif by_id[e.parent].level != FIRST:
                findings.append(f"element {e.id}: parent {e.parent} is not first-level")

    qids = [q.id for q in questions]
    if sorted(qids) != list(range(len(questions))):
        findings.append("question ids are not dense and unique")

    targeted: set[int] = set()
    for q in questions:
        bad_target = [t for t in q.targets if t not in by_id]
        if bad_target:
            findings.append(f"question {q.id}: unknown target element {bad_target[0]}")
            continue
        targeted.update(q.targets)
        if q.kind == CLOSED:
            if len(q.targets) != 1:
                findings.append(f"question {q.id}: closed question must target exactly one element")
        elif q.kind == OPEN:
            if len(q.targets) < 2:
                findings.append(f"question {q.id}: open question must target at least two elements")
            elif any(by_id[t].level != SECOND for t in q.targets):
                findings.append(f"question {q.id}: open-question targets must be second-level")
            elif len({by_id[t].parent for t in q.targets}) > 1:
                findings.append(f"question {q.id}: open-question targets must share parent")
        else:
            findings.append(f"question {q.id}: kind must be closed or open")

    for e in elements:
        if e.id not in targeted:
            findings.append(f"element {e.id}: unreachable element (targeted by no question)")

    return ValidationReport(tuple(findings))


def question_targets(ontology: HpiOntology, question_id: int) -> set[int]:
    """Target element ids of one question; size 1 for closed questions."""
    if not 0 <= question_id < ontology.n_questions:
        raise IndexError(f"question id {question_id} out of range 0..{ontology.n_questions - 1}")
    return set(ontology.questions[question_id].targets)


def _parse_int(text: str, what: str, row: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"row {row}: {what} is not an integer: {text!r}") from None


def load_ontology(path: str | Path) -> HpiOntology:
    """Load and validate an ontology from ``hpi.csv`` + ``questions.csv`` in ``path``.

    Deterministic for identical file bytes; raises ParseError for malformed
    rows and ValidationError (naming the offending id) for invariant
    violations.
    """
    root = Path(path)
    elements = _read_elements(root / HPI_FILENAME)
    questions = _read_questions(root / QUESTIONS_FILENAME)
    ontology = HpiOntology(tuple(elements), tuple(questions))
    report = validate(ontology)
    if not report.ok:
        raise ValidationError(report.findings[0])
    return ontology


def _read_elements(path: Path) -> list[HpiElement]:
    elements = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "level", "parent_id", "name"]:
            raise ParseError(f"{path.name}: expected header id,level,parent_id,name")
        for i, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path.name} row {i}: expected 4 columns, got {len(row)}")
            eid = _parse_int(row[0], "id", i)
            level = _parse_int(row[1], "level", i)
            parent = None if row[2] == "" else _parse_int(row[2], "parent_id", i)
            elements.append(HpiElement(eid, level, parent, row[3]))
    return elements


def _read_questions(path: Path) -> list[Question]:
    questions = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "kind", "target_ids"]:
            raise ParseError(f"{path.name}: expected header id,kind,target_ids")
        for i, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path.name} row {i}: expected 3 columns, got {len(row)}")
            qid = _parse_int(row[0], "id", i)
            raw = [t for t in row[2].split(";") if t != ""]
            if not raw:
                raise ParseError(f"{path.name} row {i}: empty target list")
            targets = tuple(sorted({_parse_int(t, "target id", i) for t in raw}))
            questions.append(Question(qid, row[1], targets))
    return questions


def save_ontology(ontology: HpiOntology, path: str | Path) -> None:
    """Write the two CSV files; a round trip preserves the content digest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / HPI_FILENAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "level", "parent_id", "name"])
        for e in sorted(ontology.elements, key=lambda e: e.id):
            writer.writerow([e.id, e.level, "" if e.parent is None else e.parent, e.name])
    with open(root / QUESTIONS_FILENAME, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "kind", "target_ids"])
        for q in sorted(ontology.questions, key=lambda q: q.id):
            writer.writerow([q.id, q.kind, ";".join(str(t) for t in q.targets)])
