"""Consultation environment: knowledge state, disclosure, answers, legality.

The environment wraps one patient record per episode. It discloses part of
the record up front, answers questions truthfully (optionally with response
noise), and enforces which questions may be asked. States are immutable;
``step`` returns a new state, so an episode can be replayed or branched.

Status codes match the dataset's ternary HPI coding: 0 unknown, 1 confirmed,
2 denied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DigestMismatch, DomainError, IllegalAction, ValidationError
from .ontology import FIRST, HpiOntology
from .patientgen import CONFIRMED, DENIED, NOT_MENTIONED, PatientRecord

UNKNOWN = NOT_MENTIONED

UNMENTIONED_DENIED = "denied"
UNMENTIONED_UNKNOWN = "unknown"


@dataclass(frozen=True)
class DisclosureProbs:
    """Chance that the patient volunteers a finding before being asked.

    First-level positives/negatives disclose independently; a second-level
    positive can disclose only when its parent did, while second-level
    negatives are not gated.
    """

    p1p: float = 0.5
    p1n: float = 0.1
    p2p: float = 0.3
    p2n: float = 0.05

    def validate(self) -> None:
        for name in ("p1p", "p1n", "p2p", "p2n"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class StepFindings:
    """Counts of newly revealed elements this round, by level and sign.

    Children denied by propagation from a denied parent are excluded, so a
    broad first-level question cannot farm second-level findings.
    """

    f1p: int = 0
    f1n: int = 0
    f2p: int = 0
    f2n: int = 0


@dataclass(frozen=True)
class EnvState:
    status: np.ndarray  # int8, length M; read-only by convention
    asked: frozenset[int]
    t: int
    patient_id: str
    horizon: int

    def __post_init__(self) -> None:
        self.status.setflags(write=False)


def _as_rng(rng: np.random.Generator | int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_patient(patient: PatientRecord, ontology: HpiOntology) -> None:
    if len(patient.hpi) != ontology.n_elements:
        raise DigestMismatch(
            f"patient has {len(patient.hpi)} elements, ontology {ontology.n_elements}"
        )
    for e in range(ontology.n_elements):
        parent = ontology.parent_of(e)
        if parent is not None and patient.hpi[e] == CONFIRMED and patient.hpi[parent] != CONFIRMED:
            raise ValidationError(f"patient {patient.id}: element {e} confirmed under non-confirmed parent")


def reset(
    patient: PatientRecord,
    ontology: HpiOntology,
    probs: DisclosureProbs,
    rng: np.random.Generator | int,
    horizon: int = 10,
) -> EnvState:
    """Start an episode: probabilistic initial disclosure of mentioned elements.

    One uniform is consumed per element (indexed by element id), so the
    outcome does not depend on iteration order. Not-mentioned elements never
    disclose.
    """
    probs.validate()
    _check_patient(patient, ontology)
    if horizon < 0:
        raise ConfigError("horizon must be non-negative")
    rng = _as_rng(rng)
    m = ontology.n_elements
    u = rng.random(m)
    status = np.zeros(m, dtype=np.int8)
    p = patient.hpi
    for f in ontology.first_level_ids():
        if p[f] == CONFIRMED and u[f] < probs.p1p:
            status[f] = CONFIRMED
        elif p[f] == DENIED and u[f] < probs.p1n:
            status[f] = DENIED
    for e in range(m):
        parent = ontology.parent_of(e)
        if parent is None:
            continue
        if p[e] == CONFIRMED and status[parent] != UNKNOWN and u[e] < probs.p2p:
            status[e] = CONFIRMED
        elif p[e] == DENIED and u[e] < probs.p2n:
            status[e] = DENIED
    return EnvState(status, frozenset(), 0, patient.id, horizon)


def legal_actions(state: EnvState, ontology: HpiOntology) -> np.ndarray:
    """Boolean mask over questions: unasked, parents confirmed, something new.

    A question is legal iff it was not asked, every second-level target has a
    Confirmed parent, and at least one target is still Unknown.
    """
    mask = np.zeros(ontology.n_questions, dtype=bool)
    status = state.status
    for q in ontology.questions:
        if q.id in state.asked:
            continue
        ok = True
        any_unknown = False
        for t in q.targets:
            parent = ontology.parent_of(t)
            if parent is not None and status[parent] != CONFIRMED:
                ok = False
                break
            if status[t] == UNKNOWN:
                any_unknown = True
        mask[q.id] = ok and any_unknown
    return mask


def step(
    state: EnvState,
    question_id: int,
    patient: PatientRecord,
    ontology: HpiOntology,
    noise: float = 0.0,
    rng: np.random.Generator | int | None = None,
    unmentioned_answer: str = UNMENTIONED_DENIED,
) -> tuple[EnvState, StepFindings]:
    """Ask one question; returns the next state and the per-level counts.

    Unknown targets resolve to the patient's truth (not-mentioned answers as
    Denied in the default mode, or stays Unknown in "unknown" mode); each
    revealed status then flips sign with probability ``noise``. A first-level
    target that resolves Denied drags its Unknown children to Denied without
    crediting them in the findings.
    """
    if unmentioned_answer not in (UNMENTIONED_DENIED, UNMENTIONED_UNKNOWN):
        raise ConfigError(f"unknown unmentioned-answer mode {unmentioned_answer!r}")
    if not 0.0 <= noise <= 1.0:
        raise DomainError("noise must lie in [0, 1]")
    if noise > 0.0 and rng is None:
        raise ConfigError("response noise needs an RNG")
    if state.t >= state.horizon:
        raise IllegalAction(f"episode horizon {state.horizon} reached")
    if not 0 <= question_id < ontology.n_questions:
        raise IllegalAction(f"question id {question_id} out of range")
    if patient.id != state.patient_id:
        raise IllegalAction(f"state belongs to patient {state.patient_id!r}, got {patient.id!r}")
    if question_id in state.asked:
        raise IllegalAction(f"question {question_id} was already asked")
    question = ontology.questions[question_id]
    for t in question.targets:
        parent = ontology.parent_of(t)
        if parent is not None and state.status[parent] != CONFIRMED:
            raise IllegalAction(f"question {question_id}: target {t} has unconfirmed parent")
    if all(state.status[t] != UNKNOWN for t in question.targets):
        raise IllegalAction(f"question {question_id} has no unknown targets left")

    rng = _as_rng(rng) if rng is not None else None
    status = state.status.copy()
    counts = {FIRST: [0, 0], 2: [0, 0]}  # level -> [positives, negatives]
    for t in sorted(question.targets):
        if status[t] != UNKNOWN:
            continue
        truth = patient.hpi[t]
        if truth == CONFIRMED:
            revealed = CONFIRMED
        elif truth == DENIED or unmentioned_answer == UNMENTIONED_DENIED:
            revealed = DENIED
        else:
            continue  # unknown mode: the patient cannot answer, slot stays open
        if noise > 0.0 and rng.random() < noise:
            revealed = DENIED if revealed == CONFIRMED else CONFIRMED
        status[t] = revealed
        level = ontology.elements[t].level
        counts[level][0 if revealed == CONFIRMED else 1] += 1
        if level == FIRST and revealed == DENIED:
            for child in ontology.children_of(t):
                if status[child] == UNKNOWN:
                    status[child] = DENIED
    findings = StepFindings(counts[1][0], counts[1][1], counts[2][0], counts[2][1])
    next_state = EnvState(
        status, state.asked | {question_id}, state.t + 1, state.patient_id, state.horizon
    )
    return next_state, findings


def observed_ternary(state: EnvState) -> np.ndarray:
    """The diagnosis-model view of the dialogue so far (copy, writable)."""
    return state.status.copy()


def encode_state(state: EnvState) -> np.ndarray:
    """Triple one-hot of the status vector, length 3M."""
    from .diagnosis import encode_hpi_ternary

    return encode_hpi_ternary(state.status)
