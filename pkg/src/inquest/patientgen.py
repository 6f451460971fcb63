"""Simulated-patient data: generative model, cohort sampling, exact posterior.

A cohort is a set of records (history features, ternary HPI vector, disease
label). Records are sampled disease-first from per-disease Bernoulli incidence
tables (naive-Bayes structure), which keeps the exact posterior enumerable so
it can serve as a test oracle for the learned diagnosis model.

HPI coding throughout: 0 = not mentioned / unknown, 1 = confirmed, 2 = denied.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DigestMismatch,
    EmptyDataset,
    InconsistentEvidence,
    ParseError,
    ValidationError,
)
from .ontology import FIRST, SECOND, CLOSED, OPEN, HpiElement, HpiOntology, Question
from .ontology import validate as validate_ontology

NOT_MENTIONED = 0
CONFIRMED = 1
DENIED = 2

SEXES = ("male", "female")

AGE_MIN = 0.0
AGE_MAX = 100.0

# Disjoint RNG stream tags; record streams use plain (seed, index), so tags
# sit far above any realistic record count.
_TAG_SPLIT = 1 << 40
_TAG_GENMODEL = (1 << 40) + 1


@dataclass(eq=False)
class PatientRecord:
    """One simulated patient: structured history plus ternary HPI and label."""

    id: str
    age: int
    sex: str
    prior_flags: tuple[int, ...]
    hpi: np.ndarray  # int8, length M
    label: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.age == other.age
            and self.sex == other.sex
            and self.prior_flags == other.prior_flags
            and np.array_equal(self.hpi, other.hpi)
            and self.label == other.label
        )


@dataclass(eq=False)
class PatientDataset:
    records: list[PatientRecord]
    disease_names: tuple[str, ...]
    m: int
    ontology_digest: str
    genmodel_digest: str | None = None

    @property
    def n_diseases(self) -> int:
        return len(self.disease_names)

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatientDataset):
            return NotImplemented
        return (
            self.records == other.records
            and self.disease_names == other.disease_names
            and self.m == other.m
            and self.ontology_digest == other.ontology_digest
            and self.genmodel_digest == other.genmodel_digest
        )


@dataclass
class GenerativeModel:
    """Disease -> HPI incidence tables plus per-disease demographics.

    ``first_level_cpt[d, e]`` is the incidence probability of first-level
    element ``e`` under disease ``d`` (zero at second-level slots).
    ``second_level_cpt[d, e]`` is the incidence of second-level element ``e``
    conditional on its parent being present (zero at first-level slots, and
    required to be zero wherever the parent's incidence is zero).
    ``parent[e]`` is the element's parent id, -1 for first-level elements.
    """

    ontology_digest: str
    disease_names: tuple[str, ...]
    parent: np.ndarray  # int64, length M; -1 for first-level
    priors: np.ndarray  # float64 (D,)
    first_level_cpt: np.ndarray  # float64 (D, M)
    second_level_cpt: np.ndarray  # float64 (D, M)
    age_mean: np.ndarray  # float64 (D,)
    age_std: np.ndarray  # float64 (D,)
    p_female: np.ndarray  # float64 (D,)
    flag_probs: np.ndarray  # float64 (D, F)
    mention_prob: float = 0.3

    @property
    def n_diseases(self) -> int:
        return len(self.disease_names)

    @property
    def n_elements(self) -> int:
        return len(self.parent)

    @property
    def n_flags(self) -> int:
        return self.flag_probs.shape[1]

    def first_level_ids(self) -> np.ndarray:
        return np.flatnonzero(self.parent < 0)

    def children_of(self, element_id: int) -> np.ndarray:
        return np.flatnonzero(self.parent == element_id)

    def digest(self) -> str:
        canon = {
            "ontology_digest": self.ontology_digest,
            "disease_names": list(self.disease_names),
            "parent": self.parent.tolist(),
            "priors": self.priors.tolist(),
            "first_level_cpt": self.first_level_cpt.tolist(),
            "second_level_cpt": self.second_level_cpt.tolist(),
            "age_mean": self.age_mean.tolist(),
            "age_std": self.age_std.tolist(),
            "p_female": self.p_female.tolist(),
            "flag_probs": self.flag_probs.tolist(),
            "mention_prob": self.mention_prob,
        }
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def validate_genmodel(gm: GenerativeModel) -> None:
    """Raise ConfigError on any violated model invariant."""
    d, m = gm.n_diseases, gm.n_elements
    if gm.priors.shape != (d,):
        raise ConfigError("priors shape does not match disease count")
    if abs(float(gm.priors.sum()) - 1.0) > 1e-9:
        raise ConfigError("priors must sum to 1")
    for name, arr in (("priors", gm.priors), ("first_level_cpt", gm.first_level_cpt),
                      ("second_level_cpt", gm.second_level_cpt), ("p_female", gm.p_female),
                      ("flag_probs", gm.flag_probs)):
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ConfigError(f"{name} contains probabilities outside [0, 1]")
    if gm.first_level_cpt.shape != (d, m) or gm.second_level_cpt.shape != (d, m):
        raise ConfigError("incidence tables must have shape (diseases, elements)")
    if not 0.0 <= gm.mention_prob <= 1.0:
        raise ConfigError("mention_prob must lie in [0, 1]")
    first = gm.parent < 0
    if not first.any():
        raise ConfigError("model has no first-level elements")
    if np.any(gm.first_level_cpt[:, ~first] != 0.0):
        raise ConfigError("first_level_cpt must be zero at second-level slots")
    if np.any(gm.second_level_cpt[:, first] != 0.0):
        raise ConfigError("second_level_cpt must be zero at first-level slots")
    second_ids = np.flatnonzero(~first)
    parent_inc = gm.first_level_cpt[:, gm.parent[second_ids]]
    orphaned = (parent_inc == 0.0) & (gm.second_level_cpt[:, second_ids] != 0.0)
    if np.any(orphaned):
        d_bad, j_bad = np.argwhere(orphaned)[0]
        raise ConfigError(
            f"second_level_cpt[{d_bad}, {second_ids[j_bad]}] set although parent incidence is zero"
        )


# ---------------------------------------------------------------------------
# Synthetic ontology generation
# ---------------------------------------------------------------------------

def generate_ontology(m1: int, m2: int, n_open: int = 0, n_closed: int | None = None) -> HpiOntology:
    """Build a synthetic two-level ontology with full question coverage.

    First-level elements get ids 0..m1-1; second-level children are assigned
    round-robin to parents. Closed questions cover every element (extras wrap
    around); open questions probe sibling groups of 2-4 children.
    """
    if m1 < 1:
        raise ConfigError("need at least one first-level element")
    m = m1 + m2
    if n_closed is None:
        n_closed = m
    if n_closed < m:
        raise ConfigError("closed question count below element count leaves elements unreachable")

    elements = [HpiElement(i, FIRST, None, f"finding_{i:03d}") for i in range(m1)]
    for j in range(m2):
        parent = j % m1
        elements.append(
            HpiElement(m1 + j, SECOND, parent, f"finding_{parent:03d}/detail_{j // m1:02d}")
        )

    questions = [Question(q, CLOSED, (q % m,)) for q in range(n_closed)]
    if n_open > 0:
        hosts = [e.id for e in elements[:m1] if sum(1 for j in range(m2) if j % m1 == e.id) >= 2]
        if not hosts:
            raise ConfigError("open questions need a parent with at least two children")
        ontology_tmp = HpiOntology(tuple(elements), ())
        for k in range(n_open):
            parent = hosts[k % len(hosts)]
            siblings = ontology_tmp.children_of(parent)
            size = min(len(siblings), 2 + k % 3)
            questions.append(Question(n_closed + k, OPEN, tuple(siblings[:size])))

    ontology = HpiOntology(tuple(elements), tuple(questions))
    report = validate_ontology(ontology)
    if not report.ok:
        raise ValidationError(report.findings[0])
    return ontology


# ---------------------------------------------------------------------------
# Reference models: small fixed toy and the seeded desk benchmark
# ---------------------------------------------------------------------------

def toy_ontology() -> HpiOntology:
    """7 elements (3 first-level), 8 questions; small enough for brute force."""
    return generate_ontology(m1=3, m2=4, n_open=1)


def toy_genmodel(ontology: HpiOntology | None = None) -> GenerativeModel:
    """Fixed 3-disease model with strong per-disease marker elements.

    Demographics are identical across diseases, so the HPI-only posterior is
    the full Bayes-optimal classifier for this model.
    """
    onto = ontology if ontology is not None else toy_ontology()
    m = onto.n_elements
    parent = np.array([-1 if onto.parent_of(e) is None else onto.parent_of(e) for e in range(m)])
    d = 3
    cpt1 = np.zeros((d, m))
    cpt1[:, 0] = (0.92, 0.06, 0.10)
    cpt1[:, 1] = (0.08, 0.90, 0.07)
    cpt1[:, 2] = (0.06, 0.10, 0.88)
    cpt2 = np.zeros((d, m))
    cpt2[:, 3] = (0.85, 0.15, 0.30)  # parent 0
    cpt2[:, 4] = (0.25, 0.80, 0.15)  # parent 1
    cpt2[:, 5] = (0.15, 0.25, 0.90)  # parent 2
    cpt2[:, 6] = (0.75, 0.25, 0.15)  # parent 0
    gm = GenerativeModel(
        ontology_digest=onto.content_digest,
        disease_names=("disease_00", "disease_01", "disease_02"),
        parent=parent,
        priors=np.array([0.5, 0.3, 0.2]),
        first_level_cpt=cpt1,
        second_level_cpt=cpt2,
        age_mean=np.full(d, 50.0),
        age_std=np.full(d, 15.0),
        p_female=np.full(d, 0.5),
        flag_probs=np.full((d, 2), 0.2),
        mention_prob=0.3,
    )
    validate_genmodel(gm)
    return gm


def benchmark_ontology() -> HpiOntology:
    """Desk-scale ontology: 30 first-level, 60 second-level, 90 closed + 10 open."""
    return generate_ontology(m1=30, m2=60, n_open=10)


def benchmark_genmodel(
    ontology: HpiOntology,
    n_diseases: int = 20,
    seed: int = 0,
    n_flags: int = 8,
    n_signatures: int = 3,
) -> GenerativeModel:
    """Seeded random incidence tables with per-disease signature elements.

    Sibling groups probed by open questions act as common complaints: every
    disease presents them at the same high rate, so confirming one says
    little by itself. The signal lives one level down. Each disease gets
    ``n_signatures`` signature elements at marginal incidence 0.7-0.9 among
    those groups' children, next to moderately disease-specific siblings,
    and the remaining first-level elements are low-incidence background.
    Detail findings mostly surface only under direct questioning, so the
    tables favor a policy that works complaint groups over one that probes
    at random. Ontologies without open questions fall back to first-level
    signatures over the same background.
    """
    rng = np.random.default_rng([seed, _TAG_GENMODEL])
    m = ontology.n_elements
    first_ids = np.array(ontology.first_level_ids())
    parent = np.array(
        [-1 if ontology.parent_of(e) is None else ontology.parent_of(e) for e in range(m)]
    )

    weights = rng.uniform(0.7, 1.3, n_diseases)
    priors = weights / weights.sum()

    common = sorted({
        int(parent[t]) for q in ontology.questions if q.kind == OPEN for t in q.targets
    })
    common_set = set(common)
    child_pool = np.array([e for e in range(m) if parent[e] in common_set])
    deep_signatures = len(child_pool) >= n_signatures

    cpt1 = np.zeros((n_diseases, m))
    cpt2 = np.zeros((n_diseases, m))
    signature = np.zeros((n_diseases, m), dtype=bool)
    for d in range(n_diseases):
        cpt1[d, first_ids] = rng.uniform(0.01, 0.08, len(first_ids))
    for f, inc in zip(common, rng.uniform(0.93, 0.97, len(common))):
        cpt1[:, f] = inc
    for d in range(n_diseases):
        pool = child_pool if deep_signatures else first_ids
        sig = rng.choice(pool, size=min(n_signatures, len(pool)), replace=False)
        signature[d, sig] = True
        if not deep_signatures:
            cpt1[d, sig] = rng.uniform(0.7, 0.9, len(sig))
    for e in range(m):
        p = parent[e]
        if p < 0:
            continue
        if p in common_set:
            # Conditional rates chosen so signature children keep a 0.7-0.9
            # marginal incidence under parents at 0.93-0.97.
            base = rng.uniform(0.05, 0.8, n_diseases)
            cpt2[:, e] = np.where(signature[:, e], rng.uniform(0.76, 0.92, n_diseases), base)
        else:
            cpt2[:, e] = np.where(signature[:, p], rng.uniform(0.5, 0.9, n_diseases),
                                  rng.uniform(0.05, 0.35, n_diseases))

    gm = GenerativeModel(
        ontology_digest=ontology.content_digest,
        disease_names=tuple(f"disease_{d:02d}" for d in range(n_diseases)),
        parent=parent,
        priors=priors,
        first_level_cpt=cpt1,
        second_level_cpt=cpt2,
        age_mean=rng.uniform(30.0, 70.0, n_diseases),
        age_std=np.full(n_diseases, 12.0),
        p_female=rng.uniform(0.35, 0.65, n_diseases),
        flag_probs=rng.uniform(0.05, 0.3, (n_diseases, n_flags)),
        mention_prob=0.3,
    )
    validate_genmodel(gm)
    return gm


# ---------------------------------------------------------------------------
# Cohort sampling
# ---------------------------------------------------------------------------

def _sample_record(gm: GenerativeModel, index: int, rng: np.random.Generator) -> PatientRecord:
    # Fixed draw order per record: disease, age, sex, flags, then one presence
    # and one mention uniform per element slot (unused slots still consume
    # their draw, which keeps records independent of sampling shortcuts).
    d = int(rng.choice(gm.n_diseases, p=gm.priors))
    age = int(np.clip(round(gm.age_mean[d] + gm.age_std[d] * rng.standard_normal()), AGE_MIN, AGE_MAX))
    sex = "female" if rng.random() < gm.p_female[d] else "male"
    flags = tuple(int(u < p) for u, p in zip(rng.random(gm.n_flags), gm.flag_probs[d]))

    m = gm.n_elements
    u_present = rng.random(m)
    u_mention = rng.random(m)
    hpi = np.zeros(m, dtype=np.int8)
    for f in gm.first_level_ids():
        children = gm.children_of(f)
        if u_present[f] < gm.first_level_cpt[d, f]:
            hpi[f] = CONFIRMED
            for c in children:
                if u_present[c] < gm.second_level_cpt[d, c]:
                    hpi[c] = CONFIRMED
                elif u_mention[c] < gm.mention_prob:
                    hpi[c] = DENIED
        else:
            status = DENIED if u_mention[f] < gm.mention_prob else NOT_MENTIONED
            hpi[f] = status
            hpi[children] = status  # absent parent: children share its recorded status
    return PatientRecord(f"p{index:06d}", age, sex, flags, hpi, d)


def generate_cohort(gm: GenerativeModel, n: int, seed: int) -> PatientDataset:
    """Sample ``n`` records; bit-identical for identical (model, n, seed).

    Each record draws from its own RNG stream keyed by (seed, record index),
    so the output does not depend on how records are scheduled.
    """
    if n < 1:
        raise ConfigError("cohort size must be at least 1")
    validate_genmodel(gm)
    records = [_sample_record(gm, i, np.random.default_rng([seed, i])) for i in range(n)]
    return PatientDataset(
        records=records,
        disease_names=gm.disease_names,
        m=gm.n_elements,
        ontology_digest=gm.ontology_digest,
        genmodel_digest=gm.digest(),
    )


# ---------------------------------------------------------------------------
# Exact posterior oracle
# ---------------------------------------------------------------------------

def bayes_posterior(gm: GenerativeModel, evidence: np.ndarray) -> np.ndarray:
    """Exact disease posterior given a ternary observation over all elements.

    Confirmed (1) means the finding is present, denied (2) absent, unknown (0)
    unobserved and marginalized. Families (a first-level element plus its
    children) are independent given the disease; within a family an unknown
    parent is summed over both presence branches in log space.
    """
    evidence = np.asarray(evidence)
    if evidence.shape != (gm.n_elements,):
        raise ConfigError("evidence length does not match element count")
    second = np.flatnonzero(gm.parent >= 0)
    bad = second[(evidence[second] == CONFIRMED) & (evidence[gm.parent[second]] == DENIED)]
    if bad.size:
        raise InconsistentEvidence(f"element {bad[0]} confirmed under denied parent")

    with np.errstate(divide="ignore"):
        log_q1 = np.log(gm.first_level_cpt)
        log_not_q1 = np.log1p(-gm.first_level_cpt)
        log_q2 = np.log(gm.second_level_cpt)
        log_not_q2 = np.log1p(-gm.second_level_cpt)

    ll = np.log(gm.priors.astype(float))
    for f in gm.first_level_ids():
        children = gm.children_of(f)
        present = np.zeros(gm.n_diseases)
        any_child_confirmed = False
        for c in children:
            if evidence[c] == CONFIRMED:
                present = present + log_q2[:, c]
                any_child_confirmed = True
            elif evidence[c] == DENIED:
                present = present + log_not_q2[:, c]
        if evidence[f] == CONFIRMED:
            ll = ll + log_q1[:, f] + present
        elif evidence[f] == DENIED:
            ll = ll + log_not_q1[:, f]
        else:
            absent = -np.inf if any_child_confirmed else 0.0
            ll = ll + np.logaddexp(log_q1[:, f] + present, log_not_q1[:, f] + absent)

    top = ll.max()
    if not np.isfinite(top):
        raise InconsistentEvidence("evidence has zero likelihood under every disease")
    post = np.exp(ll - top)
    return post / post.sum()


def full_evidence(hpi: np.ndarray) -> np.ndarray:
    """Map a record's HPI to a fully-observed ternary: present -> confirmed,
    everything else -> denied (absence, whether denied or unmentioned)."""
    return np.where(np.asarray(hpi) == CONFIRMED, CONFIRMED, DENIED).astype(np.int8)


def enumerate_bayes_rate(gm: GenerativeModel, max_states: int = 1_000_000) -> float:
    """Bayes-optimal accuracy under full observation, by exact enumeration.

    Walks every hierarchy-consistent presence assignment (absent parents force
    absent children) and sums max_d prior_d * P(x | d). Only feasible for toy
    models; the state count is checked against ``max_states``.
    """
    families = []
    n_states = 1
    for f in gm.first_level_ids():
        children = gm.children_of(f)
        n_states *= 1 + (1 << len(children))
        if n_states > max_states:
            raise ConfigError("model too large for exact enumeration")
        configs = [(1.0 - gm.first_level_cpt[:, f])]  # parent absent, all children absent
        for bits in range(1 << len(children)):
            p = gm.first_level_cpt[:, f].copy()
            for k, c in enumerate(children):
                q = gm.second_level_cpt[:, c]
                p = p * (q if bits >> k & 1 else 1.0 - q)
            configs.append(p)
        families.append(np.stack(configs))

    rate = 0.0
    stack = [(0, gm.priors.astype(float))]
    while stack:
        depth, probs = stack.pop()
        if depth == len(families):
            rate += float(probs.max())
            continue
        for cfg in families[depth]:
            stack.append((depth + 1, probs * cfg))
    return rate


# ---------------------------------------------------------------------------
# Splits and filtering
# ---------------------------------------------------------------------------

def split_dataset(
    dataset: PatientDataset, ratios: tuple[float, float, float], seed: int
) -> tuple[PatientDataset, PatientDataset, PatientDataset]:
    """Disjoint shuffled train/val/test split; floor sizes, remainder to train."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must sum to 1")
    n = len(dataset)
    sizes = [int(math.floor(n * r + 1e-9)) for r in ratios]
    sizes[0] += n - sum(sizes)
    perm = np.random.default_rng([seed, _TAG_SPLIT]).permutation(n)
    out = []
    start = 0
    for size in sizes:
        chosen = sorted(perm[start : start + size])
        out.append(
            PatientDataset(
                records=[dataset.records[i] for i in chosen],
                disease_names=dataset.disease_names,
                m=dataset.m,
                ontology_digest=dataset.ontology_digest,
                genmodel_digest=dataset.genmodel_digest,
            )
        )
        start += size
    return out[0], out[1], out[2]


def filter_rare(dataset: PatientDataset, min_count: int) -> tuple[PatientDataset, dict[int, int]]:
    """Drop records whose label occurs fewer than ``min_count`` times.

    The surviving disease vocabulary is re-indexed densely (ascending old
    index); returns the new dataset plus the old->new label mapping.
    """
    if min_count < 1:
        raise ConfigError("min_count must be at least 1")
    counts = np.bincount(dataset.labels(), minlength=dataset.n_diseases)
    kept = np.flatnonzero(counts >= min_count)
    if kept.size == 0:
        raise EmptyDataset("no disease label reaches min_count")
    mapping = {int(old): new for new, old in enumerate(kept)}
    records = [
        PatientRecord(r.id, r.age, r.sex, r.prior_flags, r.hpi, mapping[r.label])
        for r in dataset.records
        if r.label in mapping
    ]
    identity = len(mapping) == dataset.n_diseases
    return (
        PatientDataset(
            records=records,
            disease_names=tuple(dataset.disease_names[i] for i in kept),
            m=dataset.m,
            ontology_digest=dataset.ontology_digest,
            genmodel_digest=dataset.genmodel_digest if identity else None,
        ),
        mapping,
    )


# ---------------------------------------------------------------------------
# History encoding
# ---------------------------------------------------------------------------

def encode_history(
    record: PatientRecord, width: int, age_min: float = AGE_MIN, age_max: float = AGE_MAX
) -> np.ndarray:
    """Deterministic structured history vector: [age, sex one-hot, flags, 0...].

    Age is min-max normalized to [0, 1] against the configured bounds; surplus
    slots stay zero so one width can serve records with fewer flags.
    """
    needed = 1 + len(SEXES) + len(record.prior_flags)
    if width < needed:
        raise ConfigError(f"history width {width} below required {needed}")
    if record.sex not in SEXES:
        raise ConfigError(f"unknown sex {record.sex!r}")
    vec = np.zeros(width)
    vec[0] = min(max((record.age - age_min) / (age_max - age_min), 0.0), 1.0)
    vec[1 + SEXES.index(record.sex)] = 1.0
    vec[3 : 3 + len(record.prior_flags)] = record.prior_flags
    return vec


# ---------------------------------------------------------------------------
# Dataset files: JSON-lines records plus a sidecar header
# ---------------------------------------------------------------------------

def _header_path(path: Path) -> Path:
    return path.with_name(path.stem + ".header.json")


def save_dataset(dataset: PatientDataset, path: str | Path) -> None:
    """Write records as JSON-lines plus a ``*.header.json`` sidecar; lossless."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "D": dataset.n_diseases,
        "M": dataset.m,
        "disease_names": list(dataset.disease_names),
        "genmodel_digest": dataset.genmodel_digest,
        "ontology_digest": dataset.ontology_digest,
    }
    with open(_header_path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            row = {
                "id": r.id,
                "age": r.age,
                "sex": r.sex,
                "prior_flags": list(r.prior_flags),
                "hpi": [int(v) for v in r.hpi],
                "label": r.label,
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(path: str | Path, ontology: HpiOntology | None = None) -> PatientDataset:
    """Read a dataset back; verifies the header digest against ``ontology``
    when given, plus per-record shape and hierarchy consistency."""
    path = Path(path)
    try:
        header = json.loads(_header_path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc}") from None
    for key in ("D", "M", "disease_names", "ontology_digest"):
        if key not in header:
            raise ParseError(f"header missing field {key!r}")
    m, d = header["M"], header["D"]
    if ontology is not None:
        if ontology.content_digest != header["ontology_digest"]:
            raise DigestMismatch("dataset was built against a different ontology")
        if ontology.n_elements != m:
            raise DigestMismatch("header element count does not match ontology")

    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                raise ParseError(f"line {lineno}: malformed record") from None
            rid = row.get("id", f"line{lineno}")
            hpi = np.asarray(row["hpi"], dtype=np.int8)
            if hpi.shape != (m,):
                raise ParseError(f"record {rid}: hpi length {hpi.size} != M={m}")
            if np.any((hpi < 0) | (hpi > 2)):
                raise ParseError(f"record {rid}: hpi entries must be 0, 1 or 2")
            if not 0 <= row["label"] < d:
                raise ValidationError(f"record {rid}: label {row['label']} out of range")
            if row["sex"] not in SEXES:
                raise ParseError(f"record {rid}: unknown sex {row['sex']!r}")
            if ontology is not None:
                _check_hpi_consistency(ontology, hpi, rid)
            records.append(
                PatientRecord(
                    rid, int(row["age"]), row["sex"], tuple(int(v) for v in row["prior_flags"]),
                    hpi, int(row["label"]),
                )
            )
    return PatientDataset(
        records=records,
        disease_names=tuple(header["disease_names"]),
        m=m,
        ontology_digest=header["ontology_digest"],
        genmodel_digest=header.get("genmodel_digest"),
    )


def _check_hpi_consistency(ontology: HpiOntology, hpi: np.ndarray, rid: str) -> None:
    for e in range(ontology.n_elements):
        parent = ontology.parent_of(e)
        if parent is not None and hpi[e] == CONFIRMED and hpi[parent] != CONFIRMED:
            raise ValidationError(f"record {rid}: element {e} confirmed under non-confirmed parent")
