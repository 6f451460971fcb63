"""Consultation evaluation: full dialogues, ranking metrics, reports.

Runs any question-selection policy (trained, random, fixed-order) against
simulated patients, ranks diseases from the final observation, and computes
recall-at-K plus pooled rediscovery precision/recall/F1. Per-patient RNG
streams keyed on (seed, patient index) make evaluation order-independent.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import consult_env, nncore
from .consult_env import DisclosureProbs, UNMENTIONED_DENIED
from .diagnosis import DiagnosisModel, encode_hpi_ternary, rank_diseases
from .errors import (
    ConfigError,
    DigestMismatch,
    EmptyInput,
    IoError,
    PairingError,
    ParseError,
)
from .inquiry import InquiryPolicy, masked_softmax
from .ontology import HpiOntology
from .patientgen import CONFIRMED, PatientDataset, PatientRecord, encode_history

RANDOM_LEGAL = "RandomLegal"
FIXED_ORDER = "FixedOrder"


@dataclass(frozen=True)
class DialogueTrace:
    """One finished consultation: what was asked, revealed, and concluded."""

    patient_id: str
    rounds: tuple  # ((question_id, ((element, status), ...)), ...)
    final_observation: np.ndarray  # int8 ternary, length M
    ranking: tuple[int, ...]  # permutation of 0..D-1, best first
    true_label: int
    horizon: int

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def stopped_early(self) -> bool:
        return len(self.rounds) < self.horizon

    def label_rank(self) -> int:
        """1-based position of the true label in the ranking."""
        return self.ranking.index(self.true_label) + 1


@dataclass(frozen=True)
class RediscoveryMetrics:
    """Pooled micro-averaged agreement between dialogue and record."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool  # some denominator was zero and the metric fell back to 0


@dataclass
class EvalReport:
    recall_at_k: dict[int, float]
    rediscovery: RediscoveryMetrics
    group_recall: dict[str, float]
    n_patients: int
    config_digest: str


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class GreedyModelPolicy:
    """Trained policy run greedily: argmax over legal-action probabilities.

    Ties break toward the lowest question id.
    """

    def __init__(self, policy: InquiryPolicy):
        self.inner = policy
        self.ontology_digest = policy.ontology_digest
        self.history_width = policy.history_width

    def select(self, history, state, mask, rng) -> int:
        x = np.concatenate([history, encode_hpi_ternary(state.status)])
        logits = nncore.forward(self.inner.net, x[None, :])
        probs = masked_softmax(logits, np.asarray(mask, dtype=bool)[None, :])[0]
        return int(np.argmax(probs))


class RandomLegalPolicy:
    """Uniform choice over whatever is currently legal."""

    ontology_digest = None
    history_width = None

    def select(self, history, state, mask, rng) -> int:
        ids = np.flatnonzero(mask)
        return int(ids[rng.integers(len(ids))])


class FixedOrderPolicy:
    """Asks the lowest-id legal question every round."""

    ontology_digest = None
    history_width = None

    def select(self, history, state, mask, rng) -> int:
        return int(np.flatnonzero(mask)[0])


def baseline_policy(kind: str):
    if kind == RANDOM_LEGAL:
        return RandomLegalPolicy()
    if kind == FIXED_ORDER:
        return FixedOrderPolicy()
    raise ConfigError(f"unknown baseline kind {kind!r}")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate_consultation(
    policy,
    diag_model: DiagnosisModel,
    patient: PatientRecord,
    ontology: HpiOntology,
    disclosure: DisclosureProbs,
    horizon: int,
    rng: np.random.Generator,
    noise: float = 0.0,
    unmentioned_answer: str = UNMENTIONED_DENIED,
) -> DialogueTrace:
    """One full consultation; stops early if no question remains legal."""
    if diag_model.ontology_digest != ontology.content_digest:
        raise DigestMismatch("diagnosis model was built against a different ontology")
    policy_digest = getattr(policy, "ontology_digest", None)
    if policy_digest is not None and policy_digest != ontology.content_digest:
        raise DigestMismatch("policy was built against a different ontology")

    width = getattr(policy, "history_width", None) or diag_model.history_width
    e_policy = encode_history(patient, width)
    e_diag = encode_history(patient, diag_model.history_width)
    state = consult_env.reset(patient, ontology, disclosure, rng, horizon=horizon)
    rounds = []
    while state.t < horizon:
        mask = consult_env.legal_actions(state, ontology)
        if not mask.any():
            break
        action = policy.select(e_policy, state, mask, rng)
        before = state.status
        state, _ = consult_env.step(
            state, action, patient, ontology, noise, rng, unmentioned_answer
        )
        changed = np.flatnonzero(state.status != before)
        rounds.append((action, tuple((int(e), int(state.status[e])) for e in changed)))
    final = consult_env.observed_ternary(state)
    ranking = rank_diseases(diag_model, e_diag, final)
    return DialogueTrace(
        patient_id=patient.id,
        rounds=tuple(rounds),
        final_observation=final,
        ranking=tuple(int(d) for d in ranking),
        true_label=patient.label,
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def recall_at_k(traces, ks) -> dict[int, float]:
    """Fraction of traces whose true label lands in the top K of the ranking."""
    traces = list(traces)
    if not traces:
        raise EmptyInput("no traces to score")
    out = {}
    for k in ks:
        hits = sum(1 for t in traces if t.true_label in t.ranking[: int(k)])
        out[int(k)] = hits / len(traces)
    return out


def rediscovery_metrics(traces, patients) -> RediscoveryMetrics:
    """Pooled counts of confirmed-vs-recorded positives across all dialogues.

    A zero denominator makes the affected metric 0 and sets ``degenerate``.
    """
    traces = list(traces)
    patients = list(patients)
    if len(traces) != len(patients):
        raise PairingError(f"{len(traces)} traces paired with {len(patients)} patients")
    tp = fp = fn = 0
    for trace, patient in zip(traces, patients):
        if trace.patient_id != patient.id:
            raise PairingError(
                f"trace for {trace.patient_id!r} paired with record {patient.id!r}"
            )
        confirmed = trace.final_observation == CONFIRMED
        positive = patient.hpi == CONFIRMED
        tp += int(np.sum(confirmed & positive))
        fp += int(np.sum(confirmed & ~positive))
        fn += int(np.sum(~confirmed & positive))
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return RediscoveryMetrics(tp, fp, fn, precision, recall, f1, degenerate)


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

def _config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def evaluate(
    policy,
    diag_model: DiagnosisModel,
    dataset: PatientDataset,
    ontology: HpiOntology,
    disclosure: DisclosureProbs | None = None,
    horizon: int = 10,
    seed: int = 0,
    ks=(1, 3, 5),
    noise: float = 0.0,
    unmentioned_answer: str = UNMENTIONED_DENIED,
    group_of: dict[int, str] | None = None,
    group_k: int = 1,
) -> tuple[EvalReport, list[DialogueTrace]]:
    """Consult every patient in the dataset once; patient i uses RNG (seed, i)."""
    if len(dataset) == 0:
        raise EmptyInput("empty evaluation dataset")
    disclosure = disclosure if disclosure is not None else DisclosureProbs()
    traces = []
    for i, patient in enumerate(dataset.records):
        rng = np.random.default_rng([seed, i])
        traces.append(
            simulate_consultation(
                policy, diag_model, patient, ontology, disclosure, horizon, rng,
                noise, unmentioned_answer,
            )
        )
    recalls = recall_at_k(traces, ks)
    redisc = rediscovery_metrics(traces, dataset.records)

    groups: dict[str, list[DialogueTrace]] = {}
    for trace in traces:
        name = group_of.get(trace.true_label, str(trace.true_label)) if group_of \
            else str(trace.true_label)
        groups.setdefault(name, []).append(trace)
    group_recall = {
        name: recall_at_k(members, [group_k])[group_k]
        for name, members in sorted(groups.items())
    }
    digest = _config_digest(
        {
            "disclosure": [disclosure.p1p, disclosure.p1n, disclosure.p2p, disclosure.p2n],
            "group_k": group_k,
            "horizon": horizon,
            "ks": [int(k) for k in ks],
            "n_patients": len(dataset),
            "noise": noise,
            "ontology_digest": ontology.content_digest,
            "seed": seed,
            "unmentioned_answer": unmentioned_answer,
        }
    )
    report = EvalReport(
        recall_at_k=recalls,
        rediscovery=redisc,
        group_recall=group_recall,
        n_patients=len(dataset),
        config_digest=digest,
    )
    return report, traces


# ---------------------------------------------------------------------------
# Bootstrap helper
# ---------------------------------------------------------------------------

def bootstrap_mean_diff(
    xs, ys, n_resamples: int = 1000, seed: int = 0, alpha: float = 0.05
) -> tuple[float, float, float]:
    """Paired percentile bootstrap for mean(xs) - mean(ys).

    Returns (mean difference, CI low, CI high). Inputs must be paired
    per-patient outcomes of equal length.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise PairingError(f"paired samples differ in shape: {xs.shape} vs {ys.shape}")
    if len(xs) == 0:
        raise EmptyInput("nothing to resample")
    diffs = xs - ys
    rng = np.random.default_rng([seed, len(xs)])
    idx = rng.integers(len(diffs), size=(n_resamples, len(diffs)))
    means = diffs[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(diffs.mean()), float(lo), float(hi)


# ---------------------------------------------------------------------------
# Reports and trace files
# ---------------------------------------------------------------------------

def _report_payload(report: EvalReport) -> dict:
    return {
        "recall_at_k": {str(k): v for k, v in sorted(report.recall_at_k.items())},
        "rediscovery": {
            "tp": report.rediscovery.tp,
            "fp": report.rediscovery.fp,
            "fn": report.rediscovery.fn,
            "precision": report.rediscovery.precision,
            "recall": report.rediscovery.recall,
            "f1": report.rediscovery.f1,
            "degenerate": report.rediscovery.degenerate,
        },
        "group_recall": dict(sorted(report.group_recall.items())),
        "n_patients": report.n_patients,
        "config_digest": report.config_digest,
    }


def emit_report(report: EvalReport, path: str | Path, format: str = "json") -> None:
    """Write the report as JSON (lossless) or two-column CSV rows."""
    if format not in ("json", "csv"):
        raise ConfigError(f"unknown report format {format!r}")
    payload = _report_payload(report)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if format == "json":
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
            else:
                fh.write("metric,value\n")
                for k, v in payload["recall_at_k"].items():
                    fh.write(f"recall_at_{k},{v:.6f}\n")
                for name in ("precision", "recall", "f1"):
                    fh.write(f"rediscovery_{name},{payload['rediscovery'][name]:.6f}\n")
                for name, v in payload["group_recall"].items():
                    fh.write(f"group_recall_{name},{v:.6f}\n")
                fh.write(f"n_patients,{report.n_patients}\n")
                fh.write(f"config_digest,{report.config_digest}\n")
    except OSError as exc:
        raise IoError(f"cannot write report to {path}: {exc}") from exc


def load_report(path: str | Path) -> EvalReport:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read report from {path}: {exc}") from exc
    except json.JSONDecodeError:
        raise ParseError(f"{path}: malformed report") from None
    for key in ("recall_at_k", "rediscovery", "group_recall", "n_patients", "config_digest"):
        if key not in payload:
            raise ParseError(f"{path}: report missing field {key!r}")
    r = payload["rediscovery"]
    return EvalReport(
        recall_at_k={int(k): float(v) for k, v in payload["recall_at_k"].items()},
        rediscovery=RediscoveryMetrics(
            int(r["tp"]), int(r["fp"]), int(r["fn"]),
            float(r["precision"]), float(r["recall"]), float(r["f1"]),
            bool(r["degenerate"]),
        ),
        group_recall={str(k): float(v) for k, v in payload["group_recall"].items()},
        n_patients=int(payload["n_patients"]),
        config_digest=payload["config_digest"],
    )


def save_traces(traces, path: str | Path) -> None:
    """JSON-lines dump, one consultation per line."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for t in traces:
                fh.write(
                    json.dumps(
                        {
                            "patient_id": t.patient_id,
                            "rounds": [
                                [q, [[e, s] for e, s in revealed]] for q, revealed in t.rounds
                            ],
                            "final_observation": [int(v) for v in t.final_observation],
                            "ranking": list(t.ranking),
                            "true_label": t.true_label,
                            "horizon": t.horizon,
                        },
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                    + "\n"
                )
    except OSError as exc:
        raise IoError(f"cannot write traces to {path}: {exc}") from exc


def load_traces(path: str | Path) -> list[DialogueTrace]:
    traces = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read traces from {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                raise ParseError(f"line {lineno}: malformed trace") from None
            traces.append(
                DialogueTrace(
                    patient_id=row["patient_id"],
                    rounds=tuple(
                        (int(q), tuple((int(e), int(s)) for e, s in revealed))
                        for q, revealed in row["rounds"]
                    ),
                    final_observation=np.array(row["final_observation"], dtype=np.int8),
                    ranking=tuple(int(d) for d in row["ranking"]),
                    true_label=int(row["true_label"]),
                    horizon=int(row["horizon"]),
                )
            )
    return traces
