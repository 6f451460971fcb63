"""Disease-ranking model: (history, ternary HPI observation) -> distribution.

The same network serves two callers: standalone ranking on a completed record
and in-dialogue scoring on a partial observation. Masking augmentation during
training hides random known entries so the model stays calibrated on partial
views.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nncore
from .errors import DomainError, EmptyDataset, ParseError, ShapeError
from .patientgen import PatientDataset, encode_history, full_evidence
from .nncore import DenseNet, forward, forward_with_cache, softmax

_TAG_SL = (1 << 40) + 3


@dataclass
class DiagnosisModel:
    """Trained ranking net plus the shape contract it was built for."""

    net: DenseNet
    history_width: int
    n_elements: int
    disease_names: tuple[str, ...]
    ontology_digest: str

    @property
    def n_diseases(self) -> int:
        return len(self.disease_names)


@dataclass
class SlTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True
    hide_lo: float = 0.0
    hide_hi: float = 0.8
    hidden: tuple[int, ...] = (256, 256)
    history_width: int = 64

    def validate(self) -> None:
        if not (0.0 <= self.hide_lo <= self.hide_hi <= 1.0):
            raise DomainError("hide-rate range must satisfy 0 <= lo <= hi <= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class SlEpochMetrics:
    mean_loss: float
    accuracy: float


def encode_hpi_ternary(obs: np.ndarray) -> np.ndarray:
    """Triple one-hot per element: [unknown, confirmed, denied] at slots 3i..3i+2."""
    obs = np.asarray(obs)
    flat = obs.reshape(-1, obs.shape[-1]) if obs.ndim == 2 else obs.reshape(1, -1)
    if flat.size and (flat.min() < 0 or flat.max() > 2):
        raise DomainError("ternary entries must be 0, 1 or 2")
    n, m = flat.shape
    out = np.zeros((n, 3 * m))
    cols = 3 * np.arange(m) + flat
    out[np.arange(n)[:, None], cols] = 1.0
    return out if obs.ndim == 2 else out[0]


def new_diagnosis_model(
    history_width: int,
    n_elements: int,
    disease_names: tuple[str, ...],
    ontology_digest: str,
    hidden: tuple[int, ...] = (256, 256),
    seed: int = 0,
) -> DiagnosisModel:
    dims = (history_width + 3 * n_elements, *hidden, len(disease_names))
    net = nncore.init_dense(dims, output_head=nncore.HEAD_LOGITS, seed=seed)
    return DiagnosisModel(net, history_width, n_elements, tuple(disease_names), ontology_digest)


def _input_matrix(model: DiagnosisModel, history: np.ndarray, obs: np.ndarray) -> np.ndarray:
    history = np.atleast_2d(np.asarray(history, dtype=float))
    obs = np.asarray(obs)
    obs2 = obs.reshape(1, -1) if obs.ndim == 1 else obs
    if history.shape[1] != model.history_width:
        raise ShapeError(f"history width {history.shape[1]} != {model.history_width}")
    if obs2.shape[1] != model.n_elements:
        raise ShapeError(f"observation length {obs2.shape[1]} != {model.n_elements}")
    if history.shape[0] != obs2.shape[0]:
        raise ShapeError("history and observation batch sizes differ")
    return np.hstack([history, encode_hpi_ternary(obs2)])


def predict(model: DiagnosisModel, history: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Disease distribution for one (history, observation) pair."""
    return softmax(forward(model.net, _input_matrix(model, history, obs)))[0]


def predict_batch(model: DiagnosisModel, history: np.ndarray, obs: np.ndarray) -> np.ndarray:
    return softmax(forward(model.net, _input_matrix(model, history, obs)))


def rank_from_probs(probs: np.ndarray) -> np.ndarray:
    """Indices by descending probability; exact ties by ascending index."""
    return np.argsort(-np.asarray(probs), kind="stable")


def rank_diseases(model: DiagnosisModel, history: np.ndarray, obs: np.ndarray) -> np.ndarray:
    return rank_from_probs(predict(model, history, obs))


def _dataset_arrays(dataset: PatientDataset, width: int):
    # Records enter training as full observations: a complete interview
    # answers every question, so absence (denied or never mentioned) reads
    # as denied. Masking augmentation then hides entries to mimic the
    # partial views seen mid-dialogue.
    hist = np.stack([encode_history(r, width) for r in dataset.records])
    hpi = np.stack([full_evidence(r.hpi) for r in dataset.records])
    labels = dataset.labels()
    return hist, hpi, labels


def train_epoch(
    model: DiagnosisModel,
    dataset: PatientDataset,
    cfg: SlTrainConfig,
    epoch: int = 0,
    adam: nncore.AdamState | None = None,
) -> SlEpochMetrics:
    """One shuffled minibatch pass; returns mean loss and top-1 accuracy.

    Reproducible from (cfg.seed, epoch) alone: the shuffle and every
    augmentation draw come from an RNG keyed on that pair.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if dataset.m != model.n_elements or dataset.n_diseases != model.n_diseases:
        raise ShapeError("dataset dimensions do not match model")
    hist, hpi, labels = _dataset_arrays(dataset, model.history_width)
    if adam is None:
        adam = nncore.init_adam(nncore.net_params(model.net))

    rng = np.random.default_rng([cfg.seed, _TAG_SL, epoch])
    order = rng.permutation(len(dataset))
    total_loss = 0.0
    hits = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        obs = hpi[idx]
        if cfg.augment:
            rates = rng.uniform(cfg.hide_lo, cfg.hide_hi, size=len(idx))
            hide = rng.random(obs.shape) < rates[:, None]
            obs = np.where(hide & (obs != 0), 0, obs)
        x = np.hstack([hist[idx], encode_hpi_ternary(obs)])
        y = labels[idx]
        logits, cache = forward_with_cache(model.net, x)
        total_loss += nncore.cross_entropy(logits, y) * len(idx)
        hits += int((logits.argmax(axis=1) == y).sum())
        gw, gb, _ = nncore.backward(model.net, cache, nncore.cross_entropy_grad(logits, y))
        nncore.adam_step(nncore.net_params(model.net), nncore.flat_grads(gw, gb), adam, cfg.lr)
    n = len(dataset)
    return SlEpochMetrics(total_loss / n, hits / n)


def train_diagnosis(
    dataset: PatientDataset,
    cfg: SlTrainConfig,
    val: PatientDataset | None = None,
    log=None,
) -> tuple[DiagnosisModel, list[SlEpochMetrics]]:
    """Full supervised run: fresh model, cfg.epochs passes, optional val log."""
    cfg.validate()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    model = new_diagnosis_model(
        cfg.history_width, dataset.m, dataset.disease_names, dataset.ontology_digest,
        hidden=cfg.hidden, seed=cfg.seed,
    )
    adam = nncore.init_adam(nncore.net_params(model.net))
    history = []
    for epoch in range(cfg.epochs):
        metrics = train_epoch(model, dataset, cfg, epoch=epoch, adam=adam)
        history.append(metrics)
        if log is not None:
            line = f"epoch {epoch}: loss {metrics.mean_loss:.4f} acc {metrics.accuracy:.4f}"
            if val is not None and len(val):
                line += f" val_loss {eval_loss(model, val):.4f}"
            log(line)
    return model, history


def eval_loss(model: DiagnosisModel, dataset: PatientDataset) -> float:
    """Mean cross-entropy on fully-observed records, no augmentation."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    hist, hpi, labels = _dataset_arrays(dataset, model.history_width)
    logits = forward(model.net, np.hstack([hist, encode_hpi_ternary(hpi)]))
    return nncore.cross_entropy(logits, labels)


def top1_accuracy(model: DiagnosisModel, dataset: PatientDataset) -> float:
    hist, hpi, labels = _dataset_arrays(dataset, model.history_width)
    probs = predict_batch(model, hist, hpi)
    return float((probs.argmax(axis=1) == labels).mean())


def save_diagnosis(model: DiagnosisModel, path: str | Path) -> None:
    model.net.meta = {
        "kind": "diagnosis",
        "history_width": model.history_width,
        "n_elements": model.n_elements,
        "disease_names": list(model.disease_names),
        "ontology_digest": model.ontology_digest,
    }
    nncore.save_net(model.net, path)


def load_diagnosis(path: str | Path) -> DiagnosisModel:
    net = nncore.load_net(path)
    meta = net.meta
    if meta.get("kind") != "diagnosis":
        raise ParseError("checkpoint is not a diagnosis model")
    model = DiagnosisModel(
        net,
        int(meta["history_width"]),
        int(meta["n_elements"]),
        tuple(meta["disease_names"]),
        meta["ontology_digest"],
    )
    if net.layer_dims[0] != model.history_width + 3 * model.n_elements:
        raise ParseError("checkpoint input width does not match recorded dimensions")
    if net.layer_dims[-1] != model.n_diseases:
        raise ParseError("checkpoint output width does not match disease count")
    return model
