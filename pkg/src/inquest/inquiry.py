"""Inquiry policy training: masked policy, reward, rollouts, GAE, PPO.

The policy and value nets read [history encoding, state encoding] and are
updated with a clipped-surrogate PPO whose gradients are derived by hand (see
``_policy_minibatch``). Everything is deterministic given seeds; rollout
episodes draw from per-episode RNG streams so results do not depend on
scheduling.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import consult_env, nncore
from .consult_env import DisclosureProbs, UNMENTIONED_DENIED
from .diagnosis import DiagnosisModel, encode_hpi_ternary, predict
from .errors import (
    ConfigError,
    DigestMismatch,
    DomainError,
    EmptyDataset,
    NoLegalAction,
    ParseError,
    ShapeError,
)
from .ontology import HpiOntology
from .patientgen import PatientDataset, encode_history

_TAG_PPO = (1 << 40) + 4


@dataclass
class InquiryPolicy:
    """Question-selection net: logits over the K catalog questions."""

    net: nncore.DenseNet
    history_width: int
    n_elements: int
    n_questions: int
    ontology_digest: str


@dataclass
class ValueNet:
    """State-value estimator sharing the policy's input layout."""

    net: nncore.DenseNet
    history_width: int
    n_elements: int
    ontology_digest: str


@dataclass(frozen=True)
class RewardParams:
    """Coefficients of the per-round reward.

    time_penalty is charged every round; first-level findings are scaled by
    first_level_weight, negative findings by negative_discount. The
    prediction-shift term (L1 distance between consecutive disease
    distributions) enters unweighted and unnormalized.
    """

    time_penalty: float = 0.5
    first_level_weight: float = 2.0
    negative_discount: float = 0.5

    def validate(self) -> None:
        for name in ("time_penalty", "first_level_weight", "negative_discount"):
            if not np.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if self.time_penalty < 0:
            raise DomainError("time_penalty must be >= 0")
        if not 0.0 <= self.negative_discount <= 1.0:
            raise DomainError("negative_discount must lie in [0, 1]")


@dataclass
class PpoConfig:
    iterations: int = 30
    episodes_per_iter: int = 32
    clip_eps: float = 0.2
    update_epochs: int = 4
    minibatch_size: int = 64
    gamma: float = 0.99
    lam_gae: float = 0.95
    policy_lr: float = 1e-3
    value_lr: float = 1e-3
    entropy_coef: float = 0.01
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0

    def validate(self) -> None:
        if self.clip_eps <= 0:
            raise DomainError("clip_eps must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam_gae <= 1.0:
            raise DomainError("lam_gae must lie in [0, 1]")
        if self.minibatch_size < 1 or self.update_epochs < 1:
            raise DomainError("minibatch_size and update_epochs must be >= 1")


@dataclass
class TrajectoryBatch:
    """Flat transition arrays; episodes are contiguous, one done flag each."""

    inputs: np.ndarray  # (n, E + 3M)
    actions: np.ndarray  # (n,) int
    logps: np.ndarray  # (n,) log-probability at collection time
    rewards: np.ndarray  # (n,)
    values: np.ndarray  # (n,)
    dones: np.ndarray  # (n,) bool
    masks: np.ndarray  # (n, K) bool, legality at collection time
    n_episodes: int

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def mean_episode_reward(self) -> float:
        return float(self.rewards.sum() / self.n_episodes)

    @property
    def mean_episode_len(self) -> float:
        return len(self) / self.n_episodes


@dataclass
class PpoStats:
    policy_loss: float
    value_loss: float
    clip_frac: float
    entropy: float


@dataclass
class IterStats:
    iteration: int
    mean_reward: float
    mean_len: float
    policy_loss: float
    value_loss: float
    clip_frac: float
    entropy: float


def new_inquiry_policy(
    history_width: int,
    n_elements: int,
    n_questions: int,
    ontology_digest: str,
    hidden: tuple[int, ...] = (128, 128),
    seed: int = 0,
) -> InquiryPolicy:
    dims = (history_width + 3 * n_elements, *hidden, n_questions)
    net = nncore.init_dense(dims, output_head=nncore.HEAD_LOGITS, seed=seed)
    return InquiryPolicy(net, history_width, n_elements, n_questions, ontology_digest)


def new_value_net(
    history_width: int,
    n_elements: int,
    ontology_digest: str,
    hidden: tuple[int, ...] = (128, 128),
    seed: int = 0,
) -> ValueNet:
    dims = (history_width + 3 * n_elements, *hidden, 1)
    net = nncore.init_dense(dims, output_head=nncore.HEAD_SCALAR, seed=seed)
    return ValueNet(net, history_width, n_elements, ontology_digest)


# ---------------------------------------------------------------------------
# Masked policy distribution
# ---------------------------------------------------------------------------

def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the legal entries of each row; illegal entries exactly 0."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} and mask {mask.shape} differ")
    if not mask.any(axis=1).all():
        raise NoLegalAction("a row has no legal action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_distribution(
    policy: InquiryPolicy, history: np.ndarray, state_encoding: np.ndarray, legal_mask: np.ndarray
) -> np.ndarray:
    """Action distribution for one state; zero on illegal actions."""
    x = np.concatenate([np.asarray(history, dtype=float), np.asarray(state_encoding, dtype=float)])
    logits = nncore.forward(policy.net, x[None, :])
    return masked_softmax(logits, np.asarray(legal_mask, dtype=bool)[None, :])[0]


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

def compute_reward(
    params: RewardParams,
    findings: consult_env.StepFindings,
    prev_probs: np.ndarray,
    new_probs: np.ndarray,
) -> float:
    """One round's reward: findings credit minus time penalty plus belief shift."""
    prev = np.asarray(prev_probs, dtype=float)
    new = np.asarray(new_probs, dtype=float)
    if prev.shape != new.shape or prev.ndim != 1:
        raise ShapeError(f"distribution shapes differ: {prev.shape} vs {new.shape}")
    beta = params.negative_discount
    return float(
        -params.time_penalty
        + params.first_level_weight * (findings.f1p + beta * findings.f1n)
        + findings.f2p
        + beta * findings.f2n
        + np.abs(prev - new).sum()
    )


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def collect_rollouts(
    policy: InquiryPolicy,
    value: ValueNet,
    diag_model: DiagnosisModel,
    dataset: PatientDataset,
    ontology: HpiOntology,
    disclosure: DisclosureProbs,
    reward_params: RewardParams,
    n_episodes: int,
    horizon: int,
    seed: int,
    iteration: int = 0,
    noise: float = 0.0,
    unmentioned_answer: str = UNMENTIONED_DENIED,
) -> TrajectoryBatch:
    """Sample episodes with the current policy against the environment.

    Episode ``ep`` draws everything (patient choice, disclosure, action
    sampling, response noise) from an RNG keyed on (seed, iteration, ep), so
    batches are identical however episodes are scheduled.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot roll out against an empty dataset")
    for name, digest in (
        ("policy", policy.ontology_digest),
        ("value net", value.ontology_digest),
        ("diagnosis model", diag_model.ontology_digest),
        ("dataset", dataset.ontology_digest),
    ):
        if digest != ontology.content_digest:
            raise DigestMismatch(f"{name} was built against a different ontology")

    rows, actions, logps, rewards, values, dones, masks = [], [], [], [], [], [], []
    episodes = 0
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, iteration, ep])
        patient = dataset.records[int(rng.integers(len(dataset)))]
        e_pol = encode_history(patient, policy.history_width)
        e_diag = encode_history(patient, diag_model.history_width)
        state = consult_env.reset(patient, ontology, disclosure, rng, horizon=horizon)
        prev = predict(diag_model, e_diag, consult_env.observed_ternary(state))
        start = len(rows)
        while state.t < horizon:
            mask = consult_env.legal_actions(state, ontology)
            if not mask.any():
                break
            x = np.concatenate([e_pol, encode_hpi_ternary(state.status)])
            probs = masked_softmax(
                nncore.forward(policy.net, x[None, :]), mask[None, :]
            )[0]
            action = int(rng.choice(len(probs), p=probs))
            state, findings = consult_env.step(
                state, action, patient, ontology, noise, rng, unmentioned_answer
            )
            new = predict(diag_model, e_diag, consult_env.observed_ternary(state))
            rows.append(x)
            actions.append(action)
            logps.append(float(np.log(probs[action])))
            rewards.append(compute_reward(reward_params, findings, prev, new))
            values.append(float(nncore.forward(value.net, x[None, :])[0]))
            dones.append(False)
            masks.append(mask)
            prev = new
        if len(rows) > start:
            dones[-1] = True
            episodes += 1
    if episodes == 0:
        raise EmptyDataset("no episode produced a single legal step")
    k = policy.n_questions
    return TrajectoryBatch(
        inputs=np.array(rows),
        actions=np.array(actions, dtype=np.int64),
        logps=np.array(logps),
        rewards=np.array(rewards),
        values=np.array(values),
        dones=np.array(dones, dtype=bool),
        masks=np.array(masks, dtype=bool).reshape(len(rows), k),
        n_episodes=episodes,
    )


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

def gae_advantages(
    batch: TrajectoryBatch, gamma: float, lam_gae: float
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-scan GAE within episodes; returns (advantages, value targets)."""
    n = len(batch)
    adv = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        if batch.dones[t]:
            next_value = 0.0
            gae = 0.0
        else:
            next_value = batch.values[t + 1]
        delta = batch.rewards[t] + gamma * next_value - batch.values[t]
        gae = delta + gamma * lam_gae * gae
        adv[t] = gae
    return adv, adv + batch.values


def clipped_surrogate(
    ratio: np.ndarray, adv: np.ndarray, clip_eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-transition objective min(rho*A, clip(rho)*A) and its active mask.

    The active mask marks where d(objective)/d(rho) = A (elsewhere the clipped
    branch is flat and the gradient is zero).
    """
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surr = np.minimum(unclipped, clipped)
    active = np.where(adv >= 0.0, ratio <= 1.0 + clip_eps, ratio >= 1.0 - clip_eps)
    return surr, active


def _entropy_terms(probs: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row entropy and d(entropy)/d(logits) for a masked softmax."""
    logp = np.where(probs > 0.0, np.log(np.where(probs > 0.0, probs, 1.0)), 0.0)
    h = -(probs * logp).sum(axis=1)
    grad = np.where(mask, -probs * (logp + h[:, None]), 0.0)
    return h, grad


def policy_loss_and_grad(
    net: nncore.DenseNet,
    inputs: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
    logps_old: np.ndarray,
    adv: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
):
    """Clipped-surrogate loss (minus entropy bonus) with analytic gradients.

    Loss = -mean(min(rho A, clip(rho) A)) - entropy_coef * mean(H). The
    logit gradient combines d(surrogate)/d(logit_j) = active * A * rho *
    (1[j=a] - pi_j) on legal entries with the entropy term; both vanish on
    illegal entries because pi is exactly zero there.
    """
    n = len(actions)
    logits, cache = nncore.forward_with_cache(net, inputs)
    probs = masked_softmax(logits, masks)
    logp_new = np.log(probs[np.arange(n), actions])
    ratio = np.exp(logp_new - logps_old)
    surr, active = clipped_surrogate(ratio, adv, clip_eps)
    h, dh = _entropy_terms(probs, masks)

    coeff = np.where(active, adv * ratio, 0.0)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    dsurr = coeff[:, None] * (onehot - probs)
    grad_logits = -(dsurr + entropy_coef * dh) / n
    gw, gb, _ = nncore.backward(net, cache, grad_logits)

    loss = -float(surr.mean()) - entropy_coef * float(h.mean())
    stats = {
        "surrogate": float(surr.mean()),
        "entropy": float(h.mean()),
        "clip_frac": float((np.abs(ratio - 1.0) > clip_eps).mean()),
        "ratio": ratio,
    }
    return loss, gw, gb, stats


def ppo_update(
    policy: InquiryPolicy,
    value: ValueNet,
    batch: TrajectoryBatch,
    cfg: PpoConfig,
    adam_policy: nncore.AdamState | None = None,
    adam_value: nncore.AdamState | None = None,
    iteration: int = 0,
) -> PpoStats:
    """Shuffled-minibatch PPO epochs over one collected batch.

    Advantages are normalized once per batch (guarding std >= 1e-8); legality
    masks recorded at collection are reused for every re-evaluation.
    """
    cfg.validate()
    if len(batch) == 0:
        raise ShapeError("empty trajectory batch")
    if adam_policy is None:
        adam_policy = nncore.init_adam(nncore.net_params(policy.net))
    if adam_value is None:
        adam_value = nncore.init_adam(nncore.net_params(value.net))

    adv, returns = gae_advantages(batch, cfg.gamma, cfg.lam_gae)
    adv = (adv - adv.mean()) / max(float(adv.std()), 1e-8)

    rng = np.random.default_rng([cfg.seed, _TAG_PPO, iteration])
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0, "entropy": 0.0}
    n_minibatches = 0
    for _ in range(cfg.update_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(order), cfg.minibatch_size):
            mb = order[start : start + cfg.minibatch_size]
            loss, gw, gb, stats = policy_loss_and_grad(
                policy.net,
                batch.inputs[mb],
                batch.masks[mb],
                batch.actions[mb],
                batch.logps[mb],
                adv[mb],
                cfg.clip_eps,
                cfg.entropy_coef,
            )
            nncore.adam_step(
                nncore.net_params(policy.net), nncore.flat_grads(gw, gb), adam_policy, cfg.policy_lr
            )

            pred, vcache = nncore.forward_with_cache(value.net, batch.inputs[mb])
            v_loss = nncore.squared_error(pred, returns[mb])
            gvw, gvb, _ = nncore.backward(
                value.net, vcache, nncore.squared_error_grad(pred, returns[mb])
            )
            nncore.adam_step(
                nncore.net_params(value.net), nncore.flat_grads(gvw, gvb), adam_value, cfg.value_lr
            )

            sums["policy_loss"] += loss
            sums["value_loss"] += v_loss
            sums["clip_frac"] += stats["clip_frac"]
            sums["entropy"] += stats["entropy"]
            n_minibatches += 1
    return PpoStats(
        policy_loss=sums["policy_loss"] / n_minibatches,
        value_loss=sums["value_loss"] / n_minibatches,
        clip_frac=sums["clip_frac"] / n_minibatches,
        entropy=sums["entropy"] / n_minibatches,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train_inquiry(
    dataset: PatientDataset,
    diag_model: DiagnosisModel,
    ontology: HpiOntology,
    cfg: PpoConfig,
    reward_params: RewardParams | None = None,
    disclosure: DisclosureProbs | None = None,
    horizon: int = 10,
    noise: float = 0.0,
    unmentioned_answer: str = UNMENTIONED_DENIED,
    history_width: int | None = None,
    log=None,
) -> tuple[InquiryPolicy, ValueNet, list[IterStats]]:
    """Full PPO run from fresh nets; returns the nets plus per-iteration stats."""
    cfg.validate()
    reward_params = reward_params if reward_params is not None else RewardParams()
    disclosure = disclosure if disclosure is not None else DisclosureProbs()
    reward_params.validate()
    disclosure.validate()
    width = history_width if history_width is not None else diag_model.history_width
    policy = new_inquiry_policy(
        width, dataset.m, ontology.n_questions, ontology.content_digest,
        hidden=cfg.hidden, seed=cfg.seed,
    )
    value = new_value_net(
        width, dataset.m, ontology.content_digest, hidden=cfg.hidden, seed=cfg.seed + 1
    )
    adam_policy = nncore.init_adam(nncore.net_params(policy.net))
    adam_value = nncore.init_adam(nncore.net_params(value.net))
    history: list[IterStats] = []
    for it in range(cfg.iterations):
        batch = collect_rollouts(
            policy, value, diag_model, dataset, ontology, disclosure, reward_params,
            cfg.episodes_per_iter, horizon, cfg.seed, iteration=it,
            noise=noise, unmentioned_answer=unmentioned_answer,
        )
        stats = ppo_update(policy, value, batch, cfg, adam_policy, adam_value, iteration=it)
        row = IterStats(
            iteration=it,
            mean_reward=batch.mean_episode_reward,
            mean_len=batch.mean_episode_len,
            policy_loss=stats.policy_loss,
            value_loss=stats.value_loss,
            clip_frac=stats.clip_frac,
            entropy=stats.entropy,
        )
        history.append(row)
        if log is not None:
            log(
                f"iter {it}: reward {row.mean_reward:.3f} len {row.mean_len:.1f} "
                f"clip {row.clip_frac:.2f} entropy {row.entropy:.3f}"
            )
    return policy, value, history


def write_training_log(rows: list[IterStats], path: str | Path) -> None:
    """CSV log, one row per iteration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["iter", "mean_reward", "mean_len", "policy_loss", "value_loss", "clip_frac", "entropy"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    f"{r.mean_reward:.6f}",
                    f"{r.mean_len:.6f}",
                    f"{r.policy_loss:.6f}",
                    f"{r.value_loss:.6f}",
                    f"{r.clip_frac:.6f}",
                    f"{r.entropy:.6f}",
                ]
            )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_policy(
    policy: InquiryPolicy,
    path: str | Path,
    reward_params: RewardParams | None = None,
    disclosure: DisclosureProbs | None = None,
) -> None:
    meta = {
        "kind": "inquiry-policy",
        "history_width": policy.history_width,
        "n_elements": policy.n_elements,
        "n_questions": policy.n_questions,
        "ontology_digest": policy.ontology_digest,
    }
    if reward_params is not None:
        meta["reward_params"] = {
            "time_penalty": reward_params.time_penalty,
            "first_level_weight": reward_params.first_level_weight,
            "negative_discount": reward_params.negative_discount,
        }
    if disclosure is not None:
        meta["disclosure_probs"] = {
            "p1p": disclosure.p1p, "p1n": disclosure.p1n,
            "p2p": disclosure.p2p, "p2n": disclosure.p2n,
        }
    policy.net.meta = meta
    nncore.save_net(policy.net, path)


def load_policy(path: str | Path) -> InquiryPolicy:
    net = nncore.load_net(path)
    if net.meta.get("kind") != "inquiry-policy":
        raise ParseError("checkpoint is not an inquiry policy")
    policy = InquiryPolicy(
        net,
        int(net.meta["history_width"]),
        int(net.meta["n_elements"]),
        int(net.meta["n_questions"]),
        net.meta["ontology_digest"],
    )
    if net.layer_dims[0] != policy.history_width + 3 * policy.n_elements:
        raise ParseError("checkpoint input width does not match recorded dimensions")
    if net.layer_dims[-1] != policy.n_questions:
        raise ParseError("checkpoint output width does not match question count")
    return policy


def save_value(value: ValueNet, path: str | Path) -> None:
    value.net.meta = {
        "kind": "inquiry-value",
        "history_width": value.history_width,
        "n_elements": value.n_elements,
        "ontology_digest": value.ontology_digest,
    }
    nncore.save_net(value.net, path)


def load_value(path: str | Path) -> ValueNet:
    net = nncore.load_net(path)
    if net.meta.get("kind") != "inquiry-value":
        raise ParseError("checkpoint is not a value net")
    value = ValueNet(
        net,
        int(net.meta["history_width"]),
        int(net.meta["n_elements"]),
        net.meta["ontology_digest"],
    )
    if net.layer_dims[0] != value.history_width + 3 * value.n_elements:
        raise ParseError("checkpoint input width does not match recorded dimensions")
    return value
