"""Command-line surface: data generation, training, evaluation, reporting,
and an interactive consultation where a human answers as the patient.

Every subcommand is deterministic given its flags and seeds. A flat
``key = value`` config file can preset any flag; explicit flags win.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import consult_env, evalharness, inquiry, nncore
from .consult_env import (
    DisclosureProbs,
    EnvState,
    UNMENTIONED_DENIED,
    UNMENTIONED_UNKNOWN,
)
from .diagnosis import (
    SlTrainConfig,
    load_diagnosis,
    predict,
    rank_from_probs,
    save_diagnosis,
    train_diagnosis,
)
from .errors import ConfigError, InquestError, IoError, ParseError
from .evalharness import (
    DialogueTrace,
    FIXED_ORDER,
    GreedyModelPolicy,
    RANDOM_LEGAL,
    baseline_policy,
    emit_report,
    evaluate,
    load_report,
    save_traces,
)
from .inquiry import (
    PpoConfig,
    RewardParams,
    load_policy,
    save_policy,
    save_value,
    train_inquiry,
    write_training_log,
)
from .ontology import (
    load_ontology,
    question_targets,
    save_ontology,
    validate as validate_ontology,
)
from .patientgen import (
    CONFIRMED,
    DENIED,
    PatientRecord,
    benchmark_genmodel,
    encode_history,
    generate_cohort,
    generate_ontology,
    load_dataset,
    save_dataset,
)

ENV_THREADS = "INQUEST_THREADS"


# ---------------------------------------------------------------------------
# Config file: flat `key = value` lines, # comments, flags win
# ---------------------------------------------------------------------------

def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ParseError(f"{path}:{lineno}: empty key")
        values[key] = raw.strip()
    return values


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def apply_config_defaults(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Turn config entries into parser defaults, respecting each flag's type."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = _parse_bool(raw)
        elif action.type is not None:
            defaults[dest] = action.type(raw)
        else:
            defaults[dest] = raw
    parser.set_defaults(**defaults)


def _int_list(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def _resolve_threads(value: int | None) -> int:
    if value is None:
        raw = os.environ.get(ENV_THREADS, "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("threads must be >= 1")
    return value  # execution is sequential either way; 1 is the verified mode


# ---------------------------------------------------------------------------
# Subcommand parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inquest",
        description="Simulated-consultation workbench: generate patients, "
        "train the disease ranker and the question policy, evaluate, consult.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file of flag presets")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker count (falls back to ${ENV_THREADS}; "
                       "execution is sequential, 1 is the reproducible mode)")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-ontology", help="write a synthetic two-level element tree")
    common(p)
    p.add_argument("--m1", type=int, default=30)
    p.add_argument("--m2", type=int, default=60)
    p.add_argument("--n-open", type=int, default=10)
    p.add_argument("--n-closed", type=int, default=None)
    p.add_argument("--out", required=True, help="directory for hpi.csv / questions.csv")

    p = sub.add_parser("gen-data", help="sample a patient cohort from the generative model")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--n-diseases", type=int, default=20)
    p.add_argument("--n-flags", type=int, default=8)
    p.add_argument("--genmodel-seed", type=int, default=0)

    p = sub.add_parser("train-diag", help="train the disease-ranking net")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=_int_list, default=(256, 256))
    p.add_argument("--history-width", type=int, default=64)
    p.add_argument("--no-augment", action="store_true",
                   help="train on full observations only")
    p.add_argument("--hide-lo", type=float, default=0.0)
    p.add_argument("--hide-hi", type=float, default=0.8)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train-inquiry", help="train the question policy with PPO")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--diag", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--value-out", default=None)
    p.add_argument("--log", default=None, help="CSV iteration log path")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--minibatch", type=int, default=64)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--update-epochs", type=int, default=4)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lam-gae", type=float, default=0.95)
    p.add_argument("--policy-lr", type=float, default=1e-3)
    p.add_argument("--value-lr", type=float, default=1e-3)
    p.add_argument("--entropy-coef", type=float, default=0.01)
    p.add_argument("--hidden", type=_int_list, default=(128, 128))
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--unmentioned-answer", choices=(UNMENTIONED_DENIED, UNMENTIONED_UNKNOWN),
                   default=UNMENTIONED_DENIED)
    p.add_argument("--time-penalty", type=float, default=0.5)
    p.add_argument("--first-level-weight", type=float, default=2.0)
    p.add_argument("--negative-discount", type=float, default=0.5)
    p.add_argument("--p1p", type=float, default=0.5)
    p.add_argument("--p1n", type=float, default=0.1)
    p.add_argument("--p2p", type=float, default=0.3)
    p.add_argument("--p2n", type=float, default=0.05)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="run consultations over a dataset and score them")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--diag", required=True)
    p.add_argument("--policy", default=None, help="trained policy checkpoint")
    p.add_argument("--baseline", choices=(RANDOM_LEGAL, FIXED_ORDER), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), default=None,
                   help="defaults to the --out extension, else json")
    p.add_argument("--traces", default=None, help="optional JSON-lines trace dump")
    p.add_argument("--k", type=_int_list, default=(1, 3, 5))
    p.add_argument("--group-k", type=int, default=1)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--unmentioned-answer", choices=(UNMENTIONED_DENIED, UNMENTIONED_UNKNOWN),
                   default=UNMENTIONED_DENIED)
    p.add_argument("--p1p", type=float, default=0.5)
    p.add_argument("--p1n", type=float, default=0.1)
    p.add_argument("--p2p", type=float, default=0.3)
    p.add_argument("--p2n", type=float, default=0.05)

    p = sub.add_parser("consult", help="interactive consultation; you answer as the patient")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--diag", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--baseline", choices=(RANDOM_LEGAL, FIXED_ORDER), default=None)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--transcript", default=None, help="save the session as a trace file")

    p = sub.add_parser("report", help="render stored evaluation reports")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")

    return parser


# ---------------------------------------------------------------------------
# Helpers shared by subcommands
# ---------------------------------------------------------------------------

def _load_pair(args):
    onto = load_ontology(args.ontology)
    ds = load_dataset(args.data, ontology=onto)
    return onto, ds


def _disclosure(args) -> DisclosureProbs:
    probs = DisclosureProbs(args.p1p, args.p1n, args.p2p, args.p2n)
    probs.validate()
    return probs


def _select_policy(args):
    if (args.policy is None) == (args.baseline is None):
        raise ConfigError("pass exactly one of --policy or --baseline")
    if args.policy is not None:
        return GreedyModelPolicy(load_policy(args.policy))
    return baseline_policy(args.baseline)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_ontology(args) -> int:
    onto = generate_ontology(args.m1, args.m2, n_open=args.n_open, n_closed=args.n_closed)
    report = validate_ontology(onto)
    if not report.ok:
        raise ConfigError("generated ontology failed validation: " + "; ".join(report.findings))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_ontology(onto, out)
    print(f"wrote {onto.n_elements} elements, {onto.n_questions} questions to {out}")
    return 0


def cmd_gen_data(args) -> int:
    onto = load_ontology(args.ontology)
    gm = benchmark_genmodel(
        onto, n_diseases=args.n_diseases, seed=args.genmodel_seed, n_flags=args.n_flags
    )
    ds = generate_cohort(gm, args.n, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} records over {ds.n_diseases} diseases to {args.out}")
    return 0


def cmd_train_diag(args) -> int:
    onto, ds = _load_pair(args)
    val = load_dataset(args.val_data, ontology=onto) if args.val_data else None
    cfg = SlTrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        augment=not args.no_augment,
        hide_lo=args.hide_lo,
        hide_hi=args.hide_hi,
        hidden=tuple(args.hidden),
        history_width=args.history_width,
    )
    log = None if args.quiet else print
    model, history = train_diagnosis(ds, cfg, val=val, log=log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_diagnosis(model, args.out)
    print(f"saved diagnosis checkpoint to {args.out} "
          f"(final train loss {history[-1].mean_loss:.4f})")
    return 0


def cmd_train_inquiry(args) -> int:
    onto, ds = _load_pair(args)
    diag = load_diagnosis(args.diag)
    cfg = PpoConfig(
        iterations=args.iterations,
        episodes_per_iter=args.episodes,
        clip_eps=args.clip_eps,
        update_epochs=args.update_epochs,
        minibatch_size=args.minibatch,
        gamma=args.gamma,
        lam_gae=args.lam_gae,
        policy_lr=args.policy_lr,
        value_lr=args.value_lr,
        entropy_coef=args.entropy_coef,
        hidden=tuple(args.hidden),
        seed=args.seed,
    )
    reward = RewardParams(args.time_penalty, args.first_level_weight, args.negative_discount)
    disclosure = _disclosure(args)
    log = None if args.quiet else print
    policy, value, history = train_inquiry(
        ds, diag, onto, cfg, reward_params=reward, disclosure=disclosure,
        horizon=args.horizon, noise=args.noise,
        unmentioned_answer=args.unmentioned_answer, log=log,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, args.out, reward_params=reward, disclosure=disclosure)
    if args.value_out:
        save_value(value, args.value_out)
    if args.log:
        write_training_log(history, args.log)
    print(f"saved policy checkpoint to {args.out} "
          f"(final mean episode reward {history[-1].mean_reward:.3f})")
    return 0


def cmd_eval(args) -> int:
    onto, ds = _load_pair(args)
    diag = load_diagnosis(args.diag)
    policy = _select_policy(args)
    report, traces = evaluate(
        policy, diag, ds, onto,
        disclosure=_disclosure(args),
        horizon=args.horizon,
        seed=args.seed,
        ks=args.k,
        noise=args.noise,
        unmentioned_answer=args.unmentioned_answer,
        group_k=args.group_k,
    )
    fmt = args.format or ("csv" if str(args.out).endswith(".csv") else "json")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    emit_report(report, args.out, fmt)
    if args.traces:
        save_traces(traces, args.traces)
    for k in sorted(report.recall_at_k):
        print(f"recall@{k}: {report.recall_at_k[k]:.4f}")
    print(f"rediscovery precision {report.rediscovery.precision:.4f} "
          f"recall {report.rediscovery.recall:.4f} f1 {report.rediscovery.f1:.4f}")
    print(f"wrote report to {args.out}")
    return 0


def cmd_report(args) -> int:
    reports = [load_report(path) for path in args.inputs]
    digests = {r.config_digest for r in reports}
    if len(digests) > 1:
        raise ConfigError(
            "reports come from different evaluation configs: " + ", ".join(sorted(digests))
        )
    lines = ["metric," + ",".join(Path(p).stem for p in args.inputs)]
    keys = sorted({k for r in reports for k in r.recall_at_k})
    for k in keys:
        lines.append(
            f"recall_at_{k}," + ",".join(f"{r.recall_at_k.get(k, float('nan')):.6f}"
                                         for r in reports)
        )
    for name in ("precision", "recall", "f1"):
        lines.append(
            f"rediscovery_{name},"
            + ",".join(f"{getattr(r.rediscovery, name):.6f}" for r in reports)
        )
    lines.append("n_patients," + ",".join(str(r.n_patients) for r in reports))
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {args.out}: {exc}") from exc
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Interactive consultation
# ---------------------------------------------------------------------------

class _SessionEnd(Exception):
    pass


def _ask(prompt, parse, input_fn, output_fn):
    """Prompt until the answer parses; EOF ends the session."""
    while True:
        try:
            raw = input_fn(prompt)
        except EOFError:
            raise _SessionEnd() from None
        try:
            return parse(raw)
        except ValueError:
            output_fn("please answer again")


def _parse_age(raw: str) -> int:
    age = int(raw.strip())
    if not 0 <= age <= 100:
        raise ValueError(raw)
    return age


def _parse_sex(raw: str) -> str:
    low = raw.strip().lower()
    if low in ("m", "male"):
        return "male"
    if low in ("f", "female"):
        return "female"
    raise ValueError(raw)


def _parse_yn(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("y", "yes"):
        return True
    if low in ("n", "no"):
        return False
    raise ValueError(raw)


def consult_repl(policy, diag_model, ontology, horizon: int = 10,
                 input_fn=input, output_fn=print) -> DialogueTrace:
    """Run one consultation with a human answering each question y/n.

    Open questions prompt once per unknown target element. A first-level
    "no" closes off that element's detail questions, mirroring the simulated
    environment. After the rounds (or EOF) the top-10 ranked diseases are
    printed with probabilities.
    """
    m = ontology.n_elements
    status = np.zeros(m, dtype=np.int8)
    rounds: list = []
    age, sex = 50, "female"
    try:
        age = _ask("patient age (0-100): ", _parse_age, input_fn, output_fn)
        sex = _ask("patient sex (m/f): ", _parse_sex, input_fn, output_fn)
    except _SessionEnd:
        output_fn("session ended before demographics; using neutral defaults")
    record = PatientRecord("human", age, sex, (), status.copy(), -1)
    width = getattr(policy, "history_width", None) or diag_model.history_width
    e_policy = encode_history(record, width)
    e_diag = encode_history(record, diag_model.history_width)
    rng = np.random.default_rng(0)  # baselines may sample; interaction stays seeded

    try:
        for _ in range(horizon):
            state = EnvState(
                status=status.copy(), asked=frozenset(q for q, _ in rounds),
                t=len(rounds), patient_id="human", horizon=horizon,
            )
            mask = consult_env.legal_actions(state, ontology)
            if not mask.any():
                output_fn("no further questions are possible")
                break
            action = policy.select(e_policy, state, mask, rng)
            targets = question_targets(ontology, action)
            revealed = []
            for t in sorted(targets):
                if status[t] != 0:
                    continue
                name = ontology.elements[t].name
                yes = _ask(f"round {len(rounds) + 1}: {name}? (y/n) ",
                           _parse_yn, input_fn, output_fn)
                status[t] = CONFIRMED if yes else DENIED
                revealed.append((t, int(status[t])))
                if not yes and ontology.elements[t].level == 1:
                    for child in ontology.children_of(t):
                        if status[child] == 0:
                            status[child] = DENIED
                            revealed.append((child, int(DENIED)))
            rounds.append((action, tuple(revealed)))
    except _SessionEnd:
        output_fn("input closed; ranking with what was gathered")

    probs = predict(diag_model, e_diag, status)
    ranking = rank_from_probs(probs)
    output_fn("top diseases:")
    for pos, d in enumerate(ranking[:10], start=1):
        output_fn(f"  {pos:2d}. {diag_model.disease_names[d]}  p={probs[d]:.4f}")
    return DialogueTrace(
        patient_id="human",
        rounds=tuple(rounds),
        final_observation=status,
        ranking=tuple(int(d) for d in ranking),
        true_label=-1,
        horizon=horizon,
    )


def cmd_consult(args) -> int:
    onto = load_ontology(args.ontology)
    diag = load_diagnosis(args.diag)
    if diag.ontology_digest != onto.content_digest:
        raise ConfigError("diagnosis checkpoint does not match this ontology")
    policy = _select_policy(args)
    trace = consult_repl(policy, diag, onto, horizon=args.horizon)
    if args.transcript:
        save_traces([trace], args.transcript)
        print(f"saved transcript to {args.transcript}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-ontology": cmd_gen_ontology,
    "gen-data": cmd_gen_data,
    "train-diag": cmd_train_diag,
    "train-inquiry": cmd_train_inquiry,
    "eval": cmd_eval,
    "consult": cmd_consult,
    "report": cmd_report,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        # peek at --config so file values become defaults before real parsing
        pre, _ = parser.parse_known_args(argv)
        if getattr(pre, "config", None):
            values = parse_config_file(pre.config)
            sub_name = pre.command
            for action in parser._actions:
                if isinstance(action, argparse._SubParsersAction):
                    apply_config_defaults(action.choices[sub_name], values)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except InquestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        _resolve_threads(args.threads)
        return _COMMANDS[args.command](args)
    except InquestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    console_main()
