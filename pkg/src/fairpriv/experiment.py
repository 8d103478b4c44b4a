"""Experiment orchestration: arms, desk-scale profiles, run records, matrix.

Six arms combine debiasing and privacy objectives: baseline, cda, dropout,
dp, cda+dp, dropout+dp. cda arms train on a two-sided augmented corpus, the
dropout arms raise dropout from 0.1 to 0.15, dp arms train with per-example
clipping and Gaussian noise. Every arm is trained from the same seeded
initialization per seed, attacked per epoch and at the end of training,
then scored for bias and perplexity. Records are append-only JSON with a
config hash and a metrics hash so reruns can be compared exactly.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .attack import AttackConfig, AttackOutcome, run_attack, run_attack_cda, write_trace
from .bias import bias_scorecard
from .cda import WordPairTable, augment_corpus, bundled_pair_table
from .corpus import (
    CorpusSplit,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    load_corpus,
    make_synthetic_corpus,
    split_chunks,
    tokenize_and_chunk,
)
from .dp import DPConfig, TrainConfig, train
from .model import LMSnapshot, ModelConfig, TinyLM, save_checkpoint
from .utility import perplexity

ARM_LABELS = ("baseline", "cda", "dropout", "dp", "cda+dp", "dropout+dp")


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """Desk-scale defaults for one experiment configuration."""

    name: str
    # corpus
    n_sentences: int = 2000
    gender_skew: float = 0.75
    vocab_max: int = 2000
    chunk_size: int = 64
    max_chunks: int | None = None
    split_ratio: float = 0.8
    # model
    dim: int = 64
    layers: int = 2
    heads: int = 2
    lora_rank: int = 4
    dropout_base: float = 0.1
    dropout_debias: float = 0.15
    # training
    epochs: int = 3
    learning_rate: float = 1e-2
    batch_size: int = 2
    accumulation_nondp: int = 8
    accumulation_dp: int = 128
    optimizer: str = "adam"
    # privacy
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    # evaluation
    alpha: float = 0.10
    mia_epochs: str = "all"  # "all" | "final"
    permutations: int = 10_000


DESK = Profile(name="desk")

# deliberately memorizing configuration for leakage-direction checks: higher
# adapter rank so the baseline can actually memorize its 100 chunks
OVERFIT = Profile(
    name="overfit",
    n_sentences=600,
    chunk_size=32,
    max_chunks=100,
    lora_rank=16,
    epochs=50,
    learning_rate=2e-2,
    mia_epochs="final",
)

PROFILES = {"desk": DESK, "overfit": OVERFIT}


def profile_from(name: str, overrides: dict | None = None) -> Profile:
    if name not in PROFILES:
        raise ExperimentError(f"unknown profile {name!r}; expected one of {list(PROFILES)}")
    profile = PROFILES[name]
    if overrides:
        unknown = set(overrides) - set(asdict(profile))
        if unknown:
            raise ExperimentError(f"unknown profile fields: {sorted(unknown)}")
        profile = replace(profile, **overrides)
    return profile


@dataclass(frozen=True)
class ExperimentArm:
    label: str
    train_config: TrainConfig
    dp_config: DPConfig
    augmentation: str | None  # "two-sided" for cda arms
    dropout: float


def resolve_arm(label: str, profile: Profile, seed: int) -> ExperimentArm:
    """Map an arm label to its (augmentation, dropout, privacy) triple."""
    if label not in ARM_LABELS:
        raise ExperimentError(f"unknown arm {label!r}; expected one of {ARM_LABELS}")
    cda_on = label in ("cda", "cda+dp")
    dropout_on = label in ("dropout", "dropout+dp")
    dp_on = label in ("dp", "cda+dp", "dropout+dp")
    dropout = profile.dropout_debias if dropout_on else profile.dropout_base
    tc = TrainConfig(
        epochs=profile.epochs,
        learning_rate=profile.learning_rate,
        batch_size=profile.batch_size,
        accumulation_steps=profile.accumulation_dp if dp_on else profile.accumulation_nondp,
        optimizer=profile.optimizer,
        dropout=dropout,
        seed=seed,
    )
    dp = DPConfig(
        enabled=dp_on,
        clip_norm=profile.clip_norm,
        noise_multiplier=profile.noise_multiplier,
        delta=profile.delta,
    )
    return ExperimentArm(label=label, train_config=tc, dp_config=dp,
                         augmentation="two-sided" if cda_on else None, dropout=dropout)


@dataclass
class PreparedData:
    """Shared per-seed inputs so every arm trains on identical data."""

    seed: int
    sentences: list[str]
    vocab: Vocabulary
    chunks: list[TokenSequence]
    split: CorpusSplit
    table: WordPairTable


def prepare_data(profile: Profile, seed: int, corpus_path=None) -> PreparedData:
    if corpus_path is None:
        sentences = make_synthetic_corpus(seed, profile.n_sentences, profile.gender_skew)
    else:
        sentences = load_corpus(corpus_path)
    vocab = build_vocabulary(sentences, profile.vocab_max)
    chunks = tokenize_and_chunk(sentences, vocab, profile.chunk_size)
    if profile.max_chunks is not None:
        chunks = chunks[: profile.max_chunks]
    split = split_chunks(chunks, ratio=profile.split_ratio, seed=seed)
    return PreparedData(seed=seed, sentences=sentences, vocab=vocab, chunks=chunks,
                        split=split, table=bundled_pair_table())


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclass
class RunRecord:
    arm: str
    seed: int
    profile: str
    config: dict
    config_hash: str
    status: str = "incomplete"
    error: str | None = None
    epoch_metrics: list = field(default_factory=list)
    mia_per_epoch: list = field(default_factory=list)
    attack: dict | None = None
    attack_cda: dict | None = None
    bias: dict | None = None
    perplexity: dict | None = None
    perplexity_init: dict | None = None
    privacy: dict | None = None
    started_at: str = ""
    finished_at: str = ""

    def headline_recall(self) -> float | None:
        summary = self.attack_cda if self.attack_cda is not None else self.attack
        return None if summary is None else summary["recall"]

    def metrics_payload(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "status": self.status,
            "epoch_metrics": self.epoch_metrics,
            "mia_per_epoch": self.mia_per_epoch,
            "attack": self.attack,
            "attack_cda": self.attack_cda,
            "bias": self.bias,
            "perplexity": self.perplexity,
            "perplexity_init": self.perplexity_init,
            "privacy": self.privacy,
        }

    def metrics_hash(self) -> str:
        return _sha256(_canonical_json(self.metrics_payload()))

    def to_dict(self) -> dict:
        return {
            **self.metrics_payload(),
            "profile": self.profile,
            "config": self.config,
            "error": self.error,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "metrics_hash": self.metrics_hash(),
        }


def _arm_config_dict(arm: ExperimentArm, profile: Profile, seed: int) -> dict:
    return {
        "arm": arm.label,
        "seed": seed,
        "profile": asdict(profile),
        "train": asdict(arm.train_config),
        "dp": asdict(arm.dp_config),
        "augmentation": arm.augmentation,
        "dropout": arm.dropout,
    }


def run_arm(
    arm: ExperimentArm,
    profile: Profile,
    seed: int,
    data: PreparedData | None = None,
    out_dir=None,
) -> RunRecord:
    """Train one arm and evaluate leakage, bias and utility.

    Any error marks the record incomplete with the message attached instead
    of propagating, so a matrix run continues past a failed arm.
    """
    torch.set_num_threads(1)  # keeps reruns bit-identical
    config = _arm_config_dict(arm, profile, seed)
    record = RunRecord(
        arm=arm.label, seed=seed, profile=profile.name, config=config,
        config_hash=_sha256(_canonical_json(config)), started_at=_now(),
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if data is None:
            data = prepare_data(profile, seed)
        vocab, split, table = data.vocab, data.split, data.table
        model_cfg = ModelConfig(
            vocab_size=vocab.size, dim=profile.dim, layers=profile.layers,
            heads=profile.heads, context=profile.chunk_size, dropout=arm.dropout,
            lora_rank=profile.lora_rank, seed=seed,
        )
        model = TinyLM(model_cfg)
        reference = LMSnapshot.from_model(
            model, vocab, provenance={"role": "reference", "arm": arm.label, "seed": seed})

        if arm.augmentation is not None:
            train_chunks = augment_corpus(split.train, table, vocab, mode=arm.augmentation)
        else:
            train_chunks = split.train
        train_split = CorpusSplit(train=train_chunks, dev=split.dev, ratio=split.ratio)

        members = split.train  # original, pre-augmentation chunks
        nonmembers = split.dev
        attack_cfg = AttackConfig(alpha=profile.alpha)

        def on_epoch_end(epoch, snap, metrics):
            if out is not None:
                save_checkpoint(snap, out / f"epoch_{epoch:03d}.ckpt")
            if profile.mia_epochs == "all":
                std = run_attack(snap, reference, members, nonmembers, attack_cfg)
                entry = {"epoch": epoch, "recall": std.recall, "fpr": std.fpr}
                if arm.augmentation is not None:
                    adj = run_attack_cda(snap, reference, members, nonmembers, table,
                                         attack_cfg)
                    entry["recall_cda_adjusted"] = adj.recall
                    entry["fpr_cda_adjusted"] = adj.fpr
                record.mia_per_epoch.append(entry)

        result = train(
            model, train_split, arm.train_config, arm.dp_config, vocab,
            provenance={"arm": arm.label, "seed": seed},
            on_epoch_end=on_epoch_end,
            run_log_path=(out / "train_log.jsonl") if out is not None else None,
        )
        record.epoch_metrics = [m.to_dict() for m in result.metrics]
        record.privacy = result.privacy.to_dict()
        final = result.snapshot

        std = run_attack(final, reference, members, nonmembers, attack_cfg)
        record.attack = std.summary()
        adj: AttackOutcome | None = None
        if arm.augmentation is not None:
            adj = run_attack_cda(final, reference, members, nonmembers, table, attack_cfg)
            record.attack_cda = adj.summary()

        record.bias = bias_scorecard(
            final, permutations=profile.permutations, seed=seed).to_dict()
        record.perplexity = perplexity(final, nonmembers).to_dict()
        record.perplexity_init = perplexity(reference, nonmembers).to_dict()

        if out is not None:
            vocab.save(out / "vocab.txt")
            save_checkpoint(reference, out / "reference.ckpt")
            save_checkpoint(final, out / "final.ckpt")
            write_trace(std, out / "attack_standard.jsonl")
            if adj is not None:
                write_trace(adj, out / "attack_cda.jsonl")
        record.status = "complete"
    except Exception as exc:  # record the failure, let the matrix continue
        record.status = "incomplete"
        record.error = f"{type(exc).__name__}: {exc}"
    record.finished_at = _now()
    if out is not None:
        (out / "record.json").write_text(
            json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    return record


def run_matrix(
    arms: list[str] | None = None,
    seeds: list[int] | None = None,
    profile: Profile = DESK,
    out_dir=None,
    corpus_path=None,
) -> tuple[list[RunRecord], dict]:
    """One record per (arm, seed) plus bias/leakage/utility tables."""
    arms = list(ARM_LABELS) if arms is None else list(arms)
    seeds = [0] if seeds is None else list(seeds)
    if not arms or not seeds:
        raise ExperimentError("arms and seeds must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    records: list[RunRecord] = []
    for seed in seeds:
        try:
            data = prepare_data(profile, seed, corpus_path)
        except Exception as exc:
            for label in arms:
                arm = resolve_arm(label, profile, seed)
                rec = RunRecord(
                    arm=label, seed=seed, profile=profile.name,
                    config=_arm_config_dict(arm, profile, seed),
                    config_hash=_sha256(_canonical_json(_arm_config_dict(arm, profile, seed))),
                    status="incomplete", error=f"{type(exc).__name__}: {exc}",
                    started_at=_now(), finished_at=_now(),
                )
                records.append(rec)
            continue
        for label in arms:
            run_dir = (out / f"run_{label.replace('+', '-')}_s{seed}") if out else None
            try:
                arm = resolve_arm(label, profile, seed)
            except Exception as exc:
                records.append(RunRecord(
                    arm=label, seed=seed, profile=profile.name, config={"arm": label},
                    config_hash=_sha256(_canonical_json({"arm": label})),
                    status="incomplete", error=f"{type(exc).__name__}: {exc}",
                    started_at=_now(), finished_at=_now(),
                ))
                continue
            records.append(run_arm(arm, profile, seed, data=data, out_dir=run_dir))
    tables = build_tables(records)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "matrix.json").write_text(
            json.dumps({
                "records": [r.to_dict() for r in records],
                "tables": tables["raw"],
            }, indent=2) + "\n", encoding="utf-8")
        for name in ("bias", "leakage", "utility"):
            (out / f"table_{name}.txt").write_text(tables[name] + "\n", encoding="utf-8")
    return records, tables


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def _fmt(value, width=10, digits=3) -> str:
    if value is None:
        return "-".rjust(width)
    return f"{value:.{digits}f}".rjust(width)


def build_tables(records: list[RunRecord]) -> dict:
    """Aligned-text bias, leakage and utility tables plus raw numbers.

    Rows are arms (seed-averaged); incomplete runs are excluded from the
    averages and flagged in the row when no complete run exists.
    """
    by_arm: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_arm.setdefault(rec.arm, []).append(rec)
    arm_order = [a for a in ARM_LABELS if a in by_arm]
    arm_order += [a for a in by_arm if a not in arm_order]

    raw: dict = {"arms": {}}
    epochs_seen = sorted({m["epoch"] for rec in records for m in rec.mia_per_epoch})

    bias_lines = [f"{'arm':<12}{'SEAT avg':>10}{'ss':>10}{'BEC-Pro':>10}"]
    leak_header = f"{'arm':<12}" + "".join(f"{'ep ' + str(e):>10}" for e in epochs_seen)
    leak_lines = [leak_header + f"{'end':>10}"]
    util_lines = [f"{'arm':<12}{'perplexity':>12}{'lms':>10}"]

    for arm in arm_order:
        complete = [r for r in by_arm[arm] if r.status == "complete"]
        raw_arm: dict = {"n_complete": len(complete), "n_runs": len(by_arm[arm])}
        if not complete:
            flag = "incomplete"
            bias_lines.append(f"{arm:<12}{flag:>30}")
            leak_lines.append(f"{arm:<12}{flag:>{10 * (len(epochs_seen) + 1)}}")
            util_lines.append(f"{arm:<12}{flag:>22}")
            raw["arms"][arm] = raw_arm
            continue

        seat = _mean([r.bias["seat"]["average_abs_effect"] for r in complete])
        ss = _mean([r.bias["stereoset"]["ss"] for r in complete])
        becpro = _mean([r.bias["becpro"]["score"] for r in complete])
        bias_lines.append(f"{arm:<12}{_fmt(seat)}{_fmt(ss, digits=1)}{_fmt(becpro, digits=1)}")

        def epoch_recall(rec: RunRecord, epoch: int) -> float | None:
            for m in rec.mia_per_epoch:
                if m["epoch"] == epoch:
                    return m.get("recall_cda_adjusted", m["recall"])
            return None

        per_epoch = [_mean([epoch_recall(r, e) for r in complete]) for e in epochs_seen]
        end = _mean([r.headline_recall() for r in complete])
        leak_lines.append(
            f"{arm:<12}" + "".join(_fmt(v) for v in per_epoch) + _fmt(end))

        ppl = _mean([r.perplexity["perplexity"] for r in complete])
        lms = _mean([r.bias["stereoset"]["lms"] for r in complete])
        util_lines.append(f"{arm:<12}{_fmt(ppl, width=12, digits=2)}{_fmt(lms, digits=1)}")

        raw_arm.update({
            "seat_avg_abs_effect": seat,
            "stereoset_ss": ss,
            "becpro": becpro,
            "stereoset_lms": lms,
            "perplexity": ppl,
            "mia_recall_end": end,
            "mia_recall_per_epoch": dict(zip(map(str, epochs_seen), per_epoch)),
        })
        raw["arms"][arm] = raw_arm

    return {
        "bias": "\n".join(bias_lines),
        "leakage": "\n".join(leak_lines),
        "utility": "\n".join(util_lines),
        "raw": raw,
    }
