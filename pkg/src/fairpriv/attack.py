"""Reference-based likelihood-ratio membership inference.

Each sample is scored under the target model and under a reference model
(the untrained initialization standing in for a generic pre-trained model);
the log likelihood ratio is log Pr_ref - log Pr_target over total sequence
log-likelihood. The decision threshold is the highest value at which the
false positive rate on held-out non-members stays within alpha; a sample is
called a member when its ratio falls strictly below the threshold. For
models trained on augmented data, the adjusted attack feeds each sample's
augmented form to the target while the reference still sees the original.
"""

from __future__ import annotations

import json
from bisect import bisect_left
from dataclasses import dataclass

from .cda import WordPairTable, augment_sequence
from .corpus import TokenSequence
from .model import LMSnapshot


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.10  # maximum false positive rate

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise AttackError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    split: str  # "member" | "nonmember"
    log_p_target: float
    log_p_reference: float
    log_lr: float
    member_pred: bool

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "split": self.split,
            "logpm": self.log_p_target,
            "logpr": self.log_p_reference,
            "loglr": self.log_lr,
            "member_pred": self.member_pred,
        }


@dataclass(frozen=True)
class AttackOutcome:
    records: tuple[SampleRecord, ...]
    threshold_log_lr: float
    alpha: float
    fpr: float
    recall: float
    n_members: int
    n_nonmembers: int
    variant: str  # "standard" | "cda-adjusted"

    def summary(self) -> dict:
        return {
            "t": self.threshold_log_lr,
            "alpha": self.alpha,
            "fpr": self.fpr,
            "recall": self.recall,
            "n_members": self.n_members,
            "n_nonmembers": self.n_nonmembers,
            "variant": self.variant,
        }


def score_samples(
    target: LMSnapshot,
    reference: LMSnapshot,
    samples: list[TokenSequence],
    target_transform=None,
) -> list[tuple[float, float, float]]:
    """Per-sample (log Pr_target, log Pr_reference, log LR).

    target_transform, when given, maps each sample to the form fed to the
    target model; the reference always scores the original sample.
    """
    if target.vocab_hash() != reference.vocab_hash():
        raise AttackError("target and reference snapshots use different vocabularies")
    target_inputs = [target_transform(s) for s in samples] if target_transform else samples
    target_scores = target.sequence_scores(target_inputs)
    reference_scores = reference.sequence_scores(samples)
    out = []
    for ts, rs in zip(target_scores, reference_scores):
        log_pm = ts.total_log_likelihood
        log_pr = rs.total_log_likelihood
        out.append((log_pm, log_pr, log_pr - log_pm))
    return out


def calibrate_threshold(nonmember_ratios: list[float], alpha: float) -> float:
    """Largest observed ratio t such that the fraction strictly below t is
    at most alpha. Classification uses ratio < t, so the achieved false
    positive rate never exceeds alpha.
    """
    if not nonmember_ratios:
        raise AttackError("cannot calibrate a threshold on an empty non-member set")
    if not 0.0 < alpha < 1.0:
        raise AttackError(f"alpha must be in (0, 1), got {alpha}")
    n = len(nonmember_ratios)
    ordered = sorted(nonmember_ratios)
    best = ordered[0]  # fraction strictly below the minimum is 0
    for candidate in dict.fromkeys(ordered):
        strictly_below = bisect_left(ordered, candidate)
        if strictly_below / n <= alpha:
            best = candidate
    return best


def _run(
    target: LMSnapshot,
    reference: LMSnapshot,
    members: list[TokenSequence],
    nonmembers: list[TokenSequence],
    cfg: AttackConfig,
    target_transform,
    variant: str,
) -> AttackOutcome:
    if not members:
        raise AttackError("empty member set")
    if not nonmembers:
        raise AttackError("empty non-member set")
    member_scores = score_samples(target, reference, members, target_transform)
    nonmember_scores = score_samples(target, reference, nonmembers, target_transform)
    threshold = calibrate_threshold([s[2] for s in nonmember_scores], cfg.alpha)
    records = []
    hits = 0
    for i, (log_pm, log_pr, log_lr) in enumerate(member_scores):
        pred = log_lr < threshold
        hits += pred
        records.append(SampleRecord(f"m{i}", "member", log_pm, log_pr, log_lr, pred))
    false_pos = 0
    for i, (log_pm, log_pr, log_lr) in enumerate(nonmember_scores):
        pred = log_lr < threshold
        false_pos += pred
        records.append(SampleRecord(f"n{i}", "nonmember", log_pm, log_pr, log_lr, pred))
    return AttackOutcome(
        records=tuple(records),
        threshold_log_lr=threshold,
        alpha=cfg.alpha,
        fpr=false_pos / len(nonmembers),
        recall=hits / len(members),
        n_members=len(members),
        n_nonmembers=len(nonmembers),
        variant=variant,
    )


def run_attack(
    target: LMSnapshot,
    reference: LMSnapshot,
    members: list[TokenSequence],
    nonmembers: list[TokenSequence],
    cfg: AttackConfig = AttackConfig(),
) -> AttackOutcome:
    """Standard attack: threshold from non-members, recall over members."""
    return _run(target, reference, members, nonmembers, cfg, None, "standard")


def run_attack_cda(
    target: LMSnapshot,
    reference: LMSnapshot,
    members_original: list[TokenSequence],
    nonmembers: list[TokenSequence],
    table: WordPairTable,
    cfg: AttackConfig = AttackConfig(),
) -> AttackOutcome:
    """Adjusted attack for targets trained on augmented data: the target
    scores each sample's augmented form (what it actually saw in training)
    while the reference scores the original sample.
    """
    transform = lambda seq: augment_sequence(seq, table, target.vocab)
    return _run(target, reference, members_original, nonmembers, cfg, transform,
                "cda-adjusted")


def write_trace(outcome: AttackOutcome, path) -> None:
    """One JSON line per sample record, then one summary line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in outcome.records:
            fh.write(json.dumps(record.to_dict()) + "\n")
        fh.write(json.dumps(outcome.summary()) + "\n")
