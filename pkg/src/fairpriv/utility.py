"""Language-model utility: held-out perplexity plus the lms hook.

Perplexity is token-weighted over non-pad next-token targets, with each
chunk scored independently (contexts never cross chunk boundaries, matching
the chunked training regime, so numbers are comparable across models that
share a tokenization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .bias import CatTriplet, stereoset_score
from .corpus import TokenSequence
from .model import LMSnapshot


class UtilityError(ValueError):
    pass


@dataclass(frozen=True)
class PerplexityResult:
    perplexity: float
    token_count: int
    total_log_likelihood: float

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "token_count": self.token_count,
            "total_log_likelihood": self.total_log_likelihood,
        }


def perplexity(snapshot: LMSnapshot, sequences: list[TokenSequence]) -> PerplexityResult:
    """Corpus perplexity exp(-total log-likelihood / scored tokens).

    Pad-only sequences contribute nothing and are skipped, so adding them
    leaves the result unchanged; it is an error if nothing is scorable.
    """
    if not sequences:
        raise UtilityError("empty sequence list")
    scorable = [s for s in sequences if s.non_pad_count() > 0]
    if not scorable:
        raise UtilityError("no scorable sequences (all pad-only)")
    scores = snapshot.sequence_scores(scorable)
    # fsum is exactly rounded, making the result independent of sequence order
    total = math.fsum(s.total_log_likelihood for s in scores)
    count = sum(s.token_count for s in scores)
    if count == 0:
        raise UtilityError("no non-pad targets to score")
    return PerplexityResult(
        perplexity=math.exp(-total / count),
        token_count=count,
        total_log_likelihood=total,
    )


def utility_report(snapshot: LMSnapshot, sequences: list[TokenSequence],
                   triplets: list[CatTriplet]) -> dict:
    """The run-log utility record: perplexity plus the lms score."""
    ppl = perplexity(snapshot, sequences)
    lms = stereoset_score(snapshot, triplets).lms
    return {"perplexity": ppl.perplexity, "lms": lms}
