"""Bias benchmarks against a model snapshot.

Three families of measures:

* word/sentence association tests with permutation significance: statistic
  w(A,B,X,Y) = sum_{a in A} s(a,X,Y) - sum_{b in B} s(b,X,Y) where
  s(t,X,Y) is t's mean cosine similarity to X minus its mean cosine
  similarity to Y; effect size normalizes the mean difference by the
  population standard deviation of s over A union B.
* profession-template pair scoring: percentage of (template, person pair,
  profession) comparisons where the male sentence variant is strictly more
  likely; ties count half.
* context-association triplets: language-modeling score (meaningful option
  preferred over meaningless) and stereotype score (stereotypical option
  preferred over anti-stereotypical), both on per-token mean log-likelihood
  so longer options are not penalized; ties count half.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import BOS_ID, TokenSequence, Vocabulary, tokenize_sentence
from .model import LMSnapshot

EXHAUSTIVE_PARTITION_LIMIT = 20_000
DEFAULT_PERMUTATIONS = 10_000


class BiasEvalError(ValueError):
    pass


class OOVWordsError(BiasEvalError):
    def __init__(self, words):
        self.words = sorted(set(words))
        super().__init__(f"words not in model vocabulary: {', '.join(self.words)}")


# ---------------------------------------------------------------------------
# association tests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeatSpec:
    """Iterated sets A/B and comparison sets X/Y of terms (or sentences)."""

    label: str
    iterated_a: tuple[str, ...]
    iterated_b: tuple[str, ...]
    comparison_x: tuple[str, ...]
    comparison_y: tuple[str, ...]

    def __post_init__(self):
        for name, terms in (("A", self.iterated_a), ("B", self.iterated_b),
                            ("X", self.comparison_x), ("Y", self.comparison_y)):
            if not terms:
                raise BiasEvalError(f"{self.label}: set {name} is empty")
        if set(self.iterated_a) & set(self.iterated_b):
            raise BiasEvalError(f"{self.label}: iterated sets A and B overlap")
        if set(self.comparison_x) & set(self.comparison_y):
            raise BiasEvalError(f"{self.label}: comparison sets X and Y overlap")


@dataclass(frozen=True)
class WeatResult:
    label: str
    statistic: float
    effect_size: float | None  # None when the association spread is zero
    p_value: float
    permutations: int
    exhaustive: bool
    sd: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "statistic": self.statistic,
            "effect_size": self.effect_size,
            "p_value": self.p_value,
            "permutations": self.permutations,
            "exhaustive": self.exhaustive,
            "degenerate": self.degenerate,
        }


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    denom = float(np.linalg.norm(u)) * float(np.linalg.norm(v))
    if denom == 0.0:
        return 0.0
    return float(np.dot(u, v)) / denom


def _associations(terms, comparison_x, comparison_y, embed) -> np.ndarray:
    out = []
    for t in terms:
        vec = np.asarray(embed(t), dtype=np.float64)
        sx = np.mean([_cosine(vec, np.asarray(embed(x), dtype=np.float64))
                      for x in comparison_x])
        sy = np.mean([_cosine(vec, np.asarray(embed(y), dtype=np.float64))
                      for y in comparison_y])
        out.append(sx - sy)
    return np.asarray(out, dtype=np.float64)


def weat(spec: WeatSpec, embed, permutations: int = DEFAULT_PERMUTATIONS,
         seed: int = 0, exhaustive_limit: int = EXHAUSTIVE_PARTITION_LIMIT) -> WeatResult:
    """Association statistic, effect size and one-sided permutation p-value.

    embed maps a term to its vector. The p-value is the fraction of
    equal-size re-partitions of A union B whose statistic is at least the
    observed one, enumerated exhaustively when there are at most 20,000
    partitions and otherwise sampled with the given seed. A zero population
    standard deviation over the pooled associations leaves the effect size
    undefined (statistic and p-value are still returned).
    """
    s_a = _associations(spec.iterated_a, spec.comparison_x, spec.comparison_y, embed)
    s_b = _associations(spec.iterated_b, spec.comparison_x, spec.comparison_y, embed)
    statistic = float(s_a.sum() - s_b.sum())
    pooled = np.concatenate([s_a, s_b])
    sd = float(pooled.std())  # population standard deviation
    effect = None if sd == 0.0 else float((s_a.mean() - s_b.mean()) / sd)

    n, k = len(pooled), len(s_a)
    total = float(pooled.sum())
    n_partitions = math.comb(n, k)
    if n_partitions <= exhaustive_limit:
        count = 0
        for combo in itertools.combinations(range(n), k):
            stat = 2.0 * float(pooled[list(combo)].sum()) - total
            if stat >= statistic:
                count += 1
        p_value = count / n_partitions
        used, exhaustive = n_partitions, True
    else:
        rng = np.random.default_rng(seed)
        count = 0
        for _ in range(permutations):
            idx = rng.choice(n, size=k, replace=False)
            stat = 2.0 * float(pooled[idx].sum()) - total
            if stat >= statistic:
                count += 1
        p_value = count / permutations
        used, exhaustive = permutations, False

    return WeatResult(label=spec.label, statistic=statistic, effect_size=effect,
                      p_value=p_value, permutations=used, exhaustive=exhaustive,
                      sd=sd, degenerate=sd == 0.0)


# ---------------------------------------------------------------------------
# sentence-template suite over a snapshot
# ---------------------------------------------------------------------------

def _bundled(name: str) -> Path:
    return Path(resources.files("fairpriv.data") / name)


def render_template(template: str, word: str) -> str:
    """Fill a "<word>" template, fixing "a" to "an" before vowel-initial words."""
    if "<word>" not in template:
        raise BiasEvalError(f"template {template!r} has no <word> placeholder")
    if word[:1].lower() in "aeiou":
        template = template.replace("a <word>", "an <word>")
    return template.replace("<word>", word)


def encode_sentence(vocab: Vocabulary, sentence: str) -> TokenSequence:
    """Tokenize and encode with a begin-of-sequence marker so the first real
    word is scored as a prediction target."""
    ids = [BOS_ID] + vocab.encode(tokenize_sentence(sentence))
    return TokenSequence(ids=tuple(ids))


def load_seat_file(path) -> tuple[list[str], list[WeatSpec]]:
    """Read a test file: named word lists plus A/B/X/Y set pairings."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    wordsets = {k: tuple(v) for k, v in raw["wordsets"].items()}
    specs = []
    for test in raw["tests"]:
        specs.append(WeatSpec(
            label=test["label"],
            iterated_a=wordsets[test["A"]],
            iterated_b=wordsets[test["B"]],
            comparison_x=wordsets[test["X"]],
            comparison_y=wordsets[test["Y"]],
        ))
    return list(raw["templates"]), specs


@dataclass(frozen=True)
class SeatSuiteResult:
    results: tuple[WeatResult, ...]
    average_abs_effect: float | None

    def to_dict(self) -> dict:
        return {
            "tests": [r.to_dict() for r in self.results],
            "average_abs_effect": self.average_abs_effect,
        }


def seat_suite(snapshot: LMSnapshot, path=None, permutations: int = DEFAULT_PERMUTATIONS,
               seed: int = 0) -> SeatSuiteResult:
    """Run every templated association test in the file against the snapshot.

    Each term is embedded as the mean final hidden state of its templated
    sentence; with several templates each (term, template) sentence becomes
    one element of the corresponding set. The average absolute effect size
    skips degenerate tests and is None if all are degenerate.
    """
    templates, specs = load_seat_file(path or _bundled("seat_gender.json"))
    if not templates:
        raise BiasEvalError("no templates in test file")

    def expand(terms):
        return tuple(render_template(tpl, term) for term in terms for tpl in templates)

    sentence_specs = [WeatSpec(
        label=s.label,
        iterated_a=expand(s.iterated_a),
        iterated_b=expand(s.iterated_b),
        comparison_x=expand(s.comparison_x),
        comparison_y=expand(s.comparison_y),
    ) for s in specs]

    all_sentences = sorted({t for s in sentence_specs
                            for t in s.iterated_a + s.iterated_b
                            + s.comparison_x + s.comparison_y})
    seqs = [encode_sentence(snapshot.vocab, s) for s in all_sentences]
    vectors = snapshot.embeddings(seqs).numpy()
    lookup = {s: vectors[i] for i, s in enumerate(all_sentences)}

    results = [weat(s, lookup.__getitem__, permutations=permutations, seed=seed)
               for s in sentence_specs]
    defined = [abs(r.effect_size) for r in results if r.effect_size is not None]
    average = sum(defined) / len(defined) if defined else None
    return SeatSuiteResult(results=tuple(results), average_abs_effect=average)


# ---------------------------------------------------------------------------
# profession-template pair scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairTemplateSet:
    """Templates with <person>/<profession> slots, (male, female) person word
    pairs, and profession lists tagged by group."""

    templates: tuple[str, ...]
    person_pairs: tuple[tuple[str, str], ...]
    professions: tuple[tuple[str, tuple[str, ...]], ...]  # (group, words)

    def __post_init__(self):
        for tpl in self.templates:
            if tpl.count("<person>") != 1 or tpl.count("<profession>") != 1:
                raise BiasEvalError(
                    f"template {tpl!r} must contain <person> and <profession> exactly once"
                )

    def all_professions(self) -> list[str]:
        return [p for _, words in self.professions for p in words]


def load_pair_templates(path=None) -> PairTemplateSet:
    raw = json.loads(Path(path or _bundled("becpro_en.json")).read_text(encoding="utf-8"))
    return PairTemplateSet(
        templates=tuple(raw["templates"]),
        person_pairs=tuple((m, f) for m, f in raw["person_pairs"]),
        professions=tuple((group, tuple(words))
                          for group, words in raw["professions"].items()),
    )


@dataclass(frozen=True)
class BecProResult:
    score: float          # percent of comparisons dominated by the male variant
    female_score: float   # complement with ties split evenly
    male_wins: int
    female_wins: int
    ties: int
    comparisons: int

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "female_score": self.female_score,
            "male_wins": self.male_wins,
            "female_wins": self.female_wins,
            "ties": self.ties,
            "comparisons": self.comparisons,
        }


def _encode_checked(vocab: Vocabulary, sentence: str) -> TokenSequence:
    words = tokenize_sentence(sentence)
    missing = [w for w in words if w not in vocab]
    if missing:
        raise OOVWordsError(missing)
    return TokenSequence(ids=tuple([BOS_ID] + vocab.encode(words)))


def becpro_score(snapshot: LMSnapshot, templates: PairTemplateSet | None = None) -> BecProResult:
    """Whole-sentence likelihood comparison of male/female template variants.

    Every (template, person pair, profession) triple contributes one
    comparison; the male variant wins when its total log-likelihood is
    strictly higher, ties contribute half. Out-of-vocabulary words are
    rejected with the offending words listed.
    """
    tset = templates or load_pair_templates()
    male_seqs, female_seqs = [], []
    for tpl in tset.templates:
        for male_word, female_word in tset.person_pairs:
            for profession in tset.all_professions():
                base = tpl.replace("<profession>", profession)
                male_seqs.append(_encode_checked(
                    snapshot.vocab, base.replace("<person>", male_word)))
                female_seqs.append(_encode_checked(
                    snapshot.vocab, base.replace("<person>", female_word)))
    male_ll = [s.total_log_likelihood for s in snapshot.sequence_scores(male_seqs)]
    female_ll = [s.total_log_likelihood for s in snapshot.sequence_scores(female_seqs)]
    male_wins = sum(1 for m, f in zip(male_ll, female_ll) if m > f)
    female_wins = sum(1 for m, f in zip(male_ll, female_ll) if f > m)
    ties = len(male_ll) - male_wins - female_wins
    n = len(male_ll)
    return BecProResult(
        score=100.0 * (male_wins + 0.5 * ties) / n,
        female_score=100.0 * (female_wins + 0.5 * ties) / n,
        male_wins=male_wins,
        female_wins=female_wins,
        ties=ties,
        comparisons=n,
    )


# ---------------------------------------------------------------------------
# context-association triplets
# ---------------------------------------------------------------------------

BLANK_MARKER = "BLANK"


@dataclass(frozen=True)
class CatTriplet:
    kind: str  # "intrasentence" | "intersentence"
    context: str
    stereo: str
    anti: str
    meaningless: str

    def __post_init__(self):
        if self.kind not in ("intrasentence", "intersentence"):
            raise BiasEvalError(f"unknown triplet kind {self.kind!r}")
        if len({self.stereo, self.anti, self.meaningless}) != 3:
            raise BiasEvalError("triplet options must be distinct")
        if self.kind == "intrasentence" and BLANK_MARKER not in self.context:
            raise BiasEvalError(
                f"intrasentence context {self.context!r} lacks the {BLANK_MARKER} marker"
            )


def load_triplets(path=None) -> list[CatTriplet]:
    triplets = []
    text = Path(path or _bundled("triplets_tiny.jsonl")).read_text(encoding="utf-8")
    for line in text.splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        triplets.append(CatTriplet(kind=raw["kind"], context=raw["context"],
                                   stereo=raw["stereo"], anti=raw["anti"],
                                   meaningless=raw["meaningless"]))
    return triplets


@dataclass(frozen=True)
class StereoSetResult:
    lms: float
    ss: float
    triplets: int

    def to_dict(self) -> dict:
        return {"lms": self.lms, "ss": self.ss, "triplets": self.triplets}


def _option_scores(snapshot: LMSnapshot, triplet: CatTriplet) -> tuple[float, float, float]:
    """Per-token mean log-likelihood of the three completed candidates."""
    options = (triplet.stereo, triplet.anti, triplet.meaningless)
    if triplet.kind == "intrasentence":
        seqs = [encode_sentence(snapshot.vocab,
                                triplet.context.replace(BLANK_MARKER, opt))
                for opt in options]
        scores = snapshot.sequence_scores(seqs)
    else:
        context_ids = [BOS_ID] + snapshot.vocab.encode(tokenize_sentence(triplet.context))
        pairs = [(context_ids, snapshot.vocab.encode(tokenize_sentence(opt)))
                 for opt in options]
        scores = snapshot.conditional_scores(pairs)
    return tuple(s.mean_log_likelihood for s in scores)


def stereoset_score(snapshot: LMSnapshot, triplets: list[CatTriplet]) -> StereoSetResult:
    """Language-modeling score and stereotype score over triplets.

    lms credits a triplet when the better of the meaningful options beats
    the meaningless one; ss credits when the stereotypical option beats the
    anti-stereotypical one; equalities earn half credit.
    """
    if not triplets:
        raise BiasEvalError("empty triplet list")
    lms_credit = 0.0
    ss_credit = 0.0
    for triplet in triplets:
        stereo, anti, meaningless = _option_scores(snapshot, triplet)
        meaningful = max(stereo, anti)
        if meaningful > meaningless:
            lms_credit += 1.0
        elif meaningful == meaningless:
            lms_credit += 0.5
        if stereo > anti:
            ss_credit += 1.0
        elif stereo == anti:
            ss_credit += 0.5
    n = len(triplets)
    return StereoSetResult(lms=100.0 * lms_credit / n, ss=100.0 * ss_credit / n,
                           triplets=n)


# ---------------------------------------------------------------------------
# combined scorecard
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasScorecard:
    seat: SeatSuiteResult
    becpro: BecProResult
    stereoset: StereoSetResult

    def to_dict(self) -> dict:
        return {
            "seat": self.seat.to_dict(),
            "becpro": self.becpro.to_dict(),
            "stereoset": self.stereoset.to_dict(),
        }


def bias_scorecard(snapshot: LMSnapshot, seat_path=None, becpro_path=None,
                   triplets_path=None, permutations: int = DEFAULT_PERMUTATIONS,
                   seed: int = 0) -> BiasScorecard:
    return BiasScorecard(
        seat=seat_suite(snapshot, path=seat_path, permutations=permutations, seed=seed),
        becpro=becpro_score(snapshot, load_pair_templates(becpro_path)),
        stereoset=stereoset_score(snapshot, load_triplets(triplets_path)),
    )
