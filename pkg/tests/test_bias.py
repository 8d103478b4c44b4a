import itertools
import json
import math

import numpy as np
import pytest

from conftest import zero_all_parameters
from fairpriv.bias import (
    BiasEvalError,
    CatTriplet,
    OOVWordsError,
    PairTemplateSet,
    WeatSpec,
    becpro_score,
    bias_scorecard,
    load_pair_templates,
    load_triplets,
    render_template,
    seat_suite,
    stereoset_score,
    weat,
)
from fairpriv.corpus import build_vocabulary, tokenize_sentence
from fairpriv.model import LMSnapshot, ModelConfig, SequenceScore, TinyLM


def vector_embed(mapping):
    return lambda term: np.asarray(mapping[term], dtype=np.float64)


class TestWeat:
    def test_two_dimensional_hand_case(self):
        """A={(1,0)}, B={(0,1)}, X={(1,0)}, Y={(0,1)}: s(a)=1, s(b)=-1,
        statistic 2, pooled population sd 1, effect size 2.0."""
        spec = WeatSpec("hand", ("a",), ("b",), ("x",), ("y",))
        embed = vector_embed({"a": (1, 0), "b": (0, 1), "x": (1, 0), "y": (0, 1)})
        result = weat(spec, embed)
        assert abs(result.statistic - 2.0) < 1e-12
        assert abs(result.effect_size - 2.0) < 1e-12

    def test_identical_group_embeddings_zero_effect(self):
        spec = WeatSpec("zero", ("a1", "a2"), ("b1", "b2"), ("x",), ("y",))
        embed = vector_embed({
            "a1": (1, 0), "b1": (1, 0), "a2": (0.5, 0.5), "b2": (0.5, 0.5),
            "x": (1, 0), "y": (0, 1),
        })
        result = weat(spec, embed)
        assert result.effect_size == 0.0

    def test_degenerate_spread_surfaced_in_band(self):
        # every pooled embedding identical: all associations equal, sd zero
        spec = WeatSpec("degen", ("a1", "a2"), ("b1", "b2"), ("x",), ("y",))
        embed = vector_embed({t: (1, 1) for t in ("a1", "a2", "b1", "b2", "x", "y")})
        result = weat(spec, embed)
        assert result.degenerate
        assert result.effect_size is None
        assert result.statistic == 0.0
        assert result.p_value == 1.0  # every partition ties the observed 0

    def test_swap_antisymmetry_exact(self):
        rng = np.random.default_rng(0)
        names = [f"t{i}" for i in range(8)]
        mapping = {n: rng.normal(size=5) for n in names}
        mapping.update({"x1": rng.normal(size=5), "x2": rng.normal(size=5),
                        "y1": rng.normal(size=5), "y2": rng.normal(size=5)})
        spec = WeatSpec("fwd", tuple(names[:4]), tuple(names[4:]),
                        ("x1", "x2"), ("y1", "y2"))
        swapped = WeatSpec("rev", tuple(names[4:]), tuple(names[:4]),
                           ("x1", "x2"), ("y1", "y2"))
        f = weat(spec, vector_embed(mapping))
        r = weat(swapped, vector_embed(mapping))
        assert r.statistic == -f.statistic
        assert r.effect_size == -f.effect_size

    def test_uniform_scaling_invariance(self):
        rng = np.random.default_rng(1)
        terms = {f"t{i}": rng.normal(size=6) for i in range(12)}
        spec = WeatSpec("scale", ("t0", "t1", "t2"), ("t3", "t4", "t5"),
                        ("t6", "t7", "t8"), ("t9", "t10", "t11"))
        base = weat(spec, vector_embed(terms))
        scaled = weat(spec, vector_embed({k: 17.5 * v for k, v in terms.items()}))
        assert abs(base.statistic - scaled.statistic) < 1e-9
        assert abs(base.effect_size - scaled.effect_size) < 1e-9

    def test_exhaustive_p_value_matches_manual_enumeration(self):
        rng = np.random.default_rng(2)
        mapping = {f"t{i}": rng.normal(size=4) for i in range(6)}
        mapping.update({"x": rng.normal(size=4), "y": rng.normal(size=4)})
        spec = WeatSpec("small", ("t0", "t1", "t2"), ("t3", "t4", "t5"), ("x",), ("y",))
        result = weat(spec, vector_embed(mapping))
        assert result.exhaustive
        assert result.permutations == math.comb(6, 3)

        def s(t):
            v = mapping[t]
            cos = lambda a, b: float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            return cos(v, mapping["x"]) - cos(v, mapping["y"])

        pooled = [s(f"t{i}") for i in range(6)]
        observed = sum(pooled[:3]) - sum(pooled[3:])
        count = sum(
            1 for combo in itertools.combinations(range(6), 3)
            if sum(pooled[i] for i in combo) - sum(pooled[i] for i in range(6) if i not in combo)
            >= observed - 1e-15
        )
        assert abs(result.p_value - count / math.comb(6, 3)) < 1e-12

    def test_spec_invariants(self):
        with pytest.raises(BiasEvalError):
            WeatSpec("bad", ("a",), ("a",), ("x",), ("y",))
        with pytest.raises(BiasEvalError):
            WeatSpec("bad", ("a",), ("b",), ("x",), ("x",))
        with pytest.raises(BiasEvalError):
            WeatSpec("bad", (), ("b",), ("x",), ("y",))


class TestTemplates:
    def test_article_adjustment(self):
        assert render_template("this is a <word>", "executive") == "this is an executive"
        assert render_template("this is a <word>", "career") == "this is a career"

    def test_missing_placeholder_rejected(self):
        with pytest.raises(BiasEvalError):
            render_template("no slot here", "word")


def seat_snapshot(n_sentences=400):
    from fairpriv.corpus import make_synthetic_corpus

    sentences = make_synthetic_corpus(seed=11, n_sentences=n_sentences, gender_skew=0.9)
    vocab = build_vocabulary(sentences, max_size=2000)
    cfg = ModelConfig(vocab_size=vocab.size, dim=16, layers=1, heads=2, context=32,
                      dropout=0.0, lora_rank=1, seed=3)
    return LMSnapshot.from_model(TinyLM(cfg), vocab)


class TestSeatSuite:
    def test_bundled_file_runs_and_averages(self):
        snap = seat_snapshot()
        suite = seat_suite(snap)
        assert len(suite.results) == 6
        labels = [r.label for r in suite.results]
        assert labels == ["SEAT-6", "SEAT-6b", "SEAT-7", "SEAT-7b", "SEAT-8", "SEAT-8b"]
        defined = [abs(r.effect_size) for r in suite.results if r.effect_size is not None]
        assert suite.average_abs_effect == pytest.approx(sum(defined) / len(defined))
        assert all(r.exhaustive for r in suite.results)

    def test_zero_weight_model_degenerate_per_test(self):
        snap = seat_snapshot()
        zero_all_parameters(snap.model)
        suite = seat_suite(snap)
        assert all(r.degenerate for r in suite.results)
        assert suite.average_abs_effect is None

    def test_word_order_within_set_irrelevant(self, tmp_path):
        snap = seat_snapshot()
        # two files differing only in word order inside one set
        wordsets = {
            "g1": ["career", "business", "office"],
            "g2": ["home", "family", "wedding"],
            "m": ["man", "brother"],
            "f": ["woman", "sister"],
        }
        f1 = tmp_path / "a.json"
        f1.write_text(json.dumps({
            "templates": ["this is a <word>"],
            "wordsets": wordsets,
            "tests": [{"label": "t", "A": "g1", "B": "g2", "X": "m", "Y": "f"}],
        }), encoding="utf-8")
        wordsets2 = dict(wordsets, g1=list(reversed(wordsets["g1"])))
        f2 = tmp_path / "b.json"
        f2.write_text(json.dumps({
            "templates": ["this is a <word>"],
            "wordsets": wordsets2,
            "tests": [{"label": "t", "A": "g1", "B": "g2", "X": "m", "Y": "f"}],
        }), encoding="utf-8")
        r1 = seat_suite(snap, path=f1).results[0]
        r2 = seat_suite(snap, path=f2).results[0]
        assert abs(r1.statistic - r2.statistic) < 1e-12
        assert abs(r1.effect_size - r2.effect_size) < 1e-12


class StubBiasSnapshot:
    """Snapshot stand-in scoring sequences with a supplied total-ll function."""

    def __init__(self, vocab, total_fn):
        self.vocab = vocab
        self.total_fn = total_fn

    def vocab_hash(self):
        return self.vocab.content_hash()

    def sequence_scores(self, seqs):
        return [SequenceScore(total_log_likelihood=self.total_fn(s.ids),
                              token_count=max(len(s.ids) - 1, 1)) for s in seqs]

    def conditional_scores(self, pairs):
        return [SequenceScore(total_log_likelihood=self.total_fn(tuple(cont)),
                              token_count=max(len(cont), 1)) for _, cont in pairs]


BECPRO_WORDS = ("he she man woman is a the works as plumber nurse judge "
                "had good day at work")


def tiny_pair_template_set(professions=("plumber", "nurse")):
    return PairTemplateSet(
        templates=("<person> is a <profession>.",),
        person_pairs=(("he", "she"), ("man", "woman")),
        professions=(("any", tuple(professions)),),
    )


class TestBecPro:
    def test_uniform_model_exactly_fifty(self):
        tset = load_pair_templates()
        words = set()
        for tpl in tset.templates:
            words.update(tokenize_sentence(
                tpl.replace("<person>", "he").replace("<profession>", "x")))
        for m, f in tset.person_pairs:
            words.update([m, f])
        for p in tset.all_professions():
            words.update(tokenize_sentence(p))
        words.discard("x")
        vocab = build_vocabulary([" ".join(sorted(words))], max_size=4000)
        cfg = ModelConfig(vocab_size=vocab.size, dim=8, layers=1, heads=2,
                          context=32, dropout=0.0, lora_rank=1, seed=0)
        snap = LMSnapshot.from_model(zero_all_parameters(TinyLM(cfg)), vocab)
        result = becpro_score(snap, tset)
        assert result.score == 50.0
        assert result.ties == result.comparisons

    def test_always_male_preferred_is_hundred(self):
        vocab = build_vocabulary([BECPRO_WORDS], max_size=100)
        male_ids = {vocab.id_of("he"), vocab.id_of("man")}
        snap = StubBiasSnapshot(
            vocab, lambda ids: 1.0 if set(ids) & male_ids else 0.0)
        result = becpro_score(snap, tiny_pair_template_set())
        assert result.score == 100.0

    def test_two_of_three_male_wins(self):
        """Hand count: male preferred for two professions, female for one."""
        vocab = build_vocabulary([BECPRO_WORDS], max_size=100)
        male_ids = {vocab.id_of("he"), vocab.id_of("man")}
        judge = vocab.id_of("judge")

        def total(ids):
            male = bool(set(ids) & male_ids)
            if judge in ids:
                return 0.0 if male else 1.0
            return 1.0 if male else 0.0

        tset = PairTemplateSet(
            templates=("<person> is a <profession>.",),
            person_pairs=(("he", "she"),),
            professions=(("any", ("plumber", "nurse", "judge")),),
        )
        result = becpro_score(StubBiasSnapshot(vocab, total), tset)
        assert abs(result.score - 200.0 / 3.0) < 1e-9

    def test_complement_sums_to_hundred(self):
        vocab = build_vocabulary([BECPRO_WORDS], max_size=100)
        male_ids = {vocab.id_of("he"), vocab.id_of("man")}
        judge = vocab.id_of("judge")

        def total(ids):
            male = bool(set(ids) & male_ids)
            if judge in ids:
                return 0.5  # tie on this profession
            return 1.0 if male else 0.0

        tset = tiny_pair_template_set(professions=("plumber", "judge"))
        result = becpro_score(StubBiasSnapshot(vocab, total), tset)
        assert result.score + result.female_score == 100.0
        assert result.ties == 2

    def test_oov_rejected_with_words(self):
        vocab = build_vocabulary(["he she is a the"], max_size=50)
        snap = StubBiasSnapshot(vocab, lambda ids: 0.0)
        with pytest.raises(OOVWordsError, match="plumber"):
            becpro_score(snap, tiny_pair_template_set())

    def test_template_placeholders_validated(self):
        with pytest.raises(BiasEvalError):
            PairTemplateSet(templates=("<person> only",),
                            person_pairs=(("he", "she"),),
                            professions=(("any", ("x",)),))


TRIPLET_WORDS = "my sister brother is kind strict banana stone works nice BLANK"


def triplet_vocab():
    return build_vocabulary([TRIPLET_WORDS.lower()], max_size=100)


def intrasentence(stereo="kind", anti="strict", meaningless="banana"):
    return CatTriplet(kind="intrasentence", context="my sister is BLANK",
                      stereo=stereo, anti=anti, meaningless=meaningless)


class TestStereoSet:
    def test_ideal_model(self):
        """Meaningful options always beat the meaningless one and tie each
        other: lms 100, ss 50."""
        vocab = triplet_vocab()
        banana = vocab.id_of("banana")
        snap = StubBiasSnapshot(
            vocab, lambda ids: -10.0 if banana in ids else -1.0)
        result = stereoset_score(snap, [intrasentence() for _ in range(4)])
        assert result.lms == 100.0
        assert result.ss == 50.0

    def test_meaningless_preferred_gives_zero_lms(self):
        vocab = triplet_vocab()
        banana = vocab.id_of("banana")
        snap = StubBiasSnapshot(
            vocab, lambda ids: 0.0 if banana in ids else -5.0)
        result = stereoset_score(snap, [intrasentence()])
        assert result.lms == 0.0

    def test_three_of_four_stereo_preferred(self):
        """Hand-constructed likelihood order: stereo wins on the three
        "sister" triplets, the anti option wins on the "brother" one."""
        vocab = triplet_vocab()
        kind = vocab.id_of("kind")
        banana = vocab.id_of("banana")
        brother = vocab.id_of("brother")

        def total(ids):
            if banana in ids:
                return -10.0
            prefers_kind = brother not in ids
            if kind in ids:
                return -1.0 if prefers_kind else -2.0
            return -2.0 if prefers_kind else -1.0

        triplets = [intrasentence() for _ in range(3)] + [
            CatTriplet(kind="intrasentence", context="my brother is BLANK",
                       stereo="kind", anti="strict", meaningless="banana")]
        result = stereoset_score(StubBiasSnapshot(vocab, total), triplets)
        assert result.ss == 75.0

    def test_label_swap_complement_exact(self):
        vocab = triplet_vocab()
        kind, banana = vocab.id_of("kind"), vocab.id_of("banana")

        def total(ids):
            if banana in ids:
                return -10.0
            return -1.0 if kind in ids else -2.0

        snap = StubBiasSnapshot(vocab, total)
        triplets = [intrasentence() for _ in range(4)]
        swapped = [CatTriplet(kind=t.kind, context=t.context, stereo=t.anti,
                              anti=t.stereo, meaningless=t.meaningless)
                   for t in triplets]
        ss = stereoset_score(snap, triplets).ss
        ss_swapped = stereoset_score(snap, swapped).ss
        assert ss_swapped == 100.0 - ss

    def test_blank_marker_required(self):
        with pytest.raises(BiasEvalError, match="BLANK"):
            CatTriplet(kind="intrasentence", context="my sister is nice",
                       stereo="kind", anti="strict", meaningless="banana")

    def test_options_must_be_distinct(self):
        with pytest.raises(BiasEvalError):
            CatTriplet(kind="intrasentence", context="x BLANK",
                       stereo="kind", anti="kind", meaningless="banana")

    def test_intersentence_conditional_scoring(self):
        snap = seat_snapshot()
        triplet = CatTriplet(kind="intersentence", context="she is a secretary",
                             stereo="she likes the family",
                             anti="she likes the business",
                             meaningless="the a of is home")
        result = stereoset_score(snap, [triplet])
        assert 0.0 <= result.lms <= 100.0
        assert 0.0 <= result.ss <= 100.0
        again = stereoset_score(snap, [triplet])
        assert result == again

    def test_bundled_triplets_parse(self):
        triplets = load_triplets()
        assert len(triplets) == 4
        assert {t.kind for t in triplets} == {"intrasentence", "intersentence"}

    def test_empty_triplets_rejected(self):
        snap = StubBiasSnapshot(triplet_vocab(), lambda ids: 0.0)
        with pytest.raises(BiasEvalError):
            stereoset_score(snap, [])


class TestScorecard:
    def test_full_scorecard_on_synthetic_model(self):
        snap = seat_snapshot(n_sentences=600)
        card = bias_scorecard(snap, permutations=200, seed=0)
        assert 0.0 <= card.becpro.score <= 100.0
        assert 0.0 <= card.stereoset.lms <= 100.0
        assert 0.0 <= card.stereoset.ss <= 100.0
        assert len(card.seat.results) == 6
        payload = card.to_dict()
        assert set(payload) == {"seat", "becpro", "stereoset"}
