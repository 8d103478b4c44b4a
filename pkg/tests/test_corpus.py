import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairpriv.corpus import (
    BOS_ID,
    PAD_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    CorpusError,
    Vocabulary,
    build_vocabulary,
    load_corpus,
    make_synthetic_corpus,
    split_chunks,
    tokenize_and_chunk,
    tokenize_sentence,
)


class TestLoadCorpus:
    def test_min_tokens_filter(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("a b c\na b c d\n", encoding="utf-8")
        assert load_corpus(f, min_tokens=4) == ["a b c d"]

    def test_empty_file(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("", encoding="utf-8")
        assert load_corpus(f, min_tokens=4) == []

    def test_min_tokens_zero_keeps_all(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("x\ny z\n", encoding="utf-8")
        assert load_corpus(f, min_tokens=0) == ["x", "y z"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nope.txt")

    def test_bad_utf8_names_line(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_bytes(b"good line here ok\n\xff\xfe bad\n")
        with pytest.raises(CorpusError, match="line 2"):
            load_corpus(f)

    def test_file_order_preserved(self, tmp_path):
        f = tmp_path / "c.txt"
        f.write_text("one two three four\nfive six seven eight\n", encoding="utf-8")
        assert load_corpus(f) == ["one two three four", "five six seven eight"]


class TestTokenizer:
    def test_lowercase_and_punct_strip(self):
        assert tokenize_sentence("This man, a Carpenter.") == ["this", "man", "a", "carpenter"]

    def test_internal_punctuation_kept(self):
        assert tokenize_sentence("speech-language ma'am") == ["speech-language", "ma'am"]

    def test_punct_only_token_dropped(self):
        assert tokenize_sentence("hello -- world") == ["hello", "world"]


class TestBuildVocabulary:
    def test_contains_tokens_and_specials(self):
        vocab = build_vocabulary(["a a b"], max_size=10)
        assert "a" in vocab and "b" in vocab
        assert vocab.size == 2 + len(SPECIAL_TOKENS)
        assert (PAD_ID, UNK_ID, BOS_ID) == (0, 1, 2)

    def test_truncation_by_frequency(self):
        vocab = build_vocabulary(["b a", "a"], max_size=4)
        assert "a" in vocab and "b" not in vocab

    def test_lexicographic_tie_break(self):
        vocab = build_vocabulary(["b a"], max_size=4)
        assert "a" in vocab and "b" not in vocab

    def test_max_size_too_small(self):
        with pytest.raises(CorpusError):
            build_vocabulary(["a"], max_size=3)

    def test_token_id_bijection(self):
        vocab = build_vocabulary(["c b a"], max_size=10)
        for tok in vocab.tokens:
            assert vocab.token_of(vocab.id_of(tok)) == tok

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocabulary(["the cat sat"], max_size=10)
        vocab.save(tmp_path / "v.txt")
        again = Vocabulary.load(tmp_path / "v.txt")
        assert again.tokens == vocab.tokens
        assert again.content_hash() == vocab.content_hash()


class TestTokenizeAndChunk:
    def test_padding_arithmetic(self):
        vocab = build_vocabulary(["a b c d e"], max_size=20)
        chunks = tokenize_and_chunk(["a b c d e a b c d e"], vocab, chunk_size=4)
        assert len(chunks) == 3
        assert list(chunks[-1].ids).count(PAD_ID) == 2

    def test_oov_maps_to_unk(self):
        vocab = build_vocabulary(["a b"], max_size=10)
        chunks = tokenize_and_chunk(["a zzz"], vocab, chunk_size=2)
        assert chunks[0].ids == (vocab.id_of("a"), UNK_ID)

    def test_exact_division_no_padding(self):
        vocab = build_vocabulary(["a b c d"], max_size=20)
        chunks = tokenize_and_chunk(["a b c d a b c d"], vocab, chunk_size=4)
        assert len(chunks) == 2
        assert all(PAD_ID not in c.ids for c in chunks)

    def test_empty_input(self):
        vocab = build_vocabulary(["a"], max_size=10)
        assert tokenize_and_chunk([], vocab, chunk_size=4) == []

    def test_chunk_size_too_small(self):
        vocab = build_vocabulary(["a"], max_size=10)
        with pytest.raises(CorpusError):
            tokenize_and_chunk(["a"], vocab, chunk_size=1)

    @given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=60),
           st.integers(min_value=2, max_value=9))
    @settings(max_examples=50, deadline=None)
    def test_chunking_conserves_tokens(self, tokens, chunk_size):
        vocab = build_vocabulary([" ".join("abcde")], max_size=20)
        chunks = tokenize_and_chunk([" ".join(tokens)], vocab, chunk_size)
        assert sum(c.non_pad_count() for c in chunks) == len(tokens)
        assert all(c.length == chunk_size for c in chunks)

    def test_roundtrip_detokenize(self):
        vocab = build_vocabulary(["the cat sat on the mat"], max_size=20)
        words = ["the", "cat", "sat", "on", "the", "mat"]
        chunks = tokenize_and_chunk([" ".join(words)], vocab, chunk_size=6)
        assert vocab.decode(chunks[0].ids) == words


class TestSplit:
    def test_ratio_within_one_sequence(self):
        vocab = build_vocabulary(["a b"], max_size=10)
        chunks = tokenize_and_chunk(["a b " * 50], vocab, chunk_size=4)
        split = split_chunks(chunks, ratio=0.8, seed=0)
        total = len(split.train) + len(split.dev)
        assert total == len(chunks)
        assert abs(len(split.train) - 0.8 * total) <= 1

    def test_train_dev_disjoint_and_deterministic(self):
        vocab = build_vocabulary(["a b c d"], max_size=10)
        chunks = tokenize_and_chunk(["a b c d " * 25], vocab, chunk_size=4)
        s1 = split_chunks(chunks, ratio=0.8, seed=7)
        s2 = split_chunks(chunks, ratio=0.8, seed=7)
        assert [c.ids for c in s1.train] == [c.ids for c in s2.train]
        assert [c.ids for c in s1.dev] == [c.ids for c in s2.dev]
        ids_train = [c.ids for c in s1.train]
        assert all(c.ids not in ids_train for c in s1.dev) or len(set(map(tuple, ids_train))) < len(ids_train)


class TestSyntheticCorpus:
    def test_determinism(self):
        a = make_synthetic_corpus(seed=1, n_sentences=500, gender_skew=0.5)
        b = make_synthetic_corpus(seed=1, n_sentences=500, gender_skew=0.5)
        assert a == b

    def test_different_seed_differs(self):
        a = make_synthetic_corpus(seed=1, n_sentences=500, gender_skew=0.5)
        b = make_synthetic_corpus(seed=2, n_sentences=500, gender_skew=0.5)
        assert a != b

    def test_zero_sentences(self):
        assert make_synthetic_corpus(seed=1, n_sentences=0, gender_skew=0.5) == []

    def test_skew_bounds(self):
        with pytest.raises(CorpusError):
            make_synthetic_corpus(seed=1, n_sentences=10, gender_skew=1.5)

    def test_unskewed_cooccurrence_near_half(self):
        """Counting oracle over the generated text: among sentences pairing a
        male person word with a grouped profession, the male-profession share
        sits within five points of one half when gender_skew is 0.5."""
        from fairpriv.corpus import MALE_PERSON_WORDS, _word_pools

        sentences = make_synthetic_corpus(seed=3, n_sentences=4000, gender_skew=0.5)
        professions, _ = _word_pools()
        male_prof = set(professions["male"])
        female_prof = set(professions["female"])
        male_words = set(MALE_PERSON_WORDS)
        male_person_total = 0
        male_person_male_prof = 0
        for s in sentences:
            tokens = s.split()
            if not (set(tokens) & male_words):
                continue
            hit_male = any(p in s for p in male_prof)
            hit_female = any(p in s for p in female_prof)
            if hit_male == hit_female:
                continue
            male_person_total += 1
            male_person_male_prof += hit_male
        assert male_person_total > 500
        share = male_person_male_prof / male_person_total
        assert 0.45 <= share <= 0.55

    def test_byte_identical_pipeline(self):
        """Same corpus, seed and config give a byte-identical split."""
        def pipeline():
            sents = make_synthetic_corpus(seed=5, n_sentences=300, gender_skew=0.6)
            vocab = build_vocabulary(sents, max_size=500)
            chunks = tokenize_and_chunk(sents, vocab, chunk_size=16)
            return split_chunks(chunks, ratio=0.8, seed=5), vocab

        (s1, v1), (s2, v2) = pipeline(), pipeline()
        assert v1.tokens == v2.tokens
        assert [c.ids for c in s1.train] == [c.ids for c in s2.train]
        assert [c.ids for c in s1.dev] == [c.ids for c in s2.dev]
