"""Plain-text corpus handling.

Loads one-sentence-per-line text files, builds word-level vocabularies,
tokenizes into fixed-length training chunks, splits train/dev, and generates
deterministic synthetic corpora for desk-scale experiments.

Tokenization is whitespace word-level with lowercasing on by default.
Leading and trailing punctuation is stripped from each token so that words
adjacent to punctuation ("carpenter.") still match vocabulary entries and
substitution tables; internal hyphens and apostrophes are kept.
"""

from __future__ import annotations

import hashlib
import json
import random
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

PAD_ID, UNK_ID, BOS_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>")

_STRIP_CHARS = string.punctuation + "‘’“”"


class CorpusError(ValueError):
    """Raised for malformed corpus or vocabulary inputs."""


def normalize_token(token: str, lowercase: bool = True) -> str:
    """Normalize one whitespace token; returns "" if nothing is left."""
    if lowercase:
        token = token.lower()
    return token.strip(_STRIP_CHARS)


def tokenize_sentence(sentence: str, lowercase: bool = True) -> list[str]:
    out = []
    for raw in sentence.split():
        tok = normalize_token(raw, lowercase=lowercase)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; ids are offset by the three special tokens.

    pad, unknown and begin-of-sequence are fixed at ids 0, 1, 2.
    """

    tokens: tuple[str, ...]

    def __post_init__(self):
        index = {tok: i + len(SPECIAL_TOKENS) for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens) + len(SPECIAL_TOKENS)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def token_of(self, token_id: int) -> str:
        if token_id < len(SPECIAL_TOKENS):
            return SPECIAL_TOKENS[token_id]
        return self.tokens[token_id - len(SPECIAL_TOKENS)]

    def encode(self, words: list[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.token_of(i) for i in ids]

    def content_hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return digest.hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=tuple(line for line in lines if line))


@dataclass(frozen=True)
class TokenSequence:
    """A fixed run of token ids; training chunks are pad-filled to chunk size."""

    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def non_pad_count(self) -> int:
        return sum(1 for i in self.ids if i != PAD_ID)


@dataclass(frozen=True)
class CorpusSplit:
    train: list[TokenSequence]
    dev: list[TokenSequence]
    ratio: float


def load_corpus(path, min_tokens: int = 4) -> list[str]:
    """Read one sentence per line, keeping sentences with >= min_tokens words.

    Token counting for the filter uses raw whitespace splitting, before any
    normalization. Decoding errors report the offending line number.
    """
    raw = Path(path).read_bytes()
    sentences = []
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"line {lineno}: not valid UTF-8 ({exc})") from exc
        if not text.strip():
            continue
        if len(text.split()) >= min_tokens:
            sentences.append(text.strip())
    return sentences


def build_vocabulary(sentences: list[str], max_size: int, lowercase: bool = True) -> Vocabulary:
    """Keep the most frequent tokens, ties broken lexicographically."""
    if max_size < len(SPECIAL_TOKENS) + 1:
        raise CorpusError(
            f"max_size must be at least {len(SPECIAL_TOKENS) + 1} "
            f"({len(SPECIAL_TOKENS)} specials plus one token), got {max_size}"
        )
    counts: dict[str, int] = {}
    for sentence in sentences:
        for tok in tokenize_sentence(sentence, lowercase=lowercase):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(tokens=tuple(keep))


def tokenize_and_chunk(
    sentences: list[str],
    vocab: Vocabulary,
    chunk_size: int,
    lowercase: bool = True,
) -> list[TokenSequence]:
    """Concatenate the tokenized stream and cut it into chunks of chunk_size.

    The final partial chunk is padded with the pad id; out-of-vocabulary
    tokens map to the unknown id. Empty input yields an empty list.
    """
    if chunk_size < 2:
        raise CorpusError(f"chunk_size must be >= 2, got {chunk_size}")
    stream: list[int] = []
    for sentence in sentences:
        stream.extend(vocab.encode(tokenize_sentence(sentence, lowercase=lowercase)))
    chunks = []
    for start in range(0, len(stream), chunk_size):
        piece = stream[start : start + chunk_size]
        if len(piece) < chunk_size:
            piece = piece + [PAD_ID] * (chunk_size - len(piece))
        chunks.append(TokenSequence(ids=tuple(piece)))
    return chunks


def split_chunks(chunks: list[TokenSequence], ratio: float = 0.8, seed: int = 0) -> CorpusSplit:
    """Seeded shuffle by chunk index, then split train/dev at the ratio."""
    if not 0.0 < ratio < 1.0:
        raise CorpusError(f"split ratio must be in (0, 1), got {ratio}")
    order = list(range(len(chunks)))
    random.Random(seed).shuffle(order)
    n_train = int(round(ratio * len(chunks)))
    train = [chunks[i] for i in order[:n_train]]
    dev = [chunks[i] for i in order[n_train:]]
    return CorpusSplit(train=train, dev=dev, ratio=ratio)


# ---------------------------------------------------------------------------
# synthetic corpus generation
# ---------------------------------------------------------------------------

MALE_PERSON_WORDS = ("he", "man", "brother", "son", "husband", "boyfriend",
                     "father", "uncle", "dad", "boy")
FEMALE_PERSON_WORDS = ("she", "woman", "sister", "daughter", "wife", "girlfriend",
                       "mother", "aunt", "mom", "girl")

# name pools cover the association-test names plus the substitution partners
# of every pair-table name used here (john<->grace, sarah<->ian), so that
# two-sided augmentation stays inside the generated vocabulary
MALE_NAMES = ("john", "paul", "mike", "kevin", "steve", "greg", "jeff", "bill", "ian")
FEMALE_NAMES = ("amy", "joan", "lisa", "sarah", "diana", "ann", "kate", "grace")

_MALE_TOPICS = ("career", "math", "science")
_FEMALE_TOPICS = ("family", "arts")

_PROFESSION_TEMPLATES = (
    "{person} is a {profession}",
    "{person} works as a {profession}",
    "{person} applied for the position of {profession}",
    "{person} the {profession} had a good day at work",
    "{person} wants to become a {profession}",
)
_TOPIC_TEMPLATES = (
    "{name} likes the {topic}",
    "{name} talked about the {topic}",
)
_FILLER_TEMPLATES_MALE = (
    "he said his day at work was good",
    "the man was at home with his son",
    "this is a person and he likes himself",
)
_FILLER_TEMPLATES_FEMALE = (
    "she said her day at work was good",
    "the woman was at home with her daughter",
    "this is a person and she likes herself",
)


def _bundled(name: str) -> Path:
    return Path(resources.files("fairpriv.data") / name)


def _word_pools():
    becpro = json.loads(_bundled("becpro_en.json").read_text(encoding="utf-8"))
    seat = json.loads(_bundled("seat_gender.json").read_text(encoding="utf-8"))
    professions = becpro["professions"]
    topics = {k: seat["wordsets"][k] for k in ("career", "family", "math", "arts", "science")}
    return professions, topics


def make_synthetic_corpus(seed: int, n_sentences: int, gender_skew: float = 0.5) -> list[str]:
    """Deterministic templated sentences over person, profession and topic words.

    gender_skew is the probability that a gendered person word co-occurs with
    its stereotyped profession group (and a gendered name with its stereotyped
    topic set). 0.5 is unskewed. The first sentences deterministically cover
    every profession, person word, name and topic word so that evaluation
    vocabulary is always present; same seed gives identical output.
    """
    if not 0.0 <= gender_skew <= 1.0:
        raise CorpusError(f"gender_skew must be in [0, 1], got {gender_skew}")
    if n_sentences <= 0:
        return []

    rng = random.Random(seed)
    professions, topics = _word_pools()
    all_topic_words = [w for words in topics.values() for w in words]
    sentences: list[str] = []

    def profession_sentence(profession: str | None = None, template: str | None = None) -> str:
        male = rng.random() < 0.5
        if profession is None:
            aligned = rng.random() < gender_skew
            group = ("male" if male else "female") if aligned else ("female" if male else "male")
            profession = rng.choice(professions[group])
        person = rng.choice(MALE_PERSON_WORDS if male else FEMALE_PERSON_WORDS)
        if template is None:
            template = rng.choice(_PROFESSION_TEMPLATES)
        return template.format(person=person, profession=profession)

    def topic_sentence(topic: str | None = None) -> str:
        male = rng.random() < 0.5
        if topic is None:
            aligned = rng.random() < gender_skew
            pools = (_MALE_TOPICS if male else _FEMALE_TOPICS) if aligned else (
                _FEMALE_TOPICS if male else _MALE_TOPICS)
            topic = rng.choice(topics[rng.choice(pools)])
        name = rng.choice(MALE_NAMES if male else FEMALE_NAMES)
        template = rng.choice(_TOPIC_TEMPLATES)
        return template.format(name=name, topic=topic)

    def filler_sentence() -> str:
        male = rng.random() < 0.5
        return rng.choice(_FILLER_TEMPLATES_MALE if male else _FILLER_TEMPLATES_FEMALE)

    # deterministic coverage block, then random fill
    coverage: list[str] = []
    coverage.extend(_FILLER_TEMPLATES_MALE)
    coverage.extend(_FILLER_TEMPLATES_FEMALE)
    coverage.append("he is an uncle and she is an aunt")
    n_prof = 0
    for group in ("male", "female", "balanced"):
        for profession in professions[group]:
            coverage.append(profession_sentence(profession, _PROFESSION_TEMPLATES[n_prof % 5]))
            n_prof += 1
    for person in MALE_PERSON_WORDS + FEMALE_PERSON_WORDS:
        coverage.append(f"{person} had a good day at work")
    for i, name in enumerate(MALE_NAMES + FEMALE_NAMES):
        coverage.append(_TOPIC_TEMPLATES[i % 2].format(name=name, topic=rng.choice(all_topic_words)))
    for i, word in enumerate(all_topic_words):
        name = (MALE_NAMES + FEMALE_NAMES)[i % (len(MALE_NAMES) + len(FEMALE_NAMES))]
        coverage.append(_TOPIC_TEMPLATES[i % 2].format(name=name, topic=word))

    sentences.extend(coverage[:n_sentences])
    while len(sentences) < n_sentences:
        kind = rng.random()
        if kind < 0.5:
            sentences.append(profession_sentence())
        elif kind < 0.8:
            sentences.append(topic_sentence())
        else:
            sentences.append(filler_sentence())
    return sentences
