"""Counterfactual data augmentation via gendered word-pair substitution.

A pair table maps tokens to their swapped counterparts; bidirectional pairs
are active in both directions, one-way pairs only left-to-right. Augmentation
replaces every covered token in a sequence, preserving token count exactly.
Two-sided corpus augmentation keeps original and swapped copies side by side.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import PAD_ID, UNK_ID, BOS_ID, TokenSequence, Vocabulary, normalize_token

PAIR_FILE_NAMES = (
    "cda_pairs_names.tsv",
    "cda_pairs_general.tsv",
    "cda_pairs_extra.tsv",
    "cda_pairs_additional.tsv",
)


class PairTableError(ValueError):
    """Raised for malformed or conflicting pair-table rows."""


class ReplacementOOVError(ValueError):
    """Raised in strict mode when a replacement word is not in the vocabulary."""


@dataclass(frozen=True)
class WordPair:
    left: str
    right: str
    bidirectional: bool = True


@dataclass(frozen=True)
class WordPairTable:
    pairs: tuple[WordPair, ...]

    def __post_init__(self):
        lookup: dict[str, str] = {}

        def add(src: str, dst: str):
            if src in lookup and lookup[src] != dst:
                raise PairTableError(
                    f"token {src!r} maps to both {lookup[src]!r} and {dst!r}"
                )
            lookup[src] = dst

        for pair in self.pairs:
            if pair.left == pair.right:
                raise PairTableError(f"pair maps {pair.left!r} to itself")
            add(pair.left, pair.right)
            if pair.bidirectional:
                add(pair.right, pair.left)
        object.__setattr__(self, "_lookup", lookup)

    def replacement(self, token: str) -> str | None:
        return self._lookup.get(token)

    def __len__(self) -> int:
        return len(self.pairs)


def load_pairs(path, lowercase: bool = True) -> WordPairTable:
    """Parse a `left<TAB>right[<TAB>oneway]` file; '#' lines are comments.

    Tokens are normalized like corpus tokens. Rows repeating an existing
    consistent mapping are deduplicated; a row that gives a source token a
    second, different replacement raises an error naming token and line.
    """
    pairs: list[WordPair] = []
    seen: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise PairTableError(f"{path}: line {lineno}: expected 2 or 3 columns")
        left = normalize_token(cols[0], lowercase=lowercase)
        right = normalize_token(cols[1], lowercase=lowercase)
        if not left or not right:
            raise PairTableError(f"{path}: line {lineno}: empty token")
        oneway = len(cols) == 3
        if oneway and cols[2].strip() != "oneway":
            raise PairTableError(f"{path}: line {lineno}: unknown flag {cols[2]!r}")
        for src, dst in ((left, right),) + (((right, left),) if not oneway else ()):
            if src in seen and seen[src] != dst:
                raise PairTableError(
                    f"{path}: line {lineno}: token {src!r} already maps to "
                    f"{seen[src]!r}, cannot remap to {dst!r}"
                )
        if seen.get(left) == right and (oneway or seen.get(right) == left):
            continue  # exact duplicate row
        seen[left] = right
        if not oneway:
            seen[right] = left
        pairs.append(WordPair(left=left, right=right, bidirectional=not oneway))
    return WordPairTable(pairs=tuple(pairs))


def bundled_pair_table() -> WordPairTable:
    """Load and merge the four word-pair lists shipped with the package."""
    pairs: list[WordPair] = []
    seen: dict[str, str] = {}
    for name in PAIR_FILE_NAMES:
        table = load_pairs(Path(resources.files("fairpriv.data") / name))
        for pair in table.pairs:
            if seen.get(pair.left) == pair.right:
                continue
            seen[pair.left] = pair.right
            if pair.bidirectional:
                seen[pair.right] = pair.left
            pairs.append(pair)
    return WordPairTable(pairs=tuple(pairs))


def augment_sequence(
    seq: TokenSequence,
    table: WordPairTable,
    vocab: Vocabulary,
    oov_policy: str = "unk",
) -> TokenSequence:
    """Replace every token covered by the table; others pass through.

    Token count is preserved. A replacement word missing from the vocabulary
    maps to the unknown id under the default policy, or raises when
    oov_policy="error".
    """
    if oov_policy not in ("unk", "error"):
        raise ValueError(f"unknown oov_policy {oov_policy!r}")
    out = []
    for token_id in seq.ids:
        if token_id in (PAD_ID, UNK_ID, BOS_ID):
            out.append(token_id)
            continue
        token = vocab.token_of(token_id)
        replacement = table.replacement(token)
        if replacement is None:
            out.append(token_id)
            continue
        new_id = vocab.id_of(replacement)
        if new_id == UNK_ID and oov_policy == "error":
            raise ReplacementOOVError(
                f"replacement {replacement!r} for {token!r} is not in the vocabulary"
            )
        out.append(new_id)
    return TokenSequence(ids=tuple(out))


def augment_text(sentence: str, table: WordPairTable, lowercase: bool = True) -> str:
    """Word-substituted copy of a raw sentence (tokens come out normalized)."""
    from .corpus import tokenize_sentence

    words = tokenize_sentence(sentence, lowercase=lowercase)
    return " ".join(table.replacement(w) or w for w in words)


def augment_text_corpus(
    sentences: list[str],
    table: WordPairTable,
    mode: str = "two-sided",
    lowercase: bool = True,
) -> list[str]:
    """Sentence-level text augmentation with the same one/two-sided rules."""
    from .corpus import tokenize_sentence

    if mode not in ("one-sided", "two-sided"):
        raise ValueError(f"mode must be 'one-sided' or 'two-sided', got {mode!r}")
    out = []
    for sentence in sentences:
        swapped = augment_text(sentence, table, lowercase=lowercase)
        if mode == "one-sided":
            out.append(swapped)
            continue
        out.append(sentence)
        if swapped != " ".join(tokenize_sentence(sentence, lowercase=lowercase)):
            out.append(swapped)
    return out


def augment_corpus(
    chunks: list[TokenSequence],
    table: WordPairTable,
    vocab: Vocabulary,
    mode: str = "two-sided",
    oov_policy: str = "unk",
) -> list[TokenSequence]:
    """Augment a chunked corpus.

    one-sided: every chunk is replaced by its augmented form.
    two-sided: chunks whose augmented form differs contribute both copies,
    the augmented chunk immediately after its original; unchanged chunks
    appear once.
    """
    if mode not in ("one-sided", "two-sided"):
        raise ValueError(f"mode must be 'one-sided' or 'two-sided', got {mode!r}")
    out: list[TokenSequence] = []
    for chunk in chunks:
        augmented = augment_sequence(chunk, table, vocab, oov_policy=oov_policy)
        if mode == "one-sided":
            out.append(augmented)
        else:
            out.append(chunk)
            if augmented.ids != chunk.ids:
                out.append(augmented)
    return out
