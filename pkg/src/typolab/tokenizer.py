"""Subword vocabulary training and greedy longest-match encoding.

Training merges the most frequent adjacent unit pair (BPE-style counting);
encoding is WordPiece-style greedy longest match with `##` continuation
markers. Word boundaries are tracked so word-level edits can be applied to
subword spans.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ContractViolation

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
CONTINUATION = "##"

_PUNCT = set(string.punctuation)


def normalize_words(text: str) -> list[str]:
    """Lowercase and split on whitespace, with each ASCII punctuation
    character split out as its own word."""
    words: list[str] = []
    for chunk in text.lower().split():
        current = ""
        for ch in chunk:
            if ch in _PUNCT:
                if current:
                    words.append(current)
                    current = ""
                words.append(ch)
            else:
                current += ch
        if current:
            words.append(current)
    return words


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractViolation("duplicate tokens in vocabulary")
        if tuple(self.id_to_token[:5]) != SPECIAL_TOKENS:
            raise ContractViolation("special tokens must occupy ids 0..4")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass
class TokenSequence:
    """Subword ids plus (start, end) subword ranges, one per source word."""

    ids: list[int]
    word_spans: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


def _word_units(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + c for c in word[1:]]


def _merge_token(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):] if right.startswith(CONTINUATION) else left + right


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Build a vocabulary of `target_size` tokens from a line iterable.

    Every character seen in the corpus enters the vocabulary in both
    word-initial and continuation form, so any rearrangement of corpus
    characters (e.g. a typo'd word) stays encodable. Remaining slots are
    filled by repeatedly merging the most frequent adjacent unit pair;
    ties break lexicographically for determinism.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(normalize_words(line))
    if not word_counts:
        raise ContractViolation("cannot train a vocabulary on an empty corpus")

    alphabet = sorted({c for w in word_counts for c in w})
    base_units = [c for c in alphabet] + [CONTINUATION + c for c in alphabet]
    minimum = len(SPECIAL_TOKENS) + len(base_units)
    if target_size < minimum:
        raise ContractViolation(
            f"target_size {target_size} below minimum {minimum} "
            f"(5 specials + {len(base_units)} single-character units)"
        )

    tokens = list(SPECIAL_TOKENS) + base_units
    seen = set(tokens)

    # Unit sequences per distinct word, weighted by word frequency.
    sequences: dict[str, list[str]] = {w: _word_units(w) for w in word_counts}
    while len(tokens) < target_size:
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, units in sequences.items():
            weight = word_counts[word]
            for a, b in zip(units, units[1:]):
                pair_counts[(a, b)] += weight
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        merged = _merge_token(*best)
        if merged not in seen:
            tokens.append(merged)
            seen.add(merged)
        for word, units in sequences.items():
            out: list[str] = []
            i = 0
            while i < len(units):
                if i + 1 < len(units) and (units[i], units[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(units[i])
                    i += 1
            sequences[word] = out
    return Vocab(tokens)


def encode_word(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match subword ids for one word.

    A character outside the vocabulary becomes a single UNK and matching
    continues, so encoding never fails."""
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.token_to_id:
                match = vocab.token_to_id[piece]
                break
            end -= 1
        if match is None:
            ids.append(UNK)
            start += 1
        else:
            ids.append(match)
            start = end
    return ids


def encode_words(
    words: Sequence[str], vocab: Vocab, max_words: int | None = None
) -> tuple[list[int], list[tuple[int, int]]]:
    """Subword ids and per-word spans for a word sequence, no specials."""
    if max_words is not None:
        words = words[:max_words]
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    for word in words:
        piece_ids = encode_word(word, vocab)
        spans.append((len(ids), len(ids) + len(piece_ids)))
        ids.extend(piece_ids)
    return ids, spans


def encode(text: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    """[CLS] subwords [SEP] with word spans over the interior positions.

    Truncation drops trailing whole words so that the sequence, including
    the two specials, fits in `max_len`.
    """
    words = normalize_words(text)
    ids, spans = encode_words(words, vocab)
    budget = max_len - 2
    while ids and len(ids) > budget:
        start, _ = spans.pop()
        ids = ids[:start]
    full = [CLS] + ids + [SEP]
    shifted = [(s + 1, e + 1) for s, e in spans]
    return TokenSequence(full, shifted)


def decode(seq: TokenSequence | Sequence[int], vocab: Vocab) -> str:
    """Inverse of encode on normalized text: specials dropped, `##` joined."""
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    words: list[str] = []
    for i in ids:
        token = vocab.id_to_token[i]
        if token in SPECIAL_TOKENS:
            continue
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)
