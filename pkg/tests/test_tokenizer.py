from collections import Counter

import pytest

from typolab.errors import ContractViolation
from typolab.tokenizer import (
    CLS,
    SEP,
    UNK,
    TokenSequence,
    Vocab,
    decode,
    encode,
    encode_word,
    encode_words,
    normalize_words,
    train_vocab,
)


def reference_first_merge(words: dict[str, int]) -> tuple[str, str]:
    """Hand-rolled pair counting to derive the expected first merge."""
    pair_counts: Counter = Counter()
    for word, count in words.items():
        units = [word[0]] + ["##" + c for c in word[1:]]
        for a, b in zip(units, units[1:]):
            pair_counts[(a, b)] += count
    best = max(pair_counts.values())
    return min(p for p, c in pair_counts.items() if c == best)


class TestTrainVocab:
    def test_small_corpus_contains_characters_and_merge(self):
        vocab = train_vocab(["aaab aab"], 20)
        assert "a" in vocab.token_to_id
        assert "b" in vocab.token_to_id
        left, right = reference_first_merge({"aaab": 1, "aab": 1})
        merged = left + right[2:]
        assert merged in vocab.token_to_id

    def test_specials_occupy_first_ids(self):
        vocab = train_vocab(["hello world"], 60)
        assert vocab.id_to_token[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

    def test_no_unk_for_corpus_alphabet(self):
        vocab = train_vocab(["retrieval of dense passages", "typos break tokenizers"], 80)
        # any rearrangement of corpus characters stays encodable
        for word in ("densse", "retrevial", "pasagse", "zbreak"):
            assert UNK not in encode_word(word, vocab)

    def test_target_too_small(self):
        with pytest.raises(ContractViolation):
            train_vocab(["abc"], 7)

    def test_empty_corpus(self):
        with pytest.raises(ContractViolation):
            train_vocab([], 100)

    def test_deterministic(self):
        lines = ["the quick brown fox", "jumps over the lazy dog"]
        a = train_vocab(lines, 70)
        b = train_vocab(lines, 70)
        assert a.id_to_token == b.id_to_token

    def test_save_load_roundtrip(self, tmp_path):
        vocab = train_vocab(["alpha beta gamma"], 50)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.id_to_token == vocab.id_to_token


@pytest.fixture(scope="module")
def vocab():
    lines = [
        "dense retrieval with typos",
        "typos hurt dense retrieval!",
        "the encoder reads the passage, carefully",
    ]
    return train_vocab(lines, 130)


class TestEncode:

    def test_roundtrip_on_corpus_text(self, vocab):
        for text in ("dense retrieval with typos", "The Encoder  reads", "passage, typos!"):
            seq = encode(text, vocab)
            assert decode(seq, vocab) == " ".join(normalize_words(text))

    def test_specials_wrap_sequence(self, vocab):
        seq = encode("dense typos", vocab)
        assert seq.ids[0] == CLS and seq.ids[-1] == SEP

    def test_spans_partition_interior(self, vocab):
        seq = encode("the encoder reads the passage", vocab)
        positions = [p for start, end in seq.word_spans for p in range(start, end)]
        assert positions == list(range(1, len(seq.ids) - 1))

    def test_typo_changes_ids(self, vocab):
        clean = encode_word("retrieval", vocab)
        typo = encode_word("retreival", vocab)
        assert clean != typo

    def test_empty_string(self, vocab):
        seq = encode("", vocab)
        assert seq.ids == [CLS, SEP]
        assert seq.word_spans == []

    def test_truncation_drops_whole_words(self, vocab):
        text = "dense retrieval with typos " * 20
        seq = encode(text, vocab, max_len=16)
        assert len(seq.ids) <= 16
        positions = [p for start, end in seq.word_spans for p in range(start, end)]
        assert positions == list(range(1, len(seq.ids) - 1))

    def test_unknown_character_falls_back_to_unk(self, vocab):
        assert encode_word("preserveé", vocab) == [UNK]


class TestNormalization:
    def test_lowercase_and_punct_split(self):
        assert normalize_words("Hello, World!") == ["hello", ",", "world", "!"]

    def test_whitespace_collapse(self):
        assert normalize_words("  a\t b\n") == ["a", "b"]

    def test_encode_words_spans(self):
        vocab = train_vocab(["abc abd"], 30)
        ids, spans = encode_words(["abc", "abd"], vocab)
        assert len(spans) == 2
        assert spans[0][0] == 0
        assert spans[-1][1] == len(ids)
