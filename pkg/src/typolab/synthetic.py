"""Synthetic topic-clustered retrieval datasets.

Each topic owns a disjoint word vocabulary; passages sample words from
their topic; queries sample terms from one concrete passage (so every
query has at least one relevant passage); a passage is relevant to a query
iff it contains every query term.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import write_trec_qrels, write_tsv_pairs
from .errors import ContractViolation
from .typo_editor import LOWERCASE


# Function-word fillers shared across topics; they follow the packaged
# stopword list, so evaluation-time typo queries never perturb them.
FILLER_WORDS = ("the", "of", "and", "to", "in", "is", "for", "with", "on", "that", "this", "from")


@dataclass
class SyntheticDatasetSpec:
    num_topics: int = 50
    passages_per_topic: int = 40
    vocab_size: int = 2000
    query_terms: int = 2
    num_train_queries: int = 500
    num_dev_queries: int = 200
    passage_len: int = 14
    distinct_words_per_passage: int = 4
    filler_rate: float = 0.5
    min_word_len: int = 4
    max_word_len: int = 8

    def __post_init__(self):
        if self.vocab_size < self.num_topics:
            raise ContractViolation("vocab_size must cover at least one word per topic")
        words_per_topic = self.vocab_size // self.num_topics
        if self.distinct_words_per_passage > words_per_topic:
            raise ContractViolation("distinct_words_per_passage exceeds the topic vocabulary")
        if self.query_terms > min(self.distinct_words_per_passage, self.passage_len):
            raise ContractViolation(
                f"query_terms {self.query_terms} exceeds what a topic passage can contain"
            )
        if not 0.0 <= self.filler_rate < 1.0:
            raise ContractViolation("filler_rate must lie in [0, 1)")
        if self.min_word_len < 3 or self.max_word_len < self.min_word_len:
            raise ContractViolation("word lengths must satisfy 3 <= min <= max")


_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _random_word(rng: np.random.Generator, min_len: int, max_len: int) -> str:
    """Syllabic (consonant-vowel) words, so vocabulary units share
    morpheme-like fragments the way natural words do."""
    length = int(rng.integers(min_len, max_len + 1))
    word = ""
    while len(word) < length:
        word += _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
        word += _VOWELS[int(rng.integers(len(_VOWELS)))]
    return word[:length] if length % 2 == 0 else word[: length + 1]


def _topic_vocabularies(spec: SyntheticDatasetSpec, rng: np.random.Generator) -> list[list[str]]:
    words_per_topic = spec.vocab_size // spec.num_topics
    total = words_per_topic * spec.num_topics
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < total:
        w = _random_word(rng, spec.min_word_len, spec.max_word_len)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return [words[t * words_per_topic : (t + 1) * words_per_topic] for t in range(spec.num_topics)]


def gen_synthetic_dataset(spec: SyntheticDatasetSpec, seed: int, out_dir) -> dict[str, Path]:
    """Write corpus.tsv, queries_{train,dev}.tsv and qrels_{train,dev}.txt.

    Byte-identical for identical (spec, seed)."""
    rng = np.random.default_rng([seed, 1234])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    topics = _topic_vocabularies(spec, rng)

    # Zipf-like within-topic word frequencies, mirroring natural corpora;
    # each passage repeats a small set of distinct content words, so masked
    # tokens often have a visible twin (as in real text).
    words_per_topic = len(topics[0])
    weights = 1.0 / (np.arange(words_per_topic) + 3.0)
    weights /= weights.sum()
    filler_weights = 1.0 / (np.arange(len(FILLER_WORDS)) + 1.0) ** 1.6
    filler_weights /= filler_weights.sum()

    passages: list[tuple[str, str, int]] = []  # pid, text, topic
    content_sets: list[set[str]] = []
    pid_counter = 0
    for t, vocab in enumerate(topics):
        for _ in range(spec.passages_per_topic):
            picked = rng.choice(len(vocab), size=spec.distinct_words_per_passage,
                                replace=False, p=weights)
            pool = [vocab[int(i)] for i in picked]
            words = []
            for _ in range(spec.passage_len):
                if rng.random() < spec.filler_rate:
                    words.append(FILLER_WORDS[int(rng.choice(len(FILLER_WORDS), p=filler_weights))])
                else:
                    words.append(pool[int(rng.integers(0, len(pool)))])
            passages.append((f"p{pid_counter:05d}", " ".join(words), t))
            content_sets.append(set(words) - set(FILLER_WORDS))
            pid_counter += 1

    def sample_queries(count: int, prefix: str) -> tuple[list[tuple[str, str]], dict]:
        queries = []
        qrels: dict[tuple[str, str], int] = {}
        for i in range(count):
            source = int(rng.integers(0, len(passages)))
            while len(content_sets[source]) < spec.query_terms:
                source = int(rng.integers(0, len(passages)))
            vocab_list = sorted(content_sets[source])
            take = rng.choice(len(vocab_list), size=spec.query_terms, replace=False)
            terms = [vocab_list[int(j)] for j in take]
            order = rng.permutation(spec.query_terms)
            terms = [terms[int(j)] for j in order]
            if rng.random() < 0.5:
                slot = int(rng.integers(0, len(terms) + 1))
                filler = FILLER_WORDS[int(rng.choice(len(FILLER_WORDS), p=filler_weights))]
                terms = terms[:slot] + [filler] + terms[slot:]
            qid = f"{prefix}{i:04d}"
            queries.append((qid, " ".join(terms)))
            term_set = set(terms) - set(FILLER_WORDS)
            for (pid, _, _), words in zip(passages, content_sets):
                if term_set <= words:
                    qrels[(qid, pid)] = 1
        return queries, qrels

    train_queries, train_qrels = sample_queries(spec.num_train_queries, "qtrain")
    dev_queries, dev_qrels = sample_queries(spec.num_dev_queries, "qdev")

    paths = {
        "corpus": out_dir / "corpus.tsv",
        "queries_train": out_dir / "queries_train.tsv",
        "queries_dev": out_dir / "queries_dev.tsv",
        "qrels_train": out_dir / "qrels_train.txt",
        "qrels_dev": out_dir / "qrels_dev.txt",
    }
    write_tsv_pairs(paths["corpus"], [(pid, text) for pid, text, _ in passages])
    write_tsv_pairs(paths["queries_train"], train_queries)
    write_tsv_pairs(paths["queries_dev"], dev_queries)
    write_trec_qrels(paths["qrels_train"], train_qrels)
    write_trec_qrels(paths["qrels_dev"], dev_qrels)
    return paths
