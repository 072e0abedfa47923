"""Lexical BM25 index, brute-force dense search, and negative mining."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as modeling
from .errors import ContractViolation
from .model import ModelConfig
from .tokenizer import CLS, SEP, Vocab, encode_words, normalize_words

logger = logging.getLogger(__name__)


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avgdl: float
    num_docs: int

    @classmethod
    def build(cls, corpus: dict[str, str]) -> "InvertedIndex":
        if not corpus:
            raise ContractViolation("cannot index an empty corpus")
        postings: dict[str, dict[str, int]] = {}
        doc_len = {}
        for pid, text in corpus.items():
            terms = normalize_words(text)
            doc_len[pid] = len(terms)
            for term, tf in Counter(terms).items():
                postings.setdefault(term, {})[pid] = tf
        sorted_postings = {
            term: sorted(by_pid.items()) for term, by_pid in postings.items()
        }
        avgdl = sum(doc_len.values()) / len(doc_len)
        return cls(sorted_postings, doc_len, avgdl, len(doc_len))


def bm25_idf(index: InvertedIndex, term: str) -> float:
    df = len(index.postings.get(term, ()))
    return float(np.log(1.0 + (index.num_docs - df + 0.5) / (df + 0.5)))


def bm25_search(
    query: str,
    index: InvertedIndex,
    k: int,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[tuple[str, float]]:
    """Top-k by BM25, descending score with ties broken by ascending pid."""
    terms = normalize_words(query)
    if not terms:
        return []
    scores: dict[str, float] = {}
    for term in terms:
        idf = bm25_idf(index, term)
        for pid, tf in index.postings.get(term, ()):
            norm = k1 * (1.0 - b + b * index.doc_len[pid] / index.avgdl)
            scores[pid] = scores.get(pid, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


@dataclass
class DenseIndex:
    matrix: np.ndarray
    pids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.pids):
            raise ContractViolation(
                f"index has {self.matrix.shape[0]} rows for {len(self.pids)} pids"
            )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, matrix=self.matrix, pids=np.array(self.pids))

    @classmethod
    def load(cls, path) -> "DenseIndex":
        data = np.load(path, allow_pickle=False)
        return cls(data["matrix"], [str(p) for p in data["pids"]])


def encode_texts(
    texts: Sequence[str],
    params,
    cfg: ModelConfig,
    vocab: Vocab,
    batch_size: int = 128,
) -> np.ndarray:
    """[CLS] embedding per text, batched inference."""
    rows = []
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        sequences = []
        for text in chunk:
            ids, _ = encode_words(normalize_words(text), vocab)
            ids = ids[: cfg.max_len - 2]
            sequences.append([CLS] + ids + [SEP])
        rows.append(modeling.cls_embeddings(params, cfg, sequences))
    return np.concatenate(rows, axis=0)


def encode_corpus(
    corpus: dict[str, str],
    params,
    cfg: ModelConfig,
    vocab: Vocab,
    batch_size: int = 128,
) -> DenseIndex:
    pids = list(corpus.keys())
    matrix = encode_texts([corpus[p] for p in pids], params, cfg, vocab, batch_size)
    return DenseIndex(matrix, pids)


def dense_search(q_emb: np.ndarray, index: DenseIndex, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product; ties broken by ascending pid."""
    q_emb = np.asarray(q_emb)
    if q_emb.shape[-1] != index.matrix.shape[1]:
        raise ContractViolation(
            f"query dim {q_emb.shape[-1]} != index dim {index.matrix.shape[1]}"
        )
    if k <= 0:
        return []
    scores = index.matrix @ q_emb
    order = sorted(range(len(index.pids)), key=lambda i: (-scores[i], index.pids[i]))
    return [(index.pids[i], float(scores[i])) for i in order[:k]]


def search_queries(
    queries: Sequence[tuple[str, str]],
    params,
    cfg: ModelConfig,
    vocab: Vocab,
    index: DenseIndex,
    k: int,
) -> dict[str, list[tuple[str, float]]]:
    embeddings = encode_texts([text for _, text in queries], params, cfg, vocab)
    return {
        qid: dense_search(embeddings[i], index, k)
        for i, (qid, _) in enumerate(queries)
    }


def mine_hard_negatives(
    queries: Sequence[tuple[str, str]],
    relevant: dict[str, set[str]],
    params,
    cfg: ModelConfig,
    vocab: Vocab,
    index: DenseIndex,
    per_query: int,
    depth: int = 200,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, list[str]]:
    """Sample negatives uniformly from each query's top-`depth` retrieved
    passages, excluding every judged-relevant pid. Queries with no eligible
    candidate are skipped with a warning."""
    rng = rng or np.random.default_rng(0)
    negatives: dict[str, list[str]] = {}
    embeddings = encode_texts([text for _, text in queries], params, cfg, vocab)
    for i, (qid, _) in enumerate(queries):
        ranked = dense_search(embeddings[i], index, depth)
        exclude = relevant.get(qid, set())
        candidates = [pid for pid, _ in ranked if pid not in exclude]
        if not candidates:
            logger.warning("no negative candidates for query %s; skipped", qid)
            continue
        take = min(per_query, len(candidates))
        chosen = rng.choice(len(candidates), size=take, replace=False)
        negatives[qid] = [candidates[j] for j in sorted(chosen)]
    return negatives


def bm25_negatives(
    queries: Sequence[tuple[str, str]],
    relevant: dict[str, set[str]],
    index: InvertedIndex,
    per_query: int,
    depth: int = 200,
    rng: Optional[np.random.Generator] = None,
) -> dict[str, list[str]]:
    """Same sampling rule as dense mining, candidates from BM25."""
    rng = rng or np.random.default_rng(0)
    negatives: dict[str, list[str]] = {}
    for qid, text in queries:
        ranked = bm25_search(text, index, depth)
        exclude = relevant.get(qid, set())
        candidates = [pid for pid, _ in ranked if pid not in exclude]
        if not candidates:
            logger.warning("no BM25 negative candidates for query %s; skipped", qid)
            continue
        take = min(per_query, len(candidates))
        chosen = rng.choice(len(candidates), size=take, replace=False)
        negatives[qid] = [candidates[j] for j in sorted(chosen)]
    return negatives


def build_groups(
    queries: Sequence[tuple[str, str]],
    relevant: dict[str, set[str]],
    negatives: dict[str, list[str]],
) -> list[dict]:
    """Training groups (qid, query, pos_pid, neg_pids) for mined negatives.

    The positive is the lexicographically first judged-relevant pid, which
    keeps group construction deterministic across runs."""
    groups = []
    for qid, text in queries:
        if qid not in negatives or not relevant.get(qid):
            continue
        groups.append(
            {
                "qid": qid,
                "query": text,
                "pos_pid": sorted(relevant[qid])[0],
                "neg_pids": negatives[qid],
            }
        )
    return groups
