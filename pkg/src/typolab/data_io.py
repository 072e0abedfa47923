"""Readers/writers for the pipeline's on-disk formats.

Corpus/queries are TSV, qrels and runs are TREC format, training groups are
JSON lines. Everything round-trips through plain text so experiment
directories stay inspectable.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable


def read_tsv_pairs(path) -> list[tuple[str, str]]:
    """`id \\t text` lines; blank lines ignored."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, text = line.partition("\t")
            rows.append((key, text))
    return rows


def write_tsv_pairs(path, rows: Iterable[tuple[str, str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for key, text in rows:
            fh.write(f"{key}\t{text}\n")


def read_corpus(path) -> dict[str, str]:
    return dict(read_tsv_pairs(path))


def read_queries(path) -> list[tuple[str, str]]:
    return read_tsv_pairs(path)


def read_typo_queries(path) -> list[tuple[str, str, str]]:
    """`qid \\t typo_query \\t original_query` rows."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            qid, typo, original = line.split("\t")
            rows.append((qid, typo, original))
    return rows


def write_typo_queries(path, rows: Iterable[tuple[str, str, str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for qid, typo, original in rows:
            fh.write(f"{qid}\t{typo}\t{original}\n")


def read_trec_qrels(path) -> dict[tuple[str, str], int]:
    grades = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            qid, _, pid, grade = parts
            grades[(qid, pid)] = int(grade)
    return grades


def write_trec_qrels(path, grades: dict[tuple[str, str], int]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, pid), grade in grades.items():
            fh.write(f"{qid} 0 {pid} {grade}\n")


def read_trec_run(path) -> dict[str, list[tuple[str, float]]]:
    """TREC run rows `qid Q0 pid rank score tag`, returned rank-ordered."""
    raw: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            qid, _, pid, rank, score, _ = parts
            raw.setdefault(qid, []).append((int(rank), pid, float(score)))
    run = {}
    for qid, rows in raw.items():
        rows.sort()
        run[qid] = [(pid, score) for _, pid, score in rows]
    return run


def write_trec_run(path, run: dict[str, list[tuple[str, float]]], tag: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for qid in run:
            for rank, (pid, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score:.6f} {tag}\n")


def read_groups(path) -> list[dict]:
    """Training groups: one JSON object per line with qid/query/pos_pid/neg_pids."""
    groups = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                groups.append(json.loads(line))
    return groups


def write_groups(path, groups: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for group in groups:
            fh.write(json.dumps(group) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
