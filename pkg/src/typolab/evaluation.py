"""IR effectiveness metrics, RBP residual analysis, and paired t-tests.

Unjudged passages count as nonrelevant everywhere except RBP's residual,
which accumulates exactly the score mass the unjudged positions could
still claim. The Student-t tail is computed from scratch via the
continued-fraction regularized incomplete beta.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data_io import read_trec_qrels
from .errors import ContractViolation

logger = logging.getLogger(__name__)

Run = dict[str, list[tuple[str, float]]]


@dataclass
class Qrels:
    grades: dict[tuple[str, str], int]
    threshold: int = 1

    def __post_init__(self):
        if self.threshold < 1:
            raise ContractViolation(f"binarization threshold must be >= 1, got {self.threshold}")
        if any(g < 0 for g in self.grades.values()):
            raise ContractViolation("relevance grades must be >= 0")

    @classmethod
    def load(cls, path, threshold: Optional[int] = None) -> "Qrels":
        """TREC `qid 0 pid grade` file. Without an explicit threshold, graded
        judgments (max grade > 1) binarize at 2, binary ones at 1."""
        grades = read_trec_qrels(path)
        if threshold is None:
            threshold = 2 if grades and max(grades.values()) > 1 else 1
        return cls(grades, threshold)

    def qids(self) -> list[str]:
        return sorted({qid for qid, _ in self.grades})

    def relevant(self, qid: str) -> set[str]:
        return {pid for (q, pid), g in self.grades.items() if q == qid and g >= self.threshold}

    def graded(self, qid: str) -> dict[str, int]:
        return {pid: g for (q, pid), g in self.grades.items() if q == qid}


def _ranked_pids(run: Run, qid: str) -> list[str]:
    return [pid for pid, _ in run.get(qid, [])]


def mrr_at_k(run: Run, qrels: Qrels, k: int = 10) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in qrels.qids():
        if qid not in run:
            logger.warning("query %s missing from run; MRR counted as 0", qid)
        relevant = qrels.relevant(qid)
        value = 0.0
        for rank, pid in enumerate(_ranked_pids(run, qid)[:k], start=1):
            if pid in relevant:
                value = 1.0 / rank
                break
        per_query[qid] = value
    return per_query, _mean(per_query)


def recall_at_k(run: Run, qrels: Qrels, k: int = 1000) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in qrels.qids():
        relevant = qrels.relevant(qid)
        if not relevant:
            logger.warning("query %s has no relevant passages; excluded from recall", qid)
            continue
        hits = sum(1 for pid in _ranked_pids(run, qid)[:k] if pid in relevant)
        per_query[qid] = hits / len(relevant)
    return per_query, _mean(per_query)


def _gain(grade: int, gain: str) -> float:
    if gain == "exponential":
        return float(2**grade - 1)
    if gain == "linear":
        return float(grade)
    raise ContractViolation(f"unknown gain function {gain!r}")


def ndcg_at_k(
    run: Run, qrels: Qrels, k: int = 10, gain: str = "exponential"
) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in qrels.qids():
        graded = qrels.graded(qid)
        ideal = sorted(graded.values(), reverse=True)[:k]
        idcg = sum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
        if idcg == 0.0:
            logger.warning("query %s has zero IDCG; excluded from nDCG", qid)
            continue
        dcg = 0.0
        for i, pid in enumerate(_ranked_pids(run, qid)[:k], start=1):
            dcg += _gain(graded.get(pid, 0), gain) / math.log2(i + 1)
        per_query[qid] = dcg / idcg
    return per_query, _mean(per_query)


def average_precision(run: Run, qrels: Qrels) -> tuple[dict[str, float], float]:
    per_query = {}
    for qid in qrels.qids():
        relevant = qrels.relevant(qid)
        if not relevant:
            logger.warning("query %s has no relevant passages; excluded from MAP", qid)
            continue
        hits = 0
        total = 0.0
        for rank, pid in enumerate(_ranked_pids(run, qid), start=1):
            if pid in relevant:
                hits += 1
                total += hits / rank
        per_query[qid] = total / len(relevant)
    return per_query, _mean(per_query)


def rbp_with_residual(
    run: Run, qrels: Qrels, rho: float = 0.9, cutoff: int = 10
) -> tuple[dict[str, tuple[float, float, int]], tuple[float, float, float]]:
    """Rank-biased precision on binarized relevance, truncated at `cutoff`.

    Per query: (rbp, residual, unjudged-in-top-cutoff). The residual is the
    mass the unjudged positions would contribute were they all relevant."""
    per_query = {}
    for qid in qrels.qids():
        graded = qrels.graded(qid)
        relevant = qrels.relevant(qid)
        rbp = residual = 0.0
        unjudged = 0
        for i, pid in enumerate(_ranked_pids(run, qid)[:cutoff], start=1):
            weight = (1.0 - rho) * rho ** (i - 1)
            if pid not in graded:
                unjudged += 1
                residual += weight
            elif pid in relevant:
                rbp += weight
        per_query[qid] = (rbp, residual, unjudged)
    if per_query:
        n = len(per_query)
        means = (
            sum(v[0] for v in per_query.values()) / n,
            sum(v[1] for v in per_query.values()) / n,
            sum(v[2] for v in per_query.values()) / n,
        )
    else:
        means = (0.0, 0.0, 0.0)
    return per_query, means


def _mean(per_query: dict[str, float]) -> float:
    return sum(per_query.values()) / len(per_query) if per_query else 0.0


# ---------------------------------------------------------------------------
# significance testing


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-14:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: int) -> float:
    if df < 1:
        raise ContractViolation(f"degrees of freedom must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_ttest_bonferroni(
    a: Sequence[float],
    b: Sequence[float],
    num_comparisons: int,
    alpha: float = 0.01,
) -> tuple[float, float, bool]:
    """Two-tailed paired t-test; significant iff p < alpha/num_comparisons."""
    if len(a) != len(b):
        raise ContractViolation(f"paired test needs equal lengths, got {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ContractViolation("paired test needs at least 2 observations")
    if num_comparisons < 1:
        raise ContractViolation("num_comparisons must be >= 1")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0, False
        t = math.inf if mean > 0 else -math.inf
        return t, 0.0, 0.0 < alpha / num_comparisons
    t = mean / (sd / math.sqrt(n))
    p = student_t_two_tailed_p(t, n - 1)
    return t, p, p < alpha / num_comparisons


# ---------------------------------------------------------------------------
# report assembly


METRIC_FUNCS = {
    "mrr@10": lambda run, qrels: mrr_at_k(run, qrels, 10),
    "recall@1000": lambda run, qrels: recall_at_k(run, qrels, 1000),
    "ndcg@10": lambda run, qrels: ndcg_at_k(run, qrels, 10),
    "map": average_precision,
}


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    rbp_per_query: dict[str, tuple[float, float, int]] = field(default_factory=dict)
    rbp_mean: float = 0.0
    residual_mean: float = 0.0
    unjudged_mean: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "means": self.means,
                "rbp_mean": self.rbp_mean,
                "residual_mean": self.residual_mean,
                "unjudged_at_10_mean": self.unjudged_mean,
                "per_query": self.per_query,
                "rbp_per_query": {q: list(v) for q, v in self.rbp_per_query.items()},
            },
            indent=2,
            sort_keys=True,
        )


def evaluate_run(
    run: Run,
    qrels: Qrels,
    metrics: Sequence[str] = ("mrr@10", "recall@1000", "ndcg@10", "map"),
    rbp_rho: float = 0.9,
    rbp_cutoff: int = 10,
) -> MetricReport:
    per_query: dict[str, dict[str, float]] = {}
    means: dict[str, float] = {}
    for name in metrics:
        if name not in METRIC_FUNCS:
            raise ContractViolation(f"unknown metric {name!r}")
        values, mean = METRIC_FUNCS[name](run, qrels)
        per_query[name] = values
        means[name] = mean
    rbp_values, (rbp_mean, residual_mean, unjudged_mean) = rbp_with_residual(
        run, qrels, rho=rbp_rho, cutoff=rbp_cutoff
    )
    return MetricReport(per_query, means, rbp_values, rbp_mean, residual_mean, unjudged_mean)


def paired_report_table(
    systems: dict[str, tuple[MetricReport, MetricReport]],
    metrics: Sequence[str] = ("mrr@10", "recall@1000"),
) -> str:
    """Aligned text table, one row per system, `misspelled (original)` cells."""
    headers = ["system"] + list(metrics) + ["rbp@10+residual"]
    rows = []
    for name, (typo_report, clean_report) in systems.items():
        cells = [name]
        for metric in metrics:
            cells.append(
                f"{typo_report.means.get(metric, 0.0):.3f} ({clean_report.means.get(metric, 0.0):.3f})"
            )
        cells.append(
            f"{typo_report.rbp_mean:.3f}+{typo_report.residual_mean:.3f} "
            f"({clean_report.rbp_mean:.3f}+{clean_report.residual_mean:.3f})"
        )
        rows.append(cells)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def significance_matrix(
    per_query_by_system: dict[str, dict[str, float]],
    alpha: float = 0.01,
) -> dict[str, dict]:
    """All-pairs paired t-tests with Bonferroni over the number of pairs."""
    names = sorted(per_query_by_system)
    pairs = [(x, y) for i, x in enumerate(names) for y in names[i + 1 :]]
    num_comparisons = max(1, len(pairs))
    out: dict[str, dict] = {}
    for x, y in pairs:
        shared = sorted(set(per_query_by_system[x]) & set(per_query_by_system[y]))
        a = [per_query_by_system[x][q] for q in shared]
        b = [per_query_by_system[y][q] for q in shared]
        t, p, significant = paired_ttest_bonferroni(a, b, num_comparisons, alpha)
        out[f"{x} vs {y}"] = {"t": t, "p": p, "significant": significant, "n": len(shared)}
    return out


def save_report(path, report: MetricReport, table: Optional[str] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")
    if table is not None:
        path.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
