"""Experiment recipes: dataset prep, system chains, and report assembly.

A recipe turns one config + seed list into a directory of artifacts
(checkpoints, run files, metric reports, significance matrices) that is
sufficient to re-run bit-identically: the config snapshot, seeds, and
sha256 digests of every input file are written alongside the results.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as modeling
from .config import dump_config
from .data_io import (
    file_digest,
    read_corpus,
    read_queries,
    read_typo_queries,
    write_groups,
    write_trec_run,
    write_typo_queries,
)
from .errors import ConfigError, DependencyError
from .evaluation import (
    MetricReport,
    Qrels,
    evaluate_run,
    paired_report_table,
    significance_matrix,
)
from .finetune import (
    RerankerTrainConfig,
    StageConfig,
    TrainGroup,
    train_reranker,
    train_stage,
)
from .model import ModelConfig
from .pretrain import PretrainSchedule, run_pretraining
from .retrieval import (
    DenseIndex,
    InvertedIndex,
    bm25_negatives,
    bm25_search,
    build_groups,
    encode_corpus,
    encode_texts,
    mine_hard_negatives,
    search_queries,
)
from .tokenizer import Vocab, train_vocab
from .typo_editor import EditorConfig, NotEligible, is_typo_eligible, make_eval_typo_query, sample_typo

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    corpus: str = ""
    vocab: str = ""
    queries_train: str = ""
    queries_dev: str = ""
    qrels_train: str = ""
    qrels_dev: str = ""
    out_dir: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])

    alpha: float = 0.3
    beta: float = 0.3
    decoder_mask_floor: float = 0.5

    model: ModelConfig = field(default_factory=ModelConfig)

    pretrain_steps: int = 600
    pretrain_lr: float = 2e-3
    pretrain_warmup: int = 40
    pretrain_batch: int = 32

    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(stage=3))
    reranker: RerankerTrainConfig = field(default_factory=RerankerTrainConfig)

    mining_depth: int = 200
    search_k: int = 1000

    def editor(self, beta: Optional[float] = None) -> EditorConfig:
        b = self.beta if beta is None else beta
        return EditorConfig(
            alpha=min(self.alpha, 1.0 - b),
            beta=b,
            decoder_mask_floor=self.decoder_mask_floor,
        )

    def schedule(self) -> PretrainSchedule:
        return PretrainSchedule(
            steps=self.pretrain_steps,
            lr=self.pretrain_lr,
            warmup=self.pretrain_warmup,
            batch_size=self.pretrain_batch,
        )

    def validate_paths(self) -> None:
        for name in ("corpus", "vocab", "queries_train", "queries_dev", "qrels_train", "qrels_dev"):
            path = getattr(self, name)
            if not path or not Path(path).exists():
                raise DependencyError(f"experiment requires {name}: missing file {path!r}")
        if not self.seeds:
            raise ConfigError("experiment needs a non-empty seed list")


def experiment_config_from_flat(values: dict[str, object]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat dotted keys (`model.d_model = 64`)."""
    cfg = ExperimentConfig()
    model_kwargs: dict[str, object] = {}
    stage_kwargs: dict[str, dict[str, object]] = {"stage1": {}, "stage2": {}, "stage3": {}, "reranker": {}}
    for key, value in values.items():
        if key.startswith("model."):
            model_kwargs[key.split(".", 1)[1]] = value
        elif key.split(".", 1)[0] in stage_kwargs and "." in key:
            prefix, name = key.split(".", 1)
            stage_kwargs[prefix][name] = value
        elif key == "seeds":
            cfg.seeds = [int(s) for s in str(value).split(",")]
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if model_kwargs:
        cfg.model = replace(ModelConfig(), **model_kwargs)
    for prefix, kwargs in stage_kwargs.items():
        if kwargs:
            setattr(cfg, prefix, replace(getattr(cfg, prefix), **kwargs))
    return cfg


# ---------------------------------------------------------------------------
# typo query generation


def typo_query_set(
    queries: Sequence[tuple[str, str]],
    stopwords: frozenset[str],
    seed: int,
    fraction: Optional[float] = None,
    min_typo_word_len: int = 3,
) -> list[tuple[str, str, str]]:
    """(qid, typo_query, original) rows.

    Default mode injects exactly one typo on a non-stopword. With
    `fraction` f, ceil(f * word_count) eligible words are perturbed (f=1:
    every eligible word misspelled). Ineligible queries are copied
    unchanged with a logged warning."""
    rng = np.random.default_rng([seed, 77])
    rows = []
    unchanged = 0
    for qid, text in queries:
        if fraction is None:
            try:
                rows.append((qid, make_eval_typo_query(text, stopwords, rng, min_typo_word_len), text))
            except NotEligible:
                unchanged += 1
                rows.append((qid, text, text))
            continue
        words = text.split()
        eligible = [
            i for i, w in enumerate(words)
            if is_typo_eligible(w, min_typo_word_len) and w.lower() not in stopwords
        ]
        want = math.ceil(fraction * len(words))
        if want > len(eligible):
            want = len(eligible)
        if want == 0:
            if fraction > 0:
                unchanged += 1
            rows.append((qid, text, text))
            continue
        chosen = rng.choice(len(eligible), size=want, replace=False)
        for j in sorted(int(c) for c in chosen):
            idx = eligible[j]
            for _ in range(64):
                perturbed, _t = sample_typo(words[idx], rng, min_typo_word_len)
                if perturbed != words[idx]:
                    words[idx] = perturbed
                    break
        rows.append((qid, " ".join(words), text))
    if unchanged:
        logger.warning("%d queries had no typo-eligible word and were copied unchanged", unchanged)
    return rows


# ---------------------------------------------------------------------------
# system chains


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def pretrain_system(
    cfg: ExperimentConfig,
    vocab: Vocab,
    out_dir: Path,
    seed: int,
    beta: Optional[float] = None,
    bottleneck: bool = True,
    recover_typos_on_encoder: bool = False,
) -> Path:
    """Pre-train one system variant; reuses an existing checkpoint if present."""
    final = out_dir / "encoder_final.trdr"
    if final.exists():
        return final
    editor = cfg.editor(beta)
    if not bottleneck and not recover_typos_on_encoder:
        editor = replace(editor, beta=0.0, alpha=cfg.alpha)
    model_cfg = replace(cfg.model, vocab_size=len(vocab))
    return run_pretraining(
        cfg.corpus, vocab, out_dir, editor, model_cfg, cfg.schedule(), seed,
        bottleneck=bottleneck, recover_typos_on_encoder=recover_typos_on_encoder,
    )


def make_bm25_groups(cfg: ExperimentConfig, out_path: Path, seed: int, negatives: int) -> Path:
    if out_path.exists():
        return out_path
    corpus = read_corpus(cfg.corpus)
    queries = read_queries(cfg.queries_train)
    qrels = Qrels.load(cfg.qrels_train)
    relevant = {qid: qrels.relevant(qid) for qid, _ in queries}
    index = InvertedIndex.build(corpus)
    rng = np.random.default_rng([seed, 11])
    negs = bm25_negatives(queries, relevant, index, per_query=negatives, depth=cfg.mining_depth, rng=rng)
    groups = build_groups(queries, relevant, negs)
    write_groups(out_path, groups)
    return out_path


def make_mined_groups(
    cfg: ExperimentConfig,
    checkpoint: Path,
    out_path: Path,
    seed: int,
    negatives: int,
) -> Path:
    if out_path.exists():
        return out_path
    corpus = read_corpus(cfg.corpus)
    vocab = Vocab.load(cfg.vocab)
    queries = read_queries(cfg.queries_train)
    qrels = Qrels.load(cfg.qrels_train)
    relevant = {qid: qrels.relevant(qid) for qid, _ in queries}
    params, model_cfg, _ = modeling.load_model(checkpoint)
    index = encode_corpus(corpus, params, model_cfg, vocab)
    rng = np.random.default_rng([seed, 13])
    negs = mine_hard_negatives(
        queries, relevant, params, model_cfg, vocab, index,
        per_query=negatives, depth=cfg.mining_depth, rng=rng,
    )
    groups = build_groups(queries, relevant, negs)
    write_groups(out_path, groups)
    return out_path


def finetune_stage1(
    cfg: ExperimentConfig,
    pretrained: Path,
    groups_path: Path,
    out_dir: Path,
    seed: int,
    use_st: bool,
) -> Path:
    ckpt = out_dir / "stage1_retriever.trdr"
    if ckpt.exists():
        return ckpt
    from .data_io import read_groups

    groups = [TrainGroup.from_dict(d) for d in read_groups(groups_path)]
    corpus = read_corpus(cfg.corpus)
    vocab = Vocab.load(cfg.vocab)
    params, model_cfg, _ = modeling.load_model(pretrained)
    stage_cfg = replace(cfg.stage1, use_st=use_st)
    return train_stage(
        groups, corpus, vocab, params, model_cfg, stage_cfg, cfg.editor(), seed, out_dir,
    )


def evaluate_checkpoint(
    cfg: ExperimentConfig,
    checkpoint: Path,
    typo_rows: Sequence[tuple[str, str, str]],
    out_dir: Path,
    tag: str,
) -> dict[str, MetricReport]:
    """Search clean + typo dev queries and write runs/reports."""
    corpus = read_corpus(cfg.corpus)
    vocab = Vocab.load(cfg.vocab)
    qrels = Qrels.load(cfg.qrels_dev)
    params, model_cfg, _ = modeling.load_model(checkpoint)
    index = encode_corpus(corpus, params, model_cfg, vocab)
    k = min(cfg.search_k, len(corpus))

    clean_queries = [(qid, original) for qid, _, original in typo_rows]
    typo_queries = [(qid, typo) for qid, typo, _ in typo_rows]
    runs = {}
    reports = {}
    for name, queries in (("clean", clean_queries), ("typo", typo_queries)):
        run = search_queries(queries, params, model_cfg, vocab, index, k)
        write_trec_run(out_dir / f"run_{name}.trec", run, tag=f"{tag}-{name}")
        report = evaluate_run(run, qrels)
        (out_dir / f"report_{name}.json").write_text(report.to_json(), encoding="utf-8")
        runs[name] = run
        reports[name] = report
    return reports


def mean_score_distribution_kl(
    checkpoint: Path,
    cfg: ExperimentConfig,
    typo_rows: Sequence[tuple[str, str, str]],
    candidates: dict[str, list[str]],
) -> float:
    """Mean KL(clean-query score dist || typo-query score dist) over fixed
    per-query candidate pid lists (the self-teaching target quantity)."""
    corpus = read_corpus(cfg.corpus)
    vocab = Vocab.load(cfg.vocab)
    params, model_cfg, _ = modeling.load_model(checkpoint)
    total = 0.0
    count = 0
    for qid, typo, original in typo_rows:
        pids = candidates.get(qid)
        if not pids:
            continue
        embs = encode_texts([original, typo] + [corpus[p] for p in pids], params, model_cfg, vocab)
        scores_clean = embs[2:] @ embs[0]
        scores_typo = embs[2:] @ embs[1]

        def _softmax(x):
            e = np.exp(x - x.max())
            return e / e.sum()

        p = _softmax(scores_clean.astype(np.float64))
        q = _softmax(scores_typo.astype(np.float64))
        total += float((p * (np.log(p) - np.log(q))).sum())
        count += 1
    return total / max(1, count)


def bm25_candidates(cfg: ExperimentConfig, queries: Sequence[tuple[str, str]], k: int = 20) -> dict[str, list[str]]:
    index = InvertedIndex.build(read_corpus(cfg.corpus))
    return {qid: [pid for pid, _ in bm25_search(text, index, k)] for qid, text in queries}


# ---------------------------------------------------------------------------
# recipes


ABLATION_ROWS = {
    # row: (bottleneck, recover_typos, beta, use_st, stages)
    "a_mlm": (False, False, 0.0, False, 1),
    "b_mlm_recover": (False, True, 0.3, False, 1),
    "c_bottleneck": (True, False, 0.0, False, 1),
    "d_typo_bottleneck": (True, False, 0.3, False, 1),
    "e_bottleneck_st": (True, False, 0.0, True, 1),
    "f_typo_bottleneck_st": (True, False, 0.3, True, 1),
    "g_stage2": (True, False, 0.3, True, 2),
    "h_stage3": (True, False, 0.3, True, 3),
}


def _write_manifest(cfg: ExperimentConfig, out_dir: Path, flat_config: dict[str, object]) -> None:
    manifest = {
        "seeds": cfg.seeds,
        "inputs": {
            name: file_digest(getattr(cfg, name))
            for name in ("corpus", "vocab", "queries_train", "queries_dev", "qrels_train", "qrels_dev")
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    (out_dir / "config.txt").write_text(dump_config(flat_config), encoding="utf-8")


def _dev_typo_rows(cfg: ExperimentConfig, out_dir: Path) -> list[tuple[str, str, str]]:
    path = out_dir / "queries_dev_typo.tsv"
    if path.exists():
        return read_typo_queries(path)
    queries = read_queries(cfg.queries_dev)
    rows = typo_query_set(queries, EditorConfig().stopwords, seed=cfg.seeds[0])
    write_typo_queries(path, rows)
    return rows


def run_system_chain(
    cfg: ExperimentConfig,
    system: str,
    seed: int,
    out_dir: Path,
    typo_rows: Sequence[tuple[str, str, str]],
    bottleneck: bool = True,
    recover_typos: bool = False,
    beta: Optional[float] = None,
    use_st: bool = True,
    stages: int = 1,
) -> dict[str, MetricReport]:
    """Pre-train + fine-tune one system through `stages`, then evaluate."""
    vocab = Vocab.load(cfg.vocab)
    sys_dir = _ensure_dir(out_dir / system / f"seed{seed}")
    pre_dir = sys_dir / "pretrain"
    ckpt = pretrain_system(cfg, vocab, pre_dir, seed, beta=beta,
                           bottleneck=bottleneck, recover_typos_on_encoder=recover_typos)

    groups1 = make_bm25_groups(cfg, out_dir / f"groups_bm25_seed{seed}.jsonl", seed, cfg.stage1.negatives)
    current = finetune_stage1(cfg, ckpt, groups1, sys_dir / "stage1", seed, use_st=use_st)

    corpus = read_corpus(cfg.corpus)
    if stages >= 2:
        groups2 = make_mined_groups(cfg, current, sys_dir / "groups_stage2.jsonl", seed, cfg.stage2.negatives)
        stage2_dir = _ensure_dir(sys_dir / "stage2")
        stage2_ckpt = stage2_dir / "stage2_retriever.trdr"
        if not stage2_ckpt.exists():
            from .data_io import read_groups

            groups = [TrainGroup.from_dict(d) for d in read_groups(groups2)]
            params, model_cfg, _ = modeling.load_model(current)
            stage_cfg = replace(cfg.stage2, use_st=use_st)
            train_stage(groups, corpus, vocab, params, model_cfg, stage_cfg, cfg.editor(), seed, stage2_dir)
        current = stage2_ckpt
    if stages >= 3:
        from .data_io import read_groups

        groups3 = make_mined_groups(cfg, current, sys_dir / "groups_stage3.jsonl", seed,
                                    max(cfg.stage3.negatives, cfg.reranker.negatives))
        groups = [TrainGroup.from_dict(d) for d in read_groups(groups3)]
        rr_dir = _ensure_dir(sys_dir / "reranker")
        rr_ckpt = rr_dir / "reranker_final.trdr"
        if not rr_ckpt.exists():
            enc_params, model_cfg, _ = modeling.load_model(ckpt)
            rr_params = modeling.init_reranker_params(model_cfg, np.random.default_rng([seed, 91]),
                                                      from_encoder=enc_params)
            train_reranker(groups, corpus, vocab, rr_params, model_cfg, cfg.reranker, seed, rr_dir)
        stage3_dir = _ensure_dir(sys_dir / "stage3")
        stage3_ckpt = stage3_dir / "stage3_retriever.trdr"
        if not stage3_ckpt.exists():
            params, model_cfg, _ = modeling.load_model(current)
            rr_params, rr_cfg, _ = modeling.load_model(rr_ckpt)
            stage_cfg = replace(cfg.stage3, use_st=use_st)
            train_stage(groups, corpus, vocab, params, model_cfg, stage_cfg, cfg.editor(), seed,
                        stage3_dir, reranker=(rr_params, rr_cfg))
        current = stage3_ckpt

    eval_dir = _ensure_dir(sys_dir / "eval")
    marker = eval_dir / "report_typo.json"
    if marker.exists():
        reports = {
            name: MetricReport(**_report_from_json((eval_dir / f"report_{name}.json").read_text()))
            for name in ("clean", "typo")
        }
        return reports
    return evaluate_checkpoint(cfg, current, typo_rows, eval_dir, tag=system)


def _report_from_json(text: str) -> dict:
    raw = json.loads(text)
    return {
        "per_query": raw["per_query"],
        "means": raw["means"],
        "rbp_per_query": {q: tuple(v) for q, v in raw["rbp_per_query"].items()},
        "rbp_mean": raw["rbp_mean"],
        "residual_mean": raw["residual_mean"],
        "unjudged_mean": raw["unjudged_at_10_mean"],
    }


def _summarize(
    results: dict[str, dict[int, dict[str, MetricReport]]],
    out_dir: Path,
    metrics: Sequence[str] = ("mrr@10", "recall@1000"),
) -> dict:
    """Median-over-seeds summary + per-seed significance matrices."""
    summary: dict = {"systems": {}}
    table_systems: dict[str, tuple[MetricReport, MetricReport]] = {}
    for system, by_seed in results.items():
        rows = {}
        for metric in metrics:
            typo_vals = [r["typo"].means[metric] for r in by_seed.values()]
            clean_vals = [r["clean"].means[metric] for r in by_seed.values()]
            rows[metric] = {
                "typo_median": float(np.median(typo_vals)),
                "clean_median": float(np.median(clean_vals)),
                "typo_per_seed": typo_vals,
                "clean_per_seed": clean_vals,
            }
        summary["systems"][system] = rows
        first_seed = sorted(by_seed)[0]
        table_systems[system] = (by_seed[first_seed]["typo"], by_seed[first_seed]["clean"])

    significance: dict = {}
    seeds = sorted(next(iter(results.values()))) if results else []
    for metric in metrics:
        significance[metric] = {}
        for kind in ("typo", "clean"):
            for seed in seeds:
                per_system = {
                    system: by_seed[seed][kind].per_query[metric]
                    for system, by_seed in results.items()
                    if seed in by_seed
                }
                if len(per_system) >= 2:
                    significance[metric][f"{kind}/seed{seed}"] = significance_matrix(per_system)
    summary["significance"] = significance

    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    table = paired_report_table(table_systems, metrics)
    (out_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    return summary


def run_experiment(recipe: str, cfg: ExperimentConfig, flat_config: dict[str, object]) -> Path:
    """Execute a named recipe; returns the report directory."""
    cfg.validate_paths()
    out_dir = _ensure_dir(Path(cfg.out_dir))
    _write_manifest(cfg, out_dir, flat_config)
    typo_rows = _dev_typo_rows(cfg, out_dir)

    results: dict[str, dict[int, dict[str, MetricReport]]] = {}
    try:
        if recipe == "ablation":
            for row, (bottleneck, recover, beta, use_st, stages) in ABLATION_ROWS.items():
                results[row] = {}
                for seed in cfg.seeds:
                    results[row][seed] = run_system_chain(
                        cfg, row, seed, out_dir, typo_rows,
                        bottleneck=bottleneck, recover_typos=recover,
                        beta=beta, use_st=use_st, stages=stages,
                    )
        elif recipe == "beta-sweep":
            for beta10 in range(0, 11):
                beta = beta10 / 10.0
                system = f"beta{beta10:02d}"
                results[system] = {}
                for seed in cfg.seeds:
                    results[system][seed] = run_system_chain(
                        cfg, system, seed, out_dir, typo_rows,
                        beta=beta, use_st=False, stages=1,
                    )
        elif recipe == "pipeline":
            results["pipeline"] = {}
            for seed in cfg.seeds:
                results["pipeline"][seed] = run_system_chain(
                    cfg, "pipeline", seed, out_dir, typo_rows, stages=3,
                )
        else:
            raise ConfigError(f"unknown recipe {recipe!r} (ablation | beta-sweep | pipeline)")
    except Exception as exc:
        raise RuntimeError(f"experiment recipe {recipe!r} failed: {exc}") from exc

    _summarize(results, out_dir)
    return out_dir


def prepare_vocab(corpus_path, out_path, target_size: int) -> Path:
    with open(corpus_path, encoding="utf-8") as fh:
        lines = [line.partition("\t")[2] for line in fh]
    vocab = train_vocab(lines, target_size)
    vocab.save(out_path)
    return Path(out_path)
