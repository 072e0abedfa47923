"""Command-line entry points for the whole pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as modeling
from .config import apply_overrides, load_config, parse_seed_list
from .data_io import (
    read_corpus,
    read_queries,
    read_typo_queries,
    write_groups,
    write_trec_run,
    write_typo_queries,
)
from .evaluation import (
    Qrels,
    evaluate_run,
    paired_ttest_bonferroni,
    significance_matrix,
)
from .experiments import (
    ExperimentConfig,
    bm25_candidates,
    experiment_config_from_flat,
    prepare_vocab,
    run_experiment,
    typo_query_set,
)
from .finetune import RerankerTrainConfig, StageConfig, TrainGroup, run_stage, train_reranker
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
from .synthetic import SyntheticDatasetSpec, gen_synthetic_dataset
from .tokenizer import Vocab
from .typo_editor import EditorConfig, default_stopwords, load_stopwords

logger = logging.getLogger(__name__)


def _editor_from_args(args) -> EditorConfig:
    stopwords = load_stopwords(args.stopwords) if getattr(args, "stopwords", None) else default_stopwords()
    return EditorConfig(
        alpha=args.alpha, beta=args.beta,
        decoder_mask_floor=args.floor, stopwords=stopwords,
    )


def _add_editor_args(p, alpha=0.3, beta=0.3, floor=0.5):
    p.add_argument("--alpha", type=float, default=alpha, help="MLM word-sampling ratio")
    p.add_argument("--beta", type=float, default=beta, help="typo injection ratio")
    p.add_argument("--floor", type=float, default=floor, help="decoder mask floor")
    p.add_argument("--stopwords", default=None, help="stopword file (one word per line)")


def cmd_gen_data(args) -> int:
    spec = SyntheticDatasetSpec(
        num_topics=args.topics,
        passages_per_topic=args.passages_per_topic,
        vocab_size=args.vocab_size,
        query_terms=args.query_terms,
        num_train_queries=args.train_queries,
        num_dev_queries=args.dev_queries,
        passage_len=args.passage_len,
    )
    paths = gen_synthetic_dataset(spec, args.seed, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train_vocab(args) -> int:
    path = prepare_vocab(args.corpus, args.out, args.target_size)
    print(f"vocabulary written to {path}")
    return 0


def cmd_pretrain(args) -> int:
    vocab = Vocab.load(args.vocab)
    model_cfg = ModelConfig(vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
                            encoder_layers=args.encoder_layers, ffn_dim=args.ffn_dim,
                            max_len=args.max_len, dropout=args.dropout)
    schedule = PretrainSchedule(steps=args.steps, lr=args.lr, warmup=args.warmup,
                                batch_size=args.batch_size)
    final = run_pretraining(
        args.corpus, vocab, args.out, _editor_from_args(args), model_cfg, schedule, args.seed,
        bottleneck=not args.no_bottleneck,
        recover_typos_on_encoder=args.encoder_recover_typos,
        resume_from=args.resume,
    )
    print(f"encoder checkpoint: {final}")
    return 0


def cmd_finetune(args) -> int:
    cfg = StageConfig(stage=args.stage, negatives=args.negatives, tau=args.tau, lr=args.lr,
                      epochs=args.epochs, batch_size=args.batch_size, use_st=not args.no_st)
    ckpt = run_stage(
        args.stage, args.groups, args.corpus, args.vocab, args.init, cfg,
        _editor_from_args(args), args.seed, args.out,
        reranker_checkpoint=args.reranker,
    )
    print(f"stage {args.stage} checkpoint: {ckpt}")
    return 0


def cmd_mine_negatives(args) -> int:
    queries = read_queries(args.queries)
    qrels = Qrels.load(args.qrels)
    relevant = {qid: qrels.relevant(qid) for qid, _ in queries}
    rng = np.random.default_rng(args.seed)
    if args.bm25:
        index = InvertedIndex.build(read_corpus(args.corpus))
        negatives = bm25_negatives(queries, relevant, index, args.per_query, args.depth, rng)
    else:
        params, model_cfg, _ = modeling.load_model(args.checkpoint)
        vocab = Vocab.load(args.vocab)
        corpus = read_corpus(args.corpus)
        index = encode_corpus(corpus, params, model_cfg, vocab)
        negatives = mine_hard_negatives(queries, relevant, params, model_cfg, vocab, index,
                                        args.per_query, args.depth, rng)
    groups = build_groups(queries, relevant, negatives)
    write_groups(args.out, groups)
    print(f"{len(groups)} training groups written to {args.out}")
    return 0


def cmd_train_reranker(args) -> int:
    from .data_io import read_groups

    groups = [TrainGroup.from_dict(d) for d in read_groups(args.groups)]
    corpus = read_corpus(args.corpus)
    vocab = Vocab.load(args.vocab)
    enc_params, model_cfg, _ = modeling.load_model(args.init)
    rr_params = modeling.init_reranker_params(model_cfg, np.random.default_rng([args.seed, 91]),
                                              from_encoder=enc_params)
    cfg = RerankerTrainConfig(negatives=args.negatives, lr=args.lr, epochs=args.epochs,
                              batch_size=args.batch_size)
    ckpt = train_reranker(groups, corpus, vocab, rr_params, model_cfg, cfg, args.seed, args.out)
    print(f"reranker checkpoint: {ckpt}")
    return 0


def cmd_encode(args) -> int:
    params, model_cfg, _ = modeling.load_model(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    corpus = read_corpus(args.corpus)
    index = encode_corpus(corpus, params, model_cfg, vocab, batch_size=args.batch_size)
    index.save(args.out)
    print(f"dense index [{index.matrix.shape[0]} x {index.matrix.shape[1]}] written to {args.out}")
    return 0


def cmd_search(args) -> int:
    queries = read_queries(args.queries)
    if args.engine == "bm25":
        index = InvertedIndex.build(read_corpus(args.corpus))
        run = {qid: bm25_search(text, index, args.k) for qid, text in queries}
    else:
        params, model_cfg, _ = modeling.load_model(args.checkpoint)
        vocab = Vocab.load(args.vocab)
        index = DenseIndex.load(args.index)
        run = search_queries(queries, params, model_cfg, vocab, index, args.k)
    write_trec_run(args.out, run, tag=args.tag)
    print(f"run with {len(run)} queries written to {args.out}")
    return 0


def cmd_typo_queries(args) -> int:
    queries = read_queries(args.queries)
    stopwords = load_stopwords(args.stopwords) if args.stopwords else default_stopwords()
    rows = typo_query_set(queries, stopwords, args.seed, fraction=args.fraction)
    write_typo_queries(args.out, rows)
    print(f"{len(rows)} typo queries written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .data_io import read_trec_run

    run = read_trec_run(args.run)
    qrels = Qrels.load(args.qrels, threshold=args.binarize_threshold)
    report = evaluate_run(run, qrels)
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json(), encoding="utf-8")
    for metric, value in sorted(report.means.items()):
        print(f"{metric}: {value:.4f}")
    print(f"rbp@10: {report.rbp_mean:.4f} +{report.residual_mean:.4f} "
          f"(unjudged@10 mean {report.unjudged_mean:.2f})")
    return 0


def cmd_significance(args) -> int:
    from .data_io import read_trec_run

    qrels = Qrels.load(args.qrels, threshold=args.binarize_threshold)
    per_system = {}
    for path in args.runs:
        run = read_trec_run(path)
        report = evaluate_run(run, qrels, metrics=(args.metric,))
        per_system[Path(path).stem] = report.per_query[args.metric]
    matrix = significance_matrix(per_system, alpha=args.alpha)
    for pair, cell in matrix.items():
        flag = "significant" if cell["significant"] else "not significant"
        print(f"{pair}: t={cell['t']:.4f} p={cell['p']:.6f} ({flag}, n={cell['n']})")
    return 0


def cmd_experiment(args) -> int:
    flat = load_config(args.config) if args.config else {}
    flat = apply_overrides(flat, args.set or [])
    if args.seeds:
        flat["seeds"] = args.seeds
    cfg = experiment_config_from_flat(flat)
    out = run_experiment(args.recipe, cfg, flat)
    print(f"experiment reports in {out}")
    print((out / "summary.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="typolab",
                                     description="Typo-robust dense retrieval laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic topic-clustered dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--topics", type=int, default=50)
    p.add_argument("--passages-per-topic", type=int, default=40)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--query-terms", type=int, default=2)
    p.add_argument("--train-queries", type=int, default=500)
    p.add_argument("--dev-queries", type=int, default=200)
    p.add_argument("--passage-len", type=int, default=14)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vocab", help="train the subword vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-size", type=int, default=4000)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("pretrain", help="typo-aware bottlenecked pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--encoder-layers", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=256)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--no-bottleneck", action="store_true",
                   help="encoder-only MLM baseline (ablation rows a/b)")
    p.add_argument("--encoder-recover-typos", action="store_true",
                   help="encoder-only typo recovery loss (ablation row b)")
    p.add_argument("--resume", default=None, help="full-state checkpoint to resume from")
    _add_editor_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="run one fine-tuning stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--groups", required=True, help="training groups JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--negatives", type=int, default=7)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--no-st", action="store_true", help="disable the self-teaching term")
    p.add_argument("--reranker", default=None, help="frozen reranker checkpoint (stage 3)")
    _add_editor_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("mine-negatives", help="sample training negatives")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--per-query", type=int, default=7)
    p.add_argument("--depth", type=int, default=200)
    p.add_argument("--bm25", action="store_true", help="use BM25 instead of a dense checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_mine_negatives)

    p = sub.add_parser("train-reranker", help="train the cross-encoder reranker")
    p.add_argument("--groups", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init", required=True, help="encoder checkpoint to initialize from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--negatives", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_train_reranker)

    p = sub.add_parser("encode", help="encode a corpus into a dense index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=128)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="rank passages for queries")
    p.add_argument("engine", choices=("bm25", "dense"))
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--tag", default="typolab")
    p.add_argument("--corpus", default=None, help="for bm25")
    p.add_argument("--index", default=None, help="dense index file")
    p.add_argument("--checkpoint", default=None, help="dense query encoder")
    p.add_argument("--vocab", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("typo-queries", help="misspell evaluation queries")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fraction", type=float, default=None,
                   help="perturb ceil(f * words) per query instead of exactly one")
    p.add_argument("--stopwords", default=None)
    p.set_defaults(func=cmd_typo_queries)

    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--binarize-threshold", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("significance", help="paired t-tests between run files")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="mrr@10")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--binarize-threshold", type=int, default=None)
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("experiment", help="run a named recipe")
    p.add_argument("recipe", choices=("ablation", "beta-sweep", "pipeline"))
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
