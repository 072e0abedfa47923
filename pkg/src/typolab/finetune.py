"""Three-stage dense-retriever fine-tuning.

Stage 1: contrastive loss with BM25 negatives + in-batch negatives.
Stage 2: same loss, negatives mined with the stage-1 checkpoint.
Stage 3: KL distillation from a frozen cross-encoder reranker for both the
clean and the misspelled query, with the stage-1/2 terms retained as
regularizers scaled by tau.

The self-teaching (ST) term aligns the misspelled query's score
distribution with the clean query's; the clean side is detached, so only
the misspelled-query representation moves.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as modeling
from .autodiff import Tensor
from .data_io import read_corpus, read_groups
from .errors import ConfigError, ContractViolation, DependencyError
from .model import ModelConfig
from .optim import AdamWState, adamw_step, linear_warmup_schedule, zero_grads
from .tokenizer import CLS, SEP, Vocab, encode_words, normalize_words
from .typo_editor import EditorConfig, NotEligible, make_eval_typo_query

logger = logging.getLogger(__name__)


@dataclass
class StageConfig:
    stage: int
    negatives: int = 7
    tau: float = 0.2
    lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 8
    use_st: bool = True
    warmup: int = 20
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.negatives < 1:
            raise ConfigError("need at least one negative per positive")


@dataclass
class RerankerTrainConfig:
    negatives: int = 15
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 4
    warmup: int = 20
    weight_decay: float = 0.01


@dataclass
class TrainGroup:
    qid: str
    query: str
    pos_pid: str
    neg_pids: list[str]
    typo_query: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainGroup":
        return cls(d["qid"], d["query"], d["pos_pid"], list(d["neg_pids"]))


# ---------------------------------------------------------------------------
# loss operations


def score(q_emb: Tensor, p_emb: Tensor) -> Tensor:
    """Dot-product matching score between two embedding vectors."""
    if q_emb.shape != p_emb.shape or q_emb.data.ndim != 1:
        raise ContractViolation(f"score expects equal vectors, got {q_emb.shape} vs {p_emb.shape}")
    return ad.sum_(ad.mul(q_emb, p_emb))


def _candidate_scores(q_emb: Tensor, candidates: Tensor) -> Tensor:
    d = q_emb.shape[0]
    return ad.reshape(ad.matmul(candidates, ad.reshape(q_emb, (d, 1))), (candidates.shape[0],))


def contrastive_loss(
    q_emb: Tensor,
    pos_emb: Tensor,
    neg_embs: Tensor,
    in_batch: Optional[Tensor] = None,
) -> Tensor:
    """-log softmax at the positive over {pos} + negatives + in-batch."""
    d = q_emb.shape[0]
    parts = [ad.reshape(pos_emb, (1, d)), neg_embs]
    if in_batch is not None and in_batch.shape[0] > 0:
        parts.append(in_batch)
    candidates = ad.concat(parts, axis=0)
    if candidates.shape[0] < 2:
        raise ContractViolation("contrastive loss needs at least one non-positive candidate")
    s = _candidate_scores(q_emb, candidates)
    return ad.cross_entropy(ad.reshape(s, (1, candidates.shape[0])), [0], [0])


def st_loss(q_emb: Tensor, q_typo_emb: Tensor, candidate_embs: Tensor) -> Tensor:
    """KL(clean-query score distribution || typo-query score distribution).

    The clean side is the (detached) teacher; gradients reach only the
    misspelled query's branch."""
    if q_emb.shape != q_typo_emb.shape:
        raise ContractViolation(f"query embedding shapes differ: {q_emb.shape} vs {q_typo_emb.shape}")
    clean = ad.softmax(_candidate_scores(q_emb, candidate_embs)).detach()
    typo = ad.softmax(_candidate_scores(q_typo_emb, candidate_embs))
    return ad.kl_div(clean, typo)


def lce_loss(scores: Tensor) -> Tensor:
    """Group-local cross-entropy at index 0 (the positive) — no in-batch mixing."""
    n = scores.shape[0]
    if n < 2:
        raise ContractViolation("LCE needs the positive plus at least one negative")
    return ad.cross_entropy(ad.reshape(scores, (1, n)), [0], [0])


def kd_kl_loss(teacher_scores, student_scores: Tensor) -> Tensor:
    """KL(softmax(teacher) || softmax(student)); teacher is a constant."""
    teacher = np.asarray(teacher_scores.data if isinstance(teacher_scores, Tensor) else teacher_scores,
                         dtype=np.float64)
    if teacher.shape != student_scores.data.shape:
        raise ContractViolation(
            f"teacher/student candidate counts differ: {teacher.shape} vs {student_scores.data.shape}"
        )
    shifted = teacher - teacher.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    return ad.kl_div(Tensor(probs.astype(student_scores.data.dtype)), ad.softmax(student_scores))


def stage_loss(
    cfg: StageConfig,
    group: TrainGroup,
    corpus: dict[str, str],
    vocab: Vocab,
    retriever: tuple[dict[str, Tensor], ModelConfig],
    reranker: Optional[tuple[dict[str, Tensor], ModelConfig]] = None,
) -> Tensor:
    """Single-group stage loss (no in-batch candidates).

    The batched trainer uses the same building blocks with in-batch
    negatives joined into the softmax."""
    params, model_cfg = retriever
    texts = [group.query, group.typo_query or group.query,
             corpus[group.pos_pid]] + [corpus[p] for p in group.neg_pids[: cfg.negatives]]
    sequences = [_query_ids(t, vocab, model_cfg.max_len) for t in texts]
    ids, mask = modeling.pad_batch(sequences)
    cls, _ = modeling.encode(params, model_cfg, ids, mask, with_mlm_logits=False)
    d = model_cfg.d_model
    q_emb = ad.reshape(ad.slice_axis(cls, 0, 0, 1), (d,))
    q_typo_emb = ad.reshape(ad.slice_axis(cls, 0, 1, 2), (d,))
    candidates = ad.slice_axis(cls, 0, 2, cls.shape[0])
    pos_emb = ad.reshape(ad.slice_axis(cls, 0, 2, 3), (d,))
    negs = ad.slice_axis(cls, 0, 3, cls.shape[0])

    l_ce = contrastive_loss(q_emb, pos_emb, negs)
    l_st = st_loss(q_emb, q_typo_emb, candidates) if cfg.use_st else Tensor(np.zeros((), dtype=np.float32))
    if cfg.stage in (1, 2):
        return l_ce + l_st
    if reranker is None:
        raise ConfigError("stage 3 requires a frozen reranker checkpoint")
    passage_texts = texts[2:]
    teacher = reranker_pair_scores(reranker[0], reranker[1], vocab, group.query, passage_texts)
    student_clean = _candidate_scores(q_emb, candidates)
    student_typo = _candidate_scores(q_typo_emb, candidates)
    l_kl_q = kd_kl_loss(teacher, student_clean)
    l_kl_qtypo = kd_kl_loss(teacher, student_typo)
    return l_kl_q + l_kl_qtypo + cfg.tau * (l_ce + l_st)


# ---------------------------------------------------------------------------
# shared encoding helpers


def _query_ids(text: str, vocab: Vocab, max_len: int) -> list[int]:
    ids, _ = encode_words(normalize_words(text), vocab)
    return [CLS] + ids[: max_len - 2] + [SEP]


class _TextEncoder:
    """Caches tokenization; one padded forward per call."""

    def __init__(self, vocab: Vocab, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self.cache: dict[str, list[int]] = {}

    def ids(self, text: str) -> list[int]:
        out = self.cache.get(text)
        if out is None:
            out = _query_ids(text, self.vocab, self.max_len)
            self.cache[text] = out
        return out

    def encode(self, params, cfg: ModelConfig, texts: Sequence[str]) -> Tensor:
        ids, mask = modeling.pad_batch([self.ids(t) for t in texts])
        cls, _ = modeling.encode(params, cfg, ids, mask, with_mlm_logits=False)
        return cls


def reranker_pair_scores(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocab,
    query: str,
    passages: Sequence[str],
) -> np.ndarray:
    """Frozen-teacher matching scores for (query, passage) pairs."""
    q_ids, _ = encode_words(normalize_words(query), vocab)
    sequences = []
    for passage in passages:
        p_ids, _ = encode_words(normalize_words(passage), vocab)
        sequences.append(modeling.build_pair_ids(q_ids, p_ids, cfg.max_len))
    ids, mask = modeling.pad_batch(sequences)
    with ad.no_grad():
        scores = modeling.rerank_scores(params, cfg, ids, mask)
    return scores.data.copy()


# ---------------------------------------------------------------------------
# batched stage training


def _log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _batch_stage_loss(
    cfg: StageConfig,
    batch: list[TrainGroup],
    corpus: dict[str, str],
    encoder: _TextEncoder,
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    teacher_scores: Optional[dict[str, np.ndarray]] = None,
) -> Tensor:
    """Stage loss over a batch of groups with shared in-batch candidates."""
    passages: list[str] = []
    offsets: list[int] = []
    sizes: list[int] = []
    for group in batch:
        offsets.append(len(passages))
        negs = group.neg_pids[: cfg.negatives]
        passages.append(corpus[group.pos_pid])
        passages.extend(corpus[p] for p in negs)
        sizes.append(1 + len(negs))
    g = len(batch)

    q_cls = encoder.encode(params, model_cfg, [grp.query for grp in batch])
    p_cls = encoder.encode(params, model_cfg, passages)
    s = ad.matmul(q_cls, ad.transpose(p_cls))
    l_total = ad.cross_entropy(s, offsets, list(range(g)))

    need_typo = cfg.use_st or cfg.stage == 3
    s_typo = None
    if need_typo:
        qt_cls = encoder.encode(params, model_cfg, [grp.typo_query or grp.query for grp in batch])
        s_typo = ad.matmul(qt_cls, ad.transpose(p_cls))

    if cfg.use_st:
        # KL(softmax(s) || softmax(s')) row-wise with the clean side constant:
        # sum p*(log p - log_softmax(s')), averaged over rows.
        p_const = np.exp(_log_softmax_rows(s.data))
        const_term = float((p_const * _log_softmax_rows(s.data)).sum() / g)
        ls_typo = ad.log_softmax(s_typo, axis=-1)
        cross = ad.sum_(ad.mul(Tensor(p_const.astype(np.float32)), ls_typo))
        l_st = Tensor(np.asarray(const_term, dtype=np.float32)) - cross * (1.0 / g)
        l_total = l_total + l_st

    if cfg.stage == 3:
        if teacher_scores is None:
            raise ConfigError("stage 3 requires precomputed reranker teacher scores")
        kd_terms: list[Tensor] = []
        for i, group in enumerate(batch):
            teacher = teacher_scores[group.qid]
            lo, size = offsets[i], sizes[i]
            local = ad.reshape(ad.slice_axis(ad.slice_axis(s, 0, i, i + 1), 1, lo, lo + size), (size,))
            local_typo = ad.reshape(
                ad.slice_axis(ad.slice_axis(s_typo, 0, i, i + 1), 1, lo, lo + size), (size,)
            )
            kd_terms.append(kd_kl_loss(teacher, local))
            kd_terms.append(kd_kl_loss(teacher, local_typo))
        kd_sum = kd_terms[0]
        for term in kd_terms[1:]:
            kd_sum = kd_sum + term
        # l_total currently holds tau-scaled regularizers' pre-image
        l_total = kd_sum * (1.0 / g) + cfg.tau * l_total
    return l_total


def _regenerate_typo_queries(
    groups: list[TrainGroup], editor_cfg: EditorConfig, rng: np.random.Generator
) -> None:
    """Fresh misspelled query per group (one typo on a non-stopword), drawn
    each epoch for typo diversity; ineligible queries fall back to clean."""
    for group in groups:
        try:
            group.typo_query = make_eval_typo_query(
                group.query, editor_cfg.stopwords, rng, editor_cfg.min_typo_word_len
            )
        except NotEligible:
            group.typo_query = group.query


def train_stage(
    groups: list[TrainGroup],
    corpus: dict[str, str],
    vocab: Vocab,
    init_params: dict[str, Tensor],
    model_cfg: ModelConfig,
    cfg: StageConfig,
    editor_cfg: EditorConfig,
    seed: int,
    out_dir,
    reranker: Optional[tuple[dict[str, Tensor], ModelConfig]] = None,
    dev_eval=None,
) -> Path:
    """Train one fine-tuning stage; returns the checkpoint path."""
    if cfg.stage == 3 and reranker is None:
        raise ConfigError("stage 3 requires a frozen reranker checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in init_params.items()}
    encoder = _TextEncoder(vocab, model_cfg.max_len)
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, (len(groups) + cfg.batch_size - 1) // cfg.batch_size)
    schedule = linear_warmup_schedule(cfg.lr, cfg.warmup, cfg.epochs * steps_per_epoch)

    teacher_scores: Optional[dict[str, np.ndarray]] = None
    if cfg.stage == 3:
        teacher_scores = {}
        for group in groups:
            passages = [corpus[group.pos_pid]] + [corpus[p] for p in group.neg_pids[: cfg.negatives]]
            teacher_scores[group.qid] = reranker_pair_scores(
                reranker[0], reranker[1], vocab, group.query, passages
            )

    log_path = out_dir / f"stage{cfg.stage}_train.tsv"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([seed, cfg.stage, epoch])
            if cfg.use_st or cfg.stage == 3:
                _regenerate_typo_queries(groups, editor_cfg, rng)
            order = rng.permutation(len(groups))
            epoch_loss = 0.0
            for b in range(steps_per_epoch):
                batch = [groups[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                if not batch:
                    continue
                zero_grads(params)
                loss = _batch_stage_loss(cfg, batch, corpus, encoder, params, model_cfg, teacher_scores)
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(f"non-finite stage-{cfg.stage} loss at epoch {epoch} batch {b}")
                ad.backward(loss)
                adamw_step(params, opt, schedule)
                epoch_loss += value
                log.write(f"{epoch}\t{b}\t{value:.6f}\n")
            logger.info("stage %d epoch %d mean loss %.4f", cfg.stage, epoch, epoch_loss / steps_per_epoch)
            if dev_eval is not None:
                metrics = dev_eval(params, model_cfg)
                log.write(f"{epoch}\tdev\t{json.dumps(metrics)}\n")

    ckpt = out_dir / f"stage{cfg.stage}_retriever.trdr"
    modeling.save_model(ckpt, params, model_cfg)
    return ckpt


def run_stage(
    stage: int,
    groups_path,
    corpus_path,
    vocab_path,
    init_checkpoint,
    cfg: StageConfig,
    editor_cfg: EditorConfig,
    seed: int,
    out_dir,
    reranker_checkpoint=None,
    dev_eval=None,
) -> Path:
    """Path-level wrapper that verifies stage prerequisites exist."""
    requirements = {
        "training groups file": groups_path,
        "corpus file": corpus_path,
        "vocabulary file": vocab_path,
        f"stage-{stage} initial checkpoint": init_checkpoint,
    }
    if stage == 3:
        if reranker_checkpoint is None:
            raise ConfigError("stage 3 requires --reranker")
        requirements["reranker checkpoint"] = reranker_checkpoint
    for what, path in requirements.items():
        if not Path(path).exists():
            raise DependencyError(f"stage {stage} requires {what}: missing file {path}")
    groups = [TrainGroup.from_dict(d) for d in read_groups(groups_path)]
    corpus = read_corpus(corpus_path)
    vocab = Vocab.load(vocab_path)
    init_params, model_cfg, _ = modeling.load_model(init_checkpoint)
    reranker = None
    if stage == 3:
        rr_params, rr_cfg, _ = modeling.load_model(reranker_checkpoint)
        reranker = (rr_params, rr_cfg)
    return train_stage(
        groups, corpus, vocab, init_params, model_cfg, cfg, editor_cfg, seed, out_dir,
        reranker=reranker, dev_eval=dev_eval,
    )


# ---------------------------------------------------------------------------
# reranker training


def train_reranker(
    groups: list[TrainGroup],
    corpus: dict[str, str],
    vocab: Vocab,
    init_params: dict[str, Tensor],
    model_cfg: ModelConfig,
    cfg: RerankerTrainConfig,
    seed: int,
    out_dir,
) -> Path:
    """LCE training of the cross-encoder over (pos + mined negatives) groups."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in init_params.items()}
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, (len(groups) + cfg.batch_size - 1) // cfg.batch_size)
    schedule = linear_warmup_schedule(cfg.lr, cfg.warmup, cfg.epochs * steps_per_epoch)
    pair_cache: dict[tuple[str, str], list[int]] = {}

    def pair_ids(query: str, pid: str) -> list[int]:
        key = (query, pid)
        out = pair_cache.get(key)
        if out is None:
            q_ids, _ = encode_words(normalize_words(query), vocab)
            p_ids, _ = encode_words(normalize_words(corpus[pid]), vocab)
            out = modeling.build_pair_ids(q_ids, p_ids, model_cfg.max_len)
            pair_cache[key] = out
        return out

    log_path = out_dir / "reranker_train.tsv"
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([seed, 91, epoch])
            order = rng.permutation(len(groups))
            for b in range(steps_per_epoch):
                batch = [groups[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                if not batch:
                    continue
                sequences = []
                sizes = []
                for group in batch:
                    pids = [group.pos_pid] + group.neg_pids[: cfg.negatives]
                    sizes.append(len(pids))
                    sequences.extend(pair_ids(group.query, pid) for pid in pids)
                ids, mask = modeling.pad_batch(sequences)
                zero_grads(params)
                scores = modeling.rerank_scores(params, model_cfg, ids, mask)
                terms = []
                offset = 0
                for size in sizes:
                    terms.append(lce_loss(ad.slice_axis(scores, 0, offset, offset + size)))
                    offset += size
                loss = terms[0]
                for term in terms[1:]:
                    loss = loss + term
                loss = loss * (1.0 / len(terms))
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(f"non-finite reranker loss at epoch {epoch} batch {b}")
                ad.backward(loss)
                adamw_step(params, opt, schedule)
                log.write(f"{epoch}\t{b}\t{value:.6f}\n")

    ckpt = out_dir / "reranker_final.trdr"
    modeling.save_model(ckpt, params, model_cfg)
    return ckpt
