"""Typo-aware bottlenecked pre-training loop.

Each step edits raw texts into an encoder view (typos + MLM masking) and a
decoder view (original text with every edited word masked), computes the
two masked cross-entropies, and takes one optimizer step on their sum.
Per-step rngs are derived from (seed, step), so resuming from a checkpoint
needs no serialized rng state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as modeling
from .autodiff import Tensor
from .data_io import read_corpus
from .errors import ContractViolation
from .model import ModelConfig
from .optim import AdamWState, adamw_step, linear_warmup_schedule, zero_grads
from .tokenizer import CLS, MASK, SEP, Vocab, encode_word, normalize_words
from .typo_editor import (
    EditorConfig,
    Mlm,
    MlmSub,
    Typo,
    apply_typo,
    plan_edits,
    render_decoder_mask_set,
)

logger = logging.getLogger(__name__)

N_SPECIALS = 5


@dataclass
class PretrainBatch:
    """Padded encoder/decoder id grids plus flat masked-position bookkeeping.

    Positions index into the flattened [b * n, V] logit matrix; targets are
    the original (pre-edit) subword ids at those positions.
    """

    enc_ids: np.ndarray
    enc_attn: np.ndarray
    dec_ids: np.ndarray
    dec_attn: np.ndarray
    enc_positions: np.ndarray
    enc_targets: np.ndarray
    dec_positions: np.ndarray
    dec_targets: np.ndarray


@dataclass
class PretrainSchedule:
    steps: int = 2000
    lr: float = 3e-4
    warmup: int = 100
    batch_size: int = 32
    weight_decay: float = 0.01
    log_interval: int = 10
    checkpoint_interval: int = 500
    # decay horizon; leave None to decay to zero exactly at `steps`. A short
    # run with a longer horizon behaves like a prefix of the longer run.
    horizon: Optional[int] = None


class _PieceCache:
    """Memoized word -> subword ids (typo'd variants hit this too)."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab
        self.cache: dict[str, tuple[int, ...]] = {}

    def __call__(self, word: str) -> tuple[int, ...]:
        pieces = self.cache.get(word)
        if pieces is None:
            pieces = tuple(encode_word(word, self.vocab))
            self.cache[word] = pieces
        return pieces


def _truncate_words(words: list[str], pieces: _PieceCache, budget: int) -> list[str]:
    total = 0
    kept = []
    for word in words:
        n = len(pieces(word))
        if total + n > budget:
            break
        kept.append(word)
        total += n
    return kept


def _build_example(
    words: list[str],
    cfg: EditorConfig,
    pieces: _PieceCache,
    rng: np.random.Generator,
    vocab_size: int,
    recover_typos_on_encoder: bool,
):
    plan = plan_edits(words, cfg, rng)
    decoder_masked = render_decoder_mask_set(plan)

    enc_ids: list[int] = [CLS]
    enc_positions: list[int] = []
    enc_targets: list[int] = []
    dec_ids: list[int] = [CLS]
    dec_positions: list[int] = []
    dec_targets: list[int] = []

    for idx, (word, action) in enumerate(zip(words, plan.actions)):
        original = pieces(word)
        if isinstance(action, Typo):
            perturbed = pieces(apply_typo(word, action.type, action.char_pos, action.replacement_char))
            start = len(enc_ids)
            enc_ids.extend(perturbed)
            if recover_typos_on_encoder:
                overlap = min(len(perturbed), len(original))
                enc_positions.extend(range(start, start + overlap))
                enc_targets.extend(original[:overlap])
        elif isinstance(action, Mlm):
            start = len(enc_ids)
            if action.sub is MlmSub.MASK_TOKEN:
                enc_ids.extend([MASK] * len(original))
            elif action.sub is MlmSub.RANDOM_TOKEN:
                enc_ids.extend(int(rng.integers(N_SPECIALS, vocab_size)) for _ in original)
            else:
                enc_ids.extend(original)
            enc_positions.extend(range(start, start + len(original)))
            enc_targets.extend(original)
        else:
            enc_ids.extend(original)

        start = len(dec_ids)
        if idx in decoder_masked:
            dec_ids.extend([MASK] * len(original))
            dec_positions.extend(range(start, start + len(original)))
            dec_targets.extend(original)
        else:
            dec_ids.extend(original)
    enc_ids.append(SEP)
    dec_ids.append(SEP)
    return enc_ids, enc_positions, enc_targets, dec_ids, dec_positions, dec_targets


def build_pretrain_batch(
    texts: Sequence[str],
    cfg: EditorConfig,
    vocab: Vocab,
    rng: np.random.Generator,
    max_len: int = 64,
    recover_typos_on_encoder: bool = False,
    pieces: Optional[_PieceCache] = None,
) -> PretrainBatch:
    if not texts:
        raise ContractViolation("build_pretrain_batch requires at least one text")
    pieces = pieces or _PieceCache(vocab)
    examples = []
    for text in texts:
        words = _truncate_words(normalize_words(text), pieces, max_len - 2)
        for _ in range(8):
            example = _build_example(words, cfg, pieces, rng, len(vocab), recover_typos_on_encoder)
            if len(example[0]) <= max_len:
                break
            words = words[:-1]  # typo expansion overflowed: retry shorter
        examples.append(example)

    enc_ids, enc_attn = modeling.pad_batch([e[0] for e in examples])
    dec_ids, dec_attn = modeling.pad_batch([e[3] for e in examples])
    n_enc, n_dec = enc_ids.shape[1], dec_ids.shape[1]
    enc_positions, enc_targets, dec_positions, dec_targets = [], [], [], []
    for row, (_, ep, et, _, dp, dt) in enumerate(examples):
        enc_positions.extend(row * n_enc + p for p in ep)
        enc_targets.extend(et)
        dec_positions.extend(row * n_dec + p for p in dp)
        dec_targets.extend(dt)
    return PretrainBatch(
        enc_ids, enc_attn, dec_ids, dec_attn,
        np.asarray(enc_positions, dtype=np.int64),
        np.asarray(enc_targets, dtype=np.int64),
        np.asarray(dec_positions, dtype=np.int64),
        np.asarray(dec_targets, dtype=np.int64),
    )


def build_mlm_batch(
    texts: Sequence[str],
    alpha: float,
    decoder_mask_floor: float,
    vocab: Vocab,
    rng: np.random.Generator,
    max_len: int = 64,
    pieces: Optional[_PieceCache] = None,
) -> PretrainBatch:
    """Plain bottlenecked-MLM batches, written without the typo editor.

    The typo-aware builder with beta=0 and floor=alpha must degenerate to
    exactly these batches (bit for bit, same seed).
    """
    import math as _math

    if not texts:
        raise ContractViolation("build_mlm_batch requires at least one text")
    pieces = pieces or _PieceCache(vocab)
    examples = []
    for text in texts:
        words = _truncate_words(normalize_words(text), pieces, max_len - 2)
        subs: list[Optional[MlmSub]] = []
        for _ in words:
            if rng.random() < alpha:
                v = rng.random()
                subs.append(MlmSub.MASK_TOKEN if v < 0.8 else MlmSub.RANDOM_TOKEN if v < 0.9 else MlmSub.UNCHANGED)
            else:
                subs.append(None)
        masked = {i for i, s in enumerate(subs) if s is MlmSub.MASK_TOKEN}
        need = _math.ceil(decoder_mask_floor * len(words)) - len(masked)
        extra: set[int] = set()
        keep = [i for i, s in enumerate(subs) if s is None]
        if need > 0 and keep:
            chosen = rng.choice(len(keep), size=min(need, len(keep)), replace=False)
            extra = {keep[j] for j in chosen}
        dec_masked = {i for i, s in enumerate(subs) if s is not None} | extra

        enc_ids: list[int] = [CLS]
        ep: list[int] = []
        et: list[int] = []
        dec_ids: list[int] = [CLS]
        dp: list[int] = []
        dt: list[int] = []
        for i, word in enumerate(words):
            original = pieces(word)
            start = len(enc_ids)
            if subs[i] is MlmSub.MASK_TOKEN:
                enc_ids.extend([MASK] * len(original))
            elif subs[i] is MlmSub.RANDOM_TOKEN:
                enc_ids.extend(int(rng.integers(N_SPECIALS, len(vocab))) for _ in original)
            else:
                enc_ids.extend(original)
            if subs[i] is not None:
                ep.extend(range(start, start + len(original)))
                et.extend(original)
            start = len(dec_ids)
            if i in dec_masked:
                dec_ids.extend([MASK] * len(original))
                dp.extend(range(start, start + len(original)))
                dt.extend(original)
            else:
                dec_ids.extend(original)
        enc_ids.append(SEP)
        dec_ids.append(SEP)
        examples.append((enc_ids, ep, et, dec_ids, dp, dt))

    enc_ids, enc_attn = modeling.pad_batch([e[0] for e in examples])
    dec_ids, dec_attn = modeling.pad_batch([e[3] for e in examples])
    n_enc, n_dec = enc_ids.shape[1], dec_ids.shape[1]
    enc_positions, enc_targets, dec_positions, dec_targets = [], [], [], []
    for row, (_, ep, et, _, dp, dt) in enumerate(examples):
        enc_positions.extend(row * n_enc + p for p in ep)
        enc_targets.extend(et)
        dec_positions.extend(row * n_dec + p for p in dp)
        dec_targets.extend(dt)
    return PretrainBatch(
        enc_ids, enc_attn, dec_ids, dec_attn,
        np.asarray(enc_positions, dtype=np.int64),
        np.asarray(enc_targets, dtype=np.int64),
        np.asarray(dec_positions, dtype=np.int64),
        np.asarray(dec_targets, dtype=np.int64),
    )


def pretrain_losses(
    batch: PretrainBatch,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    bottleneck: bool = True,
    train_rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Optional[Tensor], Tensor]:
    """(L_enc, L_dec, L_pt) as graph nodes; L_dec is None without bottleneck."""
    hidden = modeling.encoder_hidden(params, cfg, batch.enc_ids, batch.enc_attn, train_rng=train_rng)
    l_enc = modeling.masked_lm_loss(params, hidden, batch.enc_positions, batch.enc_targets)
    if not bottleneck:
        return l_enc, None, l_enc
    cls = modeling.cls_of(hidden, cfg)
    dec_hidden = modeling.decoder_hidden(params, cfg, cls, batch.dec_ids, batch.dec_attn, train_rng=train_rng)
    l_dec = modeling.masked_lm_loss(params, dec_hidden, batch.dec_positions, batch.dec_targets)
    return l_enc, l_dec, l_enc + l_dec


def pretrain_step(
    batch: PretrainBatch,
    params: dict[str, Tensor],
    trainable: dict[str, Tensor],
    cfg: ModelConfig,
    opt_state: AdamWState,
    lr_schedule,
    bottleneck: bool = True,
    train_rng: Optional[np.random.Generator] = None,
    step_index: int = -1,
) -> tuple[float, float, float, float]:
    zero_grads(trainable)
    l_enc, l_dec, l_pt = pretrain_losses(batch, params, cfg, bottleneck, train_rng)
    enc_val = l_enc.item()
    dec_val = l_dec.item() if l_dec is not None else 0.0
    total = l_pt.item()
    if not np.isfinite(total):
        digest = hash(batch.enc_ids.tobytes()) & 0xFFFFFFFF
        raise RuntimeError(
            f"non-finite pre-training loss at step {step_index} (batch digest {digest:08x})"
        )
    ad.backward(l_pt)
    lr = adamw_step(trainable, opt_state, lr_schedule)
    return enc_val, dec_val, total, lr


def _optimizer_extra(opt: AdamWState) -> dict[str, np.ndarray]:
    extra = {f"m/{k}": v for k, v in opt.m.items()}
    extra.update({f"v/{k}": v for k, v in opt.v.items()})
    extra["step"] = np.array([opt.step], dtype=np.float32)
    return extra


def _restore_optimizer(extra: dict[str, np.ndarray], opt: AdamWState) -> None:
    opt.step = int(extra["step"][0])
    for key, arr in extra.items():
        if key.startswith("m/"):
            opt.m[key[2:]] = arr.astype(np.float32).copy()
        elif key.startswith("v/"):
            opt.v[key[2:]] = arr.astype(np.float32).copy()


def run_pretraining(
    corpus_path,
    vocab: Vocab,
    out_dir,
    editor_cfg: EditorConfig,
    model_cfg: ModelConfig,
    schedule: PretrainSchedule,
    seed: int,
    bottleneck: bool = True,
    recover_typos_on_encoder: bool = False,
    resume_from=None,
) -> Path:
    """Train on a `pid \\t text` corpus; returns the encoder-only checkpoint.

    Writes `metrics.tsv` (step, L_enc, L_dec, lr), periodic full-state
    checkpoints for resume, and `encoder_final.trdr` with the decoder
    discarded.
    """
    corpus_path = Path(corpus_path)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus file not found: {corpus_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texts = list(read_corpus(corpus_path).values())

    if resume_from is not None:
        params, model_cfg, extra = modeling.load_model(resume_from)
        opt = AdamWState(lr=schedule.lr, weight_decay=schedule.weight_decay)
        _restore_optimizer(extra, opt)
        start_step = opt.step
    else:
        params = modeling.init_params(model_cfg, np.random.default_rng([seed, 0]))
        modeling.init_decoder_from_encoder(params, model_cfg)
        opt = AdamWState(lr=schedule.lr, weight_decay=schedule.weight_decay)
        start_step = 0

    if bottleneck:
        trainable = params
    else:
        trainable = {k: params[k] for k in modeling.encoder_param_names(model_cfg)}
    lr_schedule = linear_warmup_schedule(schedule.lr, schedule.warmup,
                                         schedule.horizon or schedule.steps)
    pieces = _PieceCache(vocab)
    log_path = out_dir / "metrics.tsv"
    log_mode = "a" if resume_from is not None else "w"
    with open(log_path, log_mode, encoding="utf-8") as log:
        for step in range(start_step + 1, schedule.steps + 1):
            rng = np.random.default_rng([seed, step])
            idx = rng.choice(len(texts), size=min(schedule.batch_size, len(texts)), replace=False)
            batch = build_pretrain_batch(
                [texts[i] for i in idx], editor_cfg, vocab, rng,
                max_len=model_cfg.max_len,
                recover_typos_on_encoder=recover_typos_on_encoder,
                pieces=pieces,
            )
            train_rng = rng if model_cfg.dropout > 0.0 else None
            l_enc, l_dec, _, lr = pretrain_step(
                batch, params, trainable, model_cfg, opt, lr_schedule,
                bottleneck=bottleneck, train_rng=train_rng, step_index=step,
            )
            if step % schedule.log_interval == 0:
                log.write(f"{step}\t{l_enc:.6f}\t{l_dec:.6f}\t{lr:.8f}\n")
            if step % schedule.checkpoint_interval == 0 and step < schedule.steps:
                modeling.save_model(out_dir / f"state_step{step}.trdr", params, model_cfg,
                                    extra=_optimizer_extra(opt))
    modeling.save_model(out_dir / "state_final.trdr", params, model_cfg, extra=_optimizer_extra(opt))
    encoder_only = {k: params[k] for k in modeling.encoder_param_names(model_cfg)}
    final = out_dir / "encoder_final.trdr"
    modeling.save_model(final, encoder_only, model_cfg)
    logger.info("pre-training finished: %s", final)
    return final
