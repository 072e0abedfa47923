import math

import numpy as np
import pytest

from typolab import model as modeling
from typolab.autodiff import Tensor
from typolab.model import ModelConfig, init_decoder_from_encoder, init_params
from typolab.optim import AdamWState, linear_warmup_schedule
from typolab.pretrain import (
    PretrainSchedule,
    build_mlm_batch,
    build_pretrain_batch,
    pretrain_losses,
    pretrain_step,
    run_pretraining,
)
from typolab.tokenizer import CLS, MASK, SEP, train_vocab
from typolab.typo_editor import EditorConfig

TEXTS = [
    "retikula bavode sumato retikula lonipa",
    "bavode werilo tesuna werilo bavode",
    "sumato lonipa retikula tesuna werilo",
    "tesuna retikula bavode sumato lonipa",
]


@pytest.fixture(scope="module")
def vocab():
    return train_vocab(TEXTS, 120)


@pytest.fixture(scope="module")
def model_cfg(vocab):
    return ModelConfig(d_model=16, n_heads=2, encoder_layers=2, ffn_dim=32,
                       vocab_size=len(vocab), max_len=32)


def fresh_params(model_cfg, seed=0):
    params = init_params(model_cfg, np.random.default_rng(seed))
    init_decoder_from_encoder(params, model_cfg)
    return params


class TestBatchConstruction:
    def test_no_edits_reproduces_original(self, vocab):
        cfg = EditorConfig(alpha=0.0, beta=0.0, decoder_mask_floor=0.0)
        batch = build_pretrain_batch(TEXTS[:2], cfg, vocab, np.random.default_rng(0))
        assert np.array_equal(batch.enc_ids, batch.dec_ids)
        assert batch.enc_positions.size == 0
        assert batch.dec_positions.size == 0

    def test_typo_word_masks_decoder_not_encoder(self, vocab):
        cfg = EditorConfig(alpha=0.0, beta=1.0, decoder_mask_floor=0.0)
        batch = build_pretrain_batch([TEXTS[0]], cfg, vocab, np.random.default_rng(3))
        assert batch.enc_positions.size == 0
        assert batch.dec_positions.size > 0
        masked = batch.dec_ids.reshape(-1)[batch.dec_positions]
        assert np.all(masked == MASK)
        # decoder targets are the original ids
        clean = build_pretrain_batch([TEXTS[0]],
                                     EditorConfig(alpha=0, beta=0, decoder_mask_floor=0),
                                     vocab, np.random.default_rng(3))
        assert np.array_equal(clean.dec_ids.reshape(-1)[batch.dec_positions], batch.dec_targets)

    def test_deterministic_given_seed(self, vocab):
        cfg = EditorConfig()
        a = build_pretrain_batch(TEXTS, cfg, vocab, np.random.default_rng(77))
        b = build_pretrain_batch(TEXTS, cfg, vocab, np.random.default_rng(77))
        for field in ("enc_ids", "dec_ids", "enc_positions", "enc_targets", "dec_positions", "dec_targets"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_decoder_masks_superset_of_encoder_mask_tokens(self, vocab):
        cfg = EditorConfig(alpha=0.4, beta=0.3)
        for seed in range(8):
            batch = build_pretrain_batch(TEXTS, cfg, vocab, np.random.default_rng(seed))
            enc_masked = {p for p in np.flatnonzero(batch.enc_ids.reshape(-1) == MASK)}
            # encoder grid and decoder grid have different widths; compare per row/word
            assert batch.dec_positions.size >= len(enc_masked)

    def test_degeneracy_identity_with_plain_mlm(self, vocab):
        """beta=0 with floor=alpha is bitwise identical to the independent
        plain bottlenecked-MLM builder."""
        alpha = 0.3
        cfg = EditorConfig(alpha=alpha, beta=0.0, decoder_mask_floor=alpha)
        a = build_pretrain_batch(TEXTS, cfg, vocab, np.random.default_rng(123))
        b = build_mlm_batch(TEXTS, alpha, alpha, vocab, np.random.default_rng(123))
        for field in ("enc_ids", "enc_attn", "dec_ids", "dec_attn",
                      "enc_positions", "enc_targets", "dec_positions", "dec_targets"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field


class TestPretrainStep:
    def test_initial_loss_near_log_vocab(self, vocab, model_cfg):
        params = fresh_params(model_cfg)
        cfg = EditorConfig()
        batch = build_pretrain_batch(TEXTS * 4, cfg, vocab, np.random.default_rng(0))
        l_enc, l_dec, _ = pretrain_losses(batch, params, model_cfg)
        expected = math.log(model_cfg.vocab_size)
        assert abs(l_enc.item() - expected) / expected < 0.15
        assert abs(l_dec.item() - expected) / expected < 0.15

    def test_zero_masked_batch_keeps_params(self, vocab, model_cfg):
        params = fresh_params(model_cfg)
        before = {k: t.data.copy() for k, t in params.items()}
        cfg = EditorConfig(alpha=0.0, beta=0.0, decoder_mask_floor=0.0)
        batch = build_pretrain_batch(TEXTS[:2], cfg, vocab, np.random.default_rng(0))
        opt = AdamWState(lr=1e-3, weight_decay=0.0)
        l_enc, l_dec, l_pt, _ = pretrain_step(
            batch, params, params, model_cfg, opt, linear_warmup_schedule(1e-3, 1, 10))
        assert l_pt == 0.0
        for name, arr in before.items():
            assert np.array_equal(arr, params[name].data), name

    def test_loss_invariant_to_extra_padding(self, vocab, model_cfg):
        params = fresh_params(model_cfg)
        cfg = EditorConfig()
        batch = build_pretrain_batch(TEXTS, cfg, vocab, np.random.default_rng(5))
        _, _, base = pretrain_losses(batch, params, model_cfg)

        def pad_more(ids, attn, positions, extra):
            b, n = ids.shape
            ids2 = np.concatenate([ids, np.zeros((b, extra), dtype=ids.dtype)], axis=1)
            attn2 = np.concatenate([attn, np.zeros((b, extra), dtype=attn.dtype)], axis=1)
            rows, cols = positions // n, positions % n
            return ids2, attn2, rows * (n + extra) + cols

        enc_ids, enc_attn, enc_pos = pad_more(batch.enc_ids, batch.enc_attn, batch.enc_positions, 3)
        dec_ids, dec_attn, dec_pos = pad_more(batch.dec_ids, batch.dec_attn, batch.dec_positions, 2)
        from typolab.pretrain import PretrainBatch

        padded = PretrainBatch(enc_ids, enc_attn, dec_ids, dec_attn,
                               enc_pos, batch.enc_targets, dec_pos, batch.dec_targets)
        _, _, padded_loss = pretrain_losses(padded, params, model_cfg)
        assert abs(padded_loss.item() - base.item()) < 1e-6


class TestRunPretraining:
    def test_run_artifacts_and_resume(self, vocab, model_cfg, tmp_path):
        corpus = tmp_path / "corpus.tsv"
        corpus.write_text("".join(f"p{i}\t{t}\n" for i, t in enumerate(TEXTS * 8)))
        vocab_dir = tmp_path / "run"
        schedule = PretrainSchedule(steps=6, lr=1e-3, warmup=2, batch_size=4,
                                    log_interval=2, checkpoint_interval=4)
        final = run_pretraining(corpus, vocab, vocab_dir, EditorConfig(), model_cfg,
                                schedule, seed=5)
        assert final.exists()
        log_lines = (vocab_dir / "metrics.tsv").read_text().strip().splitlines()
        assert len(log_lines) == 3  # steps / log_interval

        # encoder-only final checkpoint: no decoder tensors
        params, _, _ = modeling.load_model(final)
        assert not any(k.startswith("dec") for k in params)

        # resume from the step-4 checkpoint reproduces steps 5..6 exactly
        resumed_dir = tmp_path / "resumed"
        resumed_dir.mkdir()
        import shutil

        shutil.copy(vocab_dir / "state_step4.trdr", resumed_dir / "state_step4.trdr")
        run_pretraining(corpus, vocab, resumed_dir, EditorConfig(), model_cfg,
                        schedule, seed=5, resume_from=resumed_dir / "state_step4.trdr")
        a, _, _ = modeling.load_model(vocab_dir / "state_final.trdr")
        b, _, _ = modeling.load_model(resumed_dir / "state_final.trdr")
        for name in a:
            assert np.allclose(a[name].data, b[name].data, atol=1e-6), name

    def test_missing_corpus_raises(self, vocab, model_cfg, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_pretraining(tmp_path / "nope.tsv", vocab, tmp_path, EditorConfig(),
                            model_cfg, PretrainSchedule(steps=1), seed=0)
