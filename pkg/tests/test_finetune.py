import math

import numpy as np
import pytest

from typolab import autodiff as ad
from typolab import model as modeling
from typolab.autodiff import Tensor, backward
from typolab.errors import ConfigError, ContractViolation, DependencyError
from typolab.finetune import (
    RerankerTrainConfig,
    StageConfig,
    TrainGroup,
    _batch_stage_loss,
    _TextEncoder,
    contrastive_loss,
    kd_kl_loss,
    lce_loss,
    reranker_pair_scores,
    run_stage,
    score,
    st_loss,
    stage_loss,
    train_reranker,
    train_stage,
)
from typolab.model import ModelConfig, init_decoder_from_encoder, init_params, init_reranker_params
from typolab.tokenizer import train_vocab
from typolab.typo_editor import EditorConfig


def vec(*values):
    return Tensor(np.asarray(values, dtype=np.float64))


def grad_vec(*values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestScore:
    def test_orthogonal(self):
        assert score(vec(1, 0), vec(0, 1)).item() == 0.0

    def test_dot(self):
        assert score(vec(1, 2), vec(3, 4)).item() == 11.0

    def test_symmetry(self):
        q, p = vec(0.3, -1.2, 4.0), vec(1.5, 0.5, -2.0)
        assert score(q, p).item() == score(p, q).item()

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            score(vec(1, 2), vec(1, 2, 3))


class TestContrastiveLoss:
    def test_uniform_candidates(self):
        q = vec(0, 0)
        pos = vec(1, 0)
        negs = Tensor(np.array([[0, 1], [1, 1], [0.5, 0.5]], dtype=np.float64))
        # all scores are 0 because q is the zero vector -> uniform over 4
        assert contrastive_loss(q, pos, negs).item() == pytest.approx(math.log(4), abs=1e-9)

    def test_dominant_positive(self):
        q = vec(1.0)
        pos = vec(50.0)
        negs = Tensor(np.zeros((3, 1), dtype=np.float64))
        assert contrastive_loss(q, pos, negs).item() < 1e-9

    def test_softplus_case(self):
        q = vec(1.0)
        pos = vec(1.0)
        negs = Tensor(np.zeros((1, 1), dtype=np.float64))
        assert contrastive_loss(q, pos, negs).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-9)
        assert contrastive_loss(q, pos, negs).item() == pytest.approx(0.313262, abs=1e-6)

    def test_in_batch_candidates_join_softmax(self):
        q = vec(1.0)
        pos = vec(0.0)
        negs = Tensor(np.zeros((1, 1), dtype=np.float64))
        in_batch = Tensor(np.zeros((2, 1), dtype=np.float64))
        assert contrastive_loss(q, pos, negs, in_batch).item() == pytest.approx(math.log(4), abs=1e-9)

    def test_requires_a_negative(self):
        with pytest.raises(ContractViolation):
            contrastive_loss(vec(1.0), vec(1.0), Tensor(np.zeros((0, 1))))


class TestStLoss:
    def test_same_query_zero(self):
        q = vec(0.5, -0.5)
        cands = Tensor(np.array([[1, 0], [0, 1], [2, 2]], dtype=np.float64))
        assert st_loss(q, Tensor(q.data.copy()), cands).item() == pytest.approx(0.0, abs=1e-12)

    def test_clean_side_detached(self):
        q = grad_vec(0.7, 0.1)
        q_typo = grad_vec(-0.2, 0.4)
        cands = Tensor(np.array([[1, 0], [0, 1]], dtype=np.float64))
        backward(st_loss(q, q_typo, cands))
        assert q.grad is None
        assert q_typo.grad is not None and np.abs(q_typo.grad).sum() > 0

    def test_hand_computed_value(self):
        # scores(clean) = [2, 0], scores(typo) = [0, 0]; the expected value is
        # evaluated from the formula itself with plain floats
        q = vec(2.0)
        q_typo = vec(0.0)
        cands = Tensor(np.array([[1.0], [0.0]], dtype=np.float64))
        p1 = math.exp(2) / (math.exp(2) + 1)
        expected = p1 * math.log(p1 / 0.5) + (1 - p1) * math.log((1 - p1) / 0.5)
        got = st_loss(q, q_typo, cands).item()
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(0.3278133, abs=1e-6)


class TestLceLoss:
    def test_uniform_over_65(self):
        scores = Tensor(np.zeros(65, dtype=np.float64))
        assert lce_loss(scores).item() == pytest.approx(math.log(65), abs=1e-9)
        assert lce_loss(scores).item() == pytest.approx(4.174387, abs=1e-6)

    def test_dominant_positive(self):
        scores = Tensor(np.array([60.0] + [0.0] * 10))
        assert lce_loss(scores).item() < 1e-9

    def test_equals_contrastive_without_in_batch(self):
        rng = np.random.default_rng(0)
        d = 4
        q = Tensor(rng.normal(size=d))
        pos = Tensor(rng.normal(size=d))
        negs = Tensor(rng.normal(size=(5, d)))
        joint = np.concatenate([[pos.data], negs.data], axis=0) @ q.data
        assert lce_loss(Tensor(joint)).item() == pytest.approx(
            contrastive_loss(q, pos, negs).item(), abs=1e-9)

    def test_needs_negative(self):
        with pytest.raises(ContractViolation):
            lce_loss(Tensor(np.zeros(1)))


class TestKdKlLoss:
    def test_student_equals_teacher(self):
        scores = np.array([0.4, -1.0, 2.0])
        assert kd_kl_loss(scores, Tensor(scores.copy())).item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_only_to_student(self):
        teacher = grad_vec(1.0, 0.0)
        student = grad_vec(0.0, 0.0)
        backward(kd_kl_loss(teacher, student))
        assert teacher.grad is None
        assert student.grad is not None

    def test_hand_computed_value(self):
        p1 = math.exp(1) / (math.exp(1) + 1)
        expected = p1 * math.log(p1 / 0.5) + (1 - p1) * math.log((1 - p1) / 0.5)
        got = kd_kl_loss(np.array([1.0, 0.0]), Tensor(np.array([0.0, 0.0]))).item()
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(0.1109441, abs=1e-6)

    def test_count_mismatch(self):
        with pytest.raises(ContractViolation):
            kd_kl_loss(np.zeros(3), Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# stage-level behavior on a tiny model


TEXTS = {
    "p0": "retikula bavode sumato lonipa",
    "p1": "bavode werilo tesuna werilo",
    "p2": "sumato lonipa retikula tesuna",
    "p3": "tesuna retikula bavode sumato",
    "p4": "werilo sumato lonipa bavode",
}


@pytest.fixture(scope="module")
def tiny():
    vocab = train_vocab(TEXTS.values(), 140)
    cfg = ModelConfig(d_model=16, n_heads=2, encoder_layers=2, ffn_dim=32,
                      vocab_size=len(vocab), max_len=24)
    params = init_params(cfg, np.random.default_rng(0))
    init_decoder_from_encoder(params, cfg)
    reranker = init_reranker_params(cfg, np.random.default_rng(1))
    return vocab, cfg, params, reranker


def make_group(qid="q0", typo=None):
    return TrainGroup(qid=qid, query="retikula sumato", pos_pid="p0",
                      neg_pids=["p1", "p4"], typo_query=typo)


class TestStageLoss:
    def test_stage1_finite(self, tiny):
        vocab, cfg, params, _ = tiny
        loss = stage_loss(StageConfig(stage=1, negatives=2), make_group(typo="retikula sumaot"),
                          TEXTS, vocab, (params, cfg))
        assert np.isfinite(loss.item())

    def test_stage3_requires_reranker(self, tiny):
        vocab, cfg, params, _ = tiny
        with pytest.raises(ConfigError):
            stage_loss(StageConfig(stage=3, negatives=2), make_group(typo="x"),
                       TEXTS, vocab, (params, cfg), reranker=None)

    def test_stage3_tau_zero_is_pure_distillation(self, tiny):
        vocab, cfg, params, reranker = tiny
        group = make_group(typo="retikula sumato")
        kd_only = stage_loss(StageConfig(stage=3, negatives=2, tau=0.0), group,
                             TEXTS, vocab, (params, cfg), reranker=(reranker, cfg))
        full = stage_loss(StageConfig(stage=3, negatives=2, tau=0.2), group,
                          TEXTS, vocab, (params, cfg), reranker=(reranker, cfg))
        l_ce = stage_loss(StageConfig(stage=1, negatives=2, use_st=False), group,
                          TEXTS, vocab, (params, cfg))
        l_st_and_ce = stage_loss(StageConfig(stage=1, negatives=2, use_st=True), group,
                                 TEXTS, vocab, (params, cfg))
        # q' = q makes the ST term vanish: stage1 losses agree
        assert l_ce.item() == pytest.approx(l_st_and_ce.item(), abs=1e-7)
        assert full.item() == pytest.approx(kd_only.item() + 0.2 * l_ce.item(), abs=1e-6)

    def test_stage1_equals_stage2_as_function(self, tiny):
        vocab, cfg, params, _ = tiny
        group = make_group(typo="retikula sumaot")
        l1 = stage_loss(StageConfig(stage=1, negatives=2), group, TEXTS, vocab, (params, cfg))
        l2 = stage_loss(StageConfig(stage=2, negatives=2), group, TEXTS, vocab, (params, cfg))
        assert l1.item() == pytest.approx(l2.item(), abs=1e-9)

    def test_batch_path_matches_single_group(self, tiny):
        vocab, cfg, params, _ = tiny
        group = make_group(typo="retikula sumaot")
        cfg1 = StageConfig(stage=1, negatives=2, batch_size=1)
        single = stage_loss(cfg1, group, TEXTS, vocab, (params, cfg))
        encoder = _TextEncoder(vocab, cfg.max_len)
        batch = _batch_stage_loss(cfg1, [group], TEXTS, encoder, params, cfg)
        assert batch.item() == pytest.approx(single.item(), abs=1e-5)

    def test_reranker_gets_no_gradient_in_stage3(self, tiny):
        vocab, cfg, params, reranker = tiny
        group = make_group(typo="retikula sumaot")
        for t in reranker.values():
            t.grad = None
        loss = stage_loss(StageConfig(stage=3, negatives=2), group, TEXTS, vocab,
                          (params, cfg), reranker=(reranker, cfg))
        backward(loss)
        assert all(t.grad is None for t in reranker.values())


class TestTrainingLoops:
    def test_train_stage_writes_checkpoint_and_log(self, tiny, tmp_path):
        vocab, cfg, params, _ = tiny
        groups = [make_group(qid=f"q{i}") for i in range(6)]
        stage_cfg = StageConfig(stage=1, negatives=2, epochs=1, batch_size=3, lr=1e-3, warmup=1)
        ckpt = train_stage(groups, TEXTS, vocab, params, cfg, stage_cfg,
                           EditorConfig(), seed=3, out_dir=tmp_path)
        assert ckpt.exists()
        assert (tmp_path / "stage1_train.tsv").read_text().strip()

    def test_train_stage_deterministic(self, tiny, tmp_path):
        vocab, cfg, params, _ = tiny
        groups = [make_group(qid=f"q{i}") for i in range(4)]
        stage_cfg = StageConfig(stage=1, negatives=2, epochs=1, batch_size=2, lr=1e-3, warmup=1)
        c1 = train_stage(groups, TEXTS, vocab, params, cfg, stage_cfg,
                         EditorConfig(), seed=9, out_dir=tmp_path / "a")
        c2 = train_stage(groups, TEXTS, vocab, params, cfg, stage_cfg,
                         EditorConfig(), seed=9, out_dir=tmp_path / "b")
        a, _, _ = modeling.load_model(c1)
        b, _, _ = modeling.load_model(c2)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name

    def test_run_stage_missing_artifact_names_file(self, tiny, tmp_path):
        with pytest.raises(DependencyError) as err:
            run_stage(1, tmp_path / "groups.jsonl", tmp_path / "corpus.tsv",
                      tmp_path / "vocab.txt", tmp_path / "init.trdr",
                      StageConfig(stage=1), EditorConfig(), 0, tmp_path)
        assert "groups.jsonl" in str(err.value)

    def test_run_stage3_requires_reranker_flag(self, tmp_path):
        with pytest.raises(ConfigError):
            run_stage(3, tmp_path / "g", tmp_path / "c", tmp_path / "v",
                      tmp_path / "i", StageConfig(stage=3), EditorConfig(), 0, tmp_path)

    @pytest.mark.parametrize("seed", [2, 3, 4])
    def test_reranker_training_learns_ordering(self, tiny, tmp_path, seed):
        """After a short LCE run the reranker puts positives above random
        passages for >= 80% of held-out pairs, and the loss drops >= 30%."""
        vocab, cfg, _, _ = tiny
        reranker = init_reranker_params(cfg, np.random.default_rng([seed, 5]))
        rng = np.random.default_rng(11)
        queries = {
            "p0": "retikula sumato", "p1": "bavode werilo", "p2": "sumato tesuna",
            "p3": "tesuna bavode", "p4": "werilo lonipa",
        }
        groups = []
        pids = list(TEXTS)
        for i in range(24):
            pos = pids[int(rng.integers(len(pids)))]
            negs = [p for p in pids if p != pos]
            groups.append(TrainGroup(qid=f"q{i}", query=queries[pos], pos_pid=pos,
                                     neg_pids=list(rng.permutation(negs))[:3]))
        rr_cfg = RerankerTrainConfig(negatives=3, lr=5e-3, epochs=50, batch_size=6, warmup=8)
        ckpt = train_reranker(groups, TEXTS, vocab, reranker, cfg, rr_cfg,
                              seed=seed, out_dir=tmp_path / str(seed))
        log = [float(line.split("\t")[2])
               for line in (tmp_path / str(seed) / "reranker_train.tsv").read_text().splitlines()]
        head = sum(log[:4]) / 4
        tail = sum(log[-4:]) / 4
        assert tail <= 0.7 * head

        params, rr_model_cfg, _ = modeling.load_model(ckpt)
        wins = total = 0
        for pos_pid, query in queries.items():
            for neg_pid in pids:
                if neg_pid == pos_pid:
                    continue
                scores = reranker_pair_scores(params, rr_model_cfg, vocab, query,
                                              [TEXTS[pos_pid], TEXTS[neg_pid]])
                wins += scores[0] > scores[1]
                total += 1
        assert wins / total >= 0.8
