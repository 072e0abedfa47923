import numpy as np
import pytest

from typolab.errors import ContractViolation
from typolab.typo_editor import (
    EditorConfig,
    EditPlan,
    Keep,
    Mlm,
    MlmSub,
    NoNeighbor,
    NotEligible,
    Typo,
    TypoType,
    apply_typo,
    default_stopwords,
    make_eval_typo_query,
    plan_edits,
    qwerty_adjacency,
    render_decoder_mask_set,
    render_encoder_text,
    sample_typo,
)


def levenshtein(a: str, b: str) -> int:
    """Independent edit-distance oracle for perturbation size checks."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


class TestApplyTypo:
    def test_delete(self):
        assert apply_typo("hello", TypoType.RAND_DELETE, 1) == "hllo"

    def test_swap_neighbor(self):
        assert apply_typo("hello", TypoType.SWAP_NEIGHBOR, 1) == "hlelo"

    def test_insert(self):
        assert apply_typo("cat", TypoType.RAND_INSERT, 1, "x") == "cxat"

    def test_substitute(self):
        assert apply_typo("cat", TypoType.RAND_SUB, 0, "b") == "bat"

    def test_swap_adjacent_uses_keyboard_neighbors(self):
        # enumerate the shipped adjacency map independently
        table = qwerty_adjacency()
        result = apply_typo("word", TypoType.SWAP_ADJACENT, 0)
        assert result[0] in table["w"]
        assert result[1:] == "ord"

    def test_swap_adjacent_preserves_case(self):
        result = apply_typo("Word", TypoType.SWAP_ADJACENT, 0)
        assert result[0].isupper()

    @pytest.mark.parametrize(
        "word,type,pos",
        [
            ("cat", TypoType.RAND_DELETE, 3),
            ("cat", TypoType.RAND_DELETE, -1),
            ("cat", TypoType.RAND_INSERT, 4),
            ("cat", TypoType.SWAP_NEIGHBOR, 2),
        ],
    )
    def test_position_out_of_range(self, word, type, pos):
        with pytest.raises(ContractViolation):
            apply_typo(word, type, pos, "x")

    def test_swap_adjacent_without_neighbors(self):
        with pytest.raises(NoNeighbor):
            apply_typo("a1c", TypoType.SWAP_ADJACENT, 1)


class TestSampleTypo:
    def test_edit_distance_at_most_two(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            perturbed, _ = sample_typo("information", rng)
            assert levenshtein("information", perturbed) <= 2

    def test_short_word_not_eligible(self):
        with pytest.raises(NotEligible):
            sample_typo("to", np.random.default_rng(0))

    def test_non_alphabetic_not_eligible(self):
        with pytest.raises(NotEligible):
            sample_typo("c3po", np.random.default_rng(0))

    def test_type_frequencies_uniform(self):
        rng = np.random.default_rng(12345)
        counts = {t: 0 for t in TypoType}
        n = 50_000
        for _ in range(n):
            _, typo_type = sample_typo("information", rng)
            counts[typo_type] += 1
        for t, c in counts.items():
            assert 0.19 <= c / n <= 0.21, f"{t}: {c / n:.4f}"


class TestPlanEdits:
    def test_empty_words_rejected(self):
        with pytest.raises(ContractViolation):
            plan_edits([], EditorConfig(), np.random.default_rng(0))

    def test_zero_rates_all_keep(self):
        cfg = EditorConfig(alpha=0.0, beta=0.0, decoder_mask_floor=0.0)
        plan = plan_edits(["alpha", "bravo", "charlie"], cfg, np.random.default_rng(0))
        assert all(isinstance(a, Keep) for a in plan.actions)
        assert not plan.extra_decoder_masks

    def test_floor_forces_extras(self):
        cfg = EditorConfig(alpha=0.0, beta=0.0, decoder_mask_floor=0.5)
        words = [f"word{i}" for i in range(10)]
        plan = plan_edits(words, cfg, np.random.default_rng(0))
        assert len(plan.extra_decoder_masks) == 5

    def test_action_rates_match_configuration(self):
        cfg = EditorConfig(alpha=0.3, beta=0.3)
        rng = np.random.default_rng(99)
        words = ["retrieval"] * 1000
        n_mlm = n_typo = 0
        total = 100_000
        for _ in range(total // len(words)):
            plan = plan_edits(words, cfg, rng)
            n_mlm += len(plan.mlm_word_indices())
            n_typo += len(plan.typo_word_indices())
        sd = (0.3 * 0.7 / total) ** 0.5
        assert abs(n_mlm / total - 0.3) <= 3 * sd
        assert abs(n_typo / total - 0.3) <= 3 * sd

    def test_typo_rate_scales_with_eligibility(self):
        cfg = EditorConfig(alpha=0.3, beta=0.3)
        rng = np.random.default_rng(5)
        words = ["ok", "retrieval"] * 500  # half the words are ineligible
        total = 100_000
        n_typo = 0
        for _ in range(total // len(words)):
            plan = plan_edits(words, cfg, rng)
            n_typo += len(plan.typo_word_indices())
        sd = (0.15 * 0.85 / total) ** 0.5
        assert abs(n_typo / total - 0.15) <= 3 * sd

    def test_mlm_and_typo_disjoint(self):
        cfg = EditorConfig(alpha=0.4, beta=0.4)
        for seed in range(50):
            plan = plan_edits(["december"] * 20, cfg, np.random.default_rng(seed))
            assert not (plan.mlm_word_indices() & plan.typo_word_indices())
            assert not (plan.extra_decoder_masks & (plan.mlm_word_indices() | plan.typo_word_indices()))

    def test_deterministic_given_seed(self):
        cfg = EditorConfig()
        words = ["alpha", "bravo", "charlie", "delta", "echo"] * 4
        a = plan_edits(words, cfg, np.random.default_rng(1234))
        b = plan_edits(words, cfg, np.random.default_rng(1234))
        assert a == b

    def test_invalid_config(self):
        with pytest.raises(ContractViolation):
            EditorConfig(alpha=0.7, beta=0.7)
        with pytest.raises(ContractViolation):
            EditorConfig(alpha=-0.1)
        with pytest.raises(ContractViolation):
            EditorConfig(min_typo_word_len=1)


class TestRendering:
    def test_typo_applied_others_unchanged(self):
        words = ["the", "cat", "sat"]
        plan = EditPlan((Keep(), Typo(TypoType.SWAP_NEIGHBOR, 1, None), Keep()))
        assert render_encoder_text(words, plan) == ["the", "cta", "sat"]

    def test_all_keep_is_identity(self):
        words = ["one", "two", "three"]
        plan = EditPlan(tuple(Keep() for _ in words))
        assert render_encoder_text(words, plan) == words

    def test_mlm_word_text_unchanged(self):
        # the mask marker is resolved at the subword level downstream
        words = ["mask", "me"]
        plan = EditPlan((Mlm(MlmSub.MASK_TOKEN), Keep()))
        assert render_encoder_text(words, plan) == words

    def test_length_mismatch_rejected(self):
        plan = EditPlan((Keep(),))
        with pytest.raises(ContractViolation):
            render_encoder_text(["a", "b"], plan)

    def test_decoder_mask_set_union(self):
        plan = EditPlan((Keep(), Mlm(MlmSub.MASK_TOKEN), Keep(), Typo(TypoType.RAND_DELETE, 0, None)))
        assert render_decoder_mask_set(plan) == {1, 3}

    def test_decoder_mask_set_extras_only(self):
        plan = EditPlan((Keep(), Keep(), Keep()), frozenset({0, 2}))
        assert render_decoder_mask_set(plan) == {0, 2}

    def test_decoder_mask_superset_of_typos(self):
        cfg = EditorConfig(alpha=0.3, beta=0.3)
        for seed in range(30):
            plan = plan_edits(["keyboard"] * 15, cfg, np.random.default_rng(seed))
            masks = render_decoder_mask_set(plan)
            assert masks >= plan.typo_word_indices()
            assert masks >= plan.mlm_word_indices()


class TestEvalTypoQuery:
    def test_stopwords_never_perturbed(self):
        stopwords = default_stopwords()
        rng = np.random.default_rng(3)
        for _ in range(100):
            out = make_eval_typo_query("what is the capital of france", stopwords, rng)
            words = out.split()
            assert words[1] == "is" and words[2] == "the" and words[4] == "of"

    def test_exactly_one_word_changed(self):
        stopwords = default_stopwords()
        rng = np.random.default_rng(4)
        original = "quantum entanglement experiments review".split()
        for _ in range(100):
            out = make_eval_typo_query(" ".join(original), stopwords, rng).split()
            assert len(out) == len(original)
            assert sum(a != b for a, b in zip(original, out)) == 1

    def test_all_stopwords_not_eligible(self):
        with pytest.raises(NotEligible):
            make_eval_typo_query("of the a", default_stopwords(), np.random.default_rng(0))


class TestFloorInvariant:
    def test_floor_met_or_keeps_exhausted(self):
        rng = np.random.default_rng(17)
        for alpha, beta, floor in ((0.1, 0.1, 0.6), (0.0, 0.0, 0.9), (0.3, 0.3, 0.5)):
            cfg = EditorConfig(alpha=alpha, beta=beta, decoder_mask_floor=floor)
            for _ in range(20):
                words = ["spinning"] * int(rng.integers(1, 30))
                plan = plan_edits(words, cfg, rng)
                masked = len(render_decoder_mask_set(plan))
                keeps_left = sum(
                    1 for i, a in enumerate(plan.actions)
                    if isinstance(a, Keep) and i not in plan.extra_decoder_masks
                )
                assert masked >= min(int(np.ceil(floor * len(words))), masked + keeps_left)
                if keeps_left > 0:
                    assert masked >= int(np.ceil(floor * len(words)))
