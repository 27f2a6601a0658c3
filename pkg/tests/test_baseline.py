import numpy as np
import pytest

from spotvit import baseline as B
from spotvit import engine as E
from spotvit import tensor as T
from spotvit.errors import ContractError
from spotvit.predictor import topk_select

from helpers import build_tiny_engine


def random_map_stack(rng, layers, heads, size):
    stack = []
    for _ in range(layers):
        per_head = []
        for _ in range(heads):
            m = rng.random((size, size)) + 1e-3
            per_head.append(m / m.sum(axis=1, keepdims=True))
        stack.append(per_head)
    return stack


class TestHeuristicScore:
    def test_single_layer_single_head(self):
        rng = np.random.default_rng(0)
        stack = random_map_stack(rng, 1, 1, 5)
        np.testing.assert_array_equal(B.heuristic_score(stack), stack[0][0][0, 1:])

    def test_two_layer_average(self):
        rng = np.random.default_rng(1)
        stack = random_map_stack(rng, 2, 1, 4)
        want = (stack[0][0][0, 1:] + stack[1][0][0, 1:]) / 2
        np.testing.assert_allclose(B.heuristic_score(stack), want, atol=1e-15)

    def test_twelve_layer_six_head_against_triple_loop(self):
        rng = np.random.default_rng(2)
        stack = random_map_stack(rng, 12, 6, 9)
        total = np.zeros(8)
        count = 0
        for layer in stack:
            for head in layer:
                for t in range(8):
                    total[t] += head[0, 1 + t]
                count += 1
        np.testing.assert_allclose(B.heuristic_score(stack), total / count, atol=1e-12)

    def test_empty_stack_rejected(self):
        with pytest.raises(ContractError):
            B.heuristic_score([])


class TestHeuristicPrune:
    def test_shares_selection_semantics_with_topk(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(4, 30))
            scores = rng.random(n)
            prev = np.ones(n + 1, dtype=bool)
            k = int(rng.integers(1, n + 1))
            np.testing.assert_array_equal(
                B.heuristic_prune(scores, k, prev), topk_select(scores, k, prev)
            )

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        scores = rng.random(10)
        prev = np.ones(11, dtype=bool)
        base = B.heuristic_prune(scores, 4, prev)
        np.testing.assert_array_equal(B.heuristic_prune(scores * 37.5, 4, prev), base)


class TestRunHeuristic:
    def test_masks_are_hierarchical_and_exact(self):
        _, backbone, cfg = build_tiny_engine(rho=0.6)
        scfg = E.SparsifyConfig(rho=0.6, stage_layers=[2, 3], mode="inference")
        img = np.random.default_rng(5).random((16, 16, 1))
        logits, retention = B.run_heuristic(backbone, scfg, img)
        assert logits.shape == (cfg.num_classes,)
        assert retention.kept_counts() == E.target_counts(16, 0.6, 2)
        for earlier, later in zip(retention.masks, retention.masks[1:]):
            assert not (later & ~earlier).any()

    def test_jaccard_against_learned_masks(self):
        eng, backbone, _ = build_tiny_engine(rho=0.6)
        scfg = E.SparsifyConfig(rho=0.6, stage_layers=[2, 3], mode="inference")
        img = np.random.default_rng(6).random((16, 16, 1))
        with T.no_grad():
            learned = eng.run(img).retention
        _, heur = B.run_heuristic(backbone, scfg, img)
        overlaps = B.jaccard_overlap(learned, heur)
        assert len(overlaps) == 2
        assert all(0.0 <= j <= 1.0 for j in overlaps)

    def test_identical_scores_give_identical_masks(self):
        # the heuristic and the learned path share one selection routine
        rng = np.random.default_rng(7)
        scores = rng.random(12)
        prev = np.ones(13, dtype=bool)
        np.testing.assert_array_equal(
            B.heuristic_prune(scores, 5, prev), topk_select(scores, 5, prev)
        )


class TestVarianceReduction:
    def test_single_layer_recovers_noise_variance(self):
        rng = np.random.default_rng(8)
        var = B.variance_reduction_trial(1.0, 1, 10**5, rng)
        assert var == pytest.approx(1.0, rel=0.1)

    def test_four_layers(self):
        rng = np.random.default_rng(9)
        var = B.variance_reduction_trial(1.0, 4, 10**5, rng)
        assert var == pytest.approx(0.25, rel=0.1)

    def test_twelve_layers(self):
        rng = np.random.default_rng(10)
        var = B.variance_reduction_trial(1.0, 12, 10**5, rng)
        assert var == pytest.approx(1.0 / 12.0, rel=0.15)

    def test_trial_count_guard(self):
        with pytest.raises(ContractError):
            B.variance_reduction_trial(1.0, 4, 10, np.random.default_rng(0))
