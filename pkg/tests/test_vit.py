import numpy as np
import pytest

from spotvit import stats as S
from spotvit import tensor as T
from spotvit import vit as V
from spotvit.errors import ConfigError, ContractError
from spotvit.tensor import Tensor

from helpers import numerical_grad, relative_error


def tiny_cfg(**kw):
    base = dict(
        depth=2, embed_dim=8, heads=2, patch_size=4, image_size=8, num_classes=3
    )
    base.update(kw)
    return V.ViTConfig(**base)


def rand_image(rng, cfg):
    return rng.random((cfg.image_size, cfg.image_size, cfg.in_channels))


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ConfigError):
            tiny_cfg(embed_dim=9)
        with pytest.raises(ConfigError):
            tiny_cfg(image_size=10)


class TestPatchify:
    def test_deit_style_token_count(self):
        cfg = V.ViTConfig(
            depth=1, embed_dim=16, heads=2, patch_size=16, image_size=224,
            num_classes=10, in_channels=3,
        )
        model = V.VisionTransformer(cfg, seed=0)
        seq = model.patchify_embed(np.zeros((224, 224, 3)))
        assert seq.length == 197

    def test_small_grid(self):
        cfg = V.ViTConfig(depth=1, embed_dim=8, heads=1, patch_size=8, image_size=64)
        seq = V.VisionTransformer(cfg, seed=0).patchify_embed(np.zeros((64, 64, 1)))
        assert seq.length == 65

    def test_single_patch(self):
        cfg = V.ViTConfig(depth=1, embed_dim=8, heads=1, patch_size=16, image_size=16)
        seq = V.VisionTransformer(cfg, seed=0).patchify_embed(np.zeros((16, 16, 1)))
        assert seq.length == 2

    def test_wrong_image_shape_rejected(self):
        model = V.VisionTransformer(tiny_cfg(), seed=0)
        with pytest.raises(ConfigError):
            model.patchify_embed(np.zeros((9, 8, 1)))


class TestAttentionBlock:
    def test_dense_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=1)
        seq = model.patchify_embed(rand_image(rng, cfg))
        _, maps = model.attention_block(seq, None, layer=0)
        for m in maps:
            np.testing.assert_allclose(m.values.data.sum(axis=1), 1.0, atol=1e-10)
            assert (m.values.data >= 0).all()

    def test_masked_column_exactly_zero(self):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=2)
        seq = model.patchify_embed(rand_image(rng, cfg))
        mask = np.ones(seq.length, dtype=bool)
        mask[3] = False
        _, maps = model.attention_block(seq, mask, layer=0)
        for m in maps:
            assert (m.values.data[:, 3] == 0.0).all()
            np.testing.assert_allclose(m.values.data.sum(axis=1), 1.0, atol=1e-10)

    def test_all_false_mask_rejected(self):
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=3)
        seq = model.patchify_embed(np.zeros((8, 8, 1)))
        with pytest.raises(ContractError):
            model.attention_block(seq, np.zeros(seq.length, dtype=bool), layer=0)

    def test_mask_must_keep_class_token(self):
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=3)
        seq = model.patchify_embed(np.zeros((8, 8, 1)))
        mask = np.ones(seq.length, dtype=bool)
        mask[0] = False
        with pytest.raises(ContractError):
            model.attention_block(seq, mask, layer=0)

    def test_two_token_hand_computation(self):
        # One head, hand-set projections; replicate the attention arithmetic
        # (scaled scores, softmax, value mix) with plain numpy.
        cfg = V.ViTConfig(
            depth=1, embed_dim=2, heads=1, patch_size=4, image_size=4, num_classes=2
        )
        model = V.VisionTransformer(cfg, seed=4)
        rng = np.random.default_rng(5)
        wq, wk, wv = rng.normal(size=(3, 2, 2))
        model.params["block0.attn.wq"].data = wq
        model.params["block0.attn.wk"].data = wk
        model.params["block0.attn.wv"].data = wv
        model.params["block0.attn.wo"].data = np.eye(2)
        seq = model.patchify_embed(rng.random((4, 4, 1)))
        x = seq.tokens.data.copy()
        out_seq, maps = model.attention_block(seq, None, layer=0)

        g = model.params["block0.ln1.gain"].data
        b = model.params["block0.ln1.bias"].data
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        h = (x - mu) / np.sqrt(var + 1e-6) * g + b
        q, k, v = h @ wq, h @ wk, h @ wv
        scores = q @ k.T / np.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(maps[0].values.data, attn, atol=1e-12)
        expected_resid = x + attn @ v  # wo = I, bo = 0
        mu2 = expected_resid.mean(axis=1, keepdims=True)
        var2 = expected_resid.var(axis=1, keepdims=True)
        h2 = (expected_resid - mu2) / np.sqrt(var2 + 1e-6)
        w1 = model.params["block0.mlp.w1"].data
        b1 = model.params["block0.mlp.b1"].data
        w2 = model.params["block0.mlp.w2"].data
        from scipy.special import erf

        mid = h2 @ w1 + b1
        mid = mid * 0.5 * (1 + erf(mid / np.sqrt(2)))
        expected = expected_resid + mid @ w2
        np.testing.assert_allclose(out_seq.tokens.data, expected, atol=1e-12)


class TestForward:
    def test_logits_shape(self):
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=6)
        logits, maps, seq = model.forward(np.zeros((8, 8, 1)))
        assert logits.shape == (3,)
        assert len(maps) == cfg.depth and len(maps[0]) == cfg.heads

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=8)
        img = rand_image(rng, cfg)
        a, _, _ = model.forward(img)
        b, _, _ = model.forward(img)
        np.testing.assert_array_equal(a.data, b.data)

    def test_all_true_hooks_bit_identical_to_dense(self):
        rng = np.random.default_rng(9)
        cfg = tiny_cfg(depth=3)
        model = V.VisionTransformer(cfg, seed=10)
        img = rand_image(rng, cfg)
        dense, _, _ = model.forward(img)
        n = cfg.n_patches + 1
        hooked, _, _ = model.forward(
            img, retention_hooks={2: np.ones(n, dtype=bool)}
        )
        np.testing.assert_array_equal(dense.data, hooked.data)

    def test_hook_at_bad_layer_rejected(self):
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=11)
        with pytest.raises(ConfigError):
            model.forward(np.zeros((8, 8, 1)), retention_hooks={5: np.ones(5, bool)})


class TestPhysicalPrune:
    def test_keep_all_unchanged(self):
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=12)
        seq = model.patchify_embed(np.zeros((8, 8, 1)))
        out = V.physical_prune(seq, np.ones(seq.length, dtype=bool))
        np.testing.assert_array_equal(out.tokens.data, seq.tokens.data)
        np.testing.assert_array_equal(out.source_index, seq.source_index)

    def test_subset_order_preserved(self):
        seq = V.TokenSequence(
            Tensor(np.arange(10.0).reshape(5, 2)),
            np.ones(5, dtype=bool),
            np.arange(5),
        )
        out = V.physical_prune(seq, np.array([1, 0, 1, 0, 1], dtype=bool))
        np.testing.assert_array_equal(out.source_index, [0, 2, 4])
        np.testing.assert_array_equal(out.tokens.data[:, 0], [0.0, 4.0, 8.0])

    def test_masked_equals_pruned_logits(self):
        rng = np.random.default_rng(13)
        cfg = V.ViTConfig(
            depth=3, embed_dim=16, heads=2, patch_size=4, image_size=16, num_classes=4
        )
        model = V.VisionTransformer(cfg, seed=14)
        img = rand_image(rng, cfg)
        n = cfg.n_patches + 1
        mask = rng.random(n) > 0.4
        mask[0] = True

        masked_logits, _, _ = model.forward(img, retention_hooks={2: mask})

        with T.no_grad():
            seq = model.patchify_embed(img)
            seq, _ = model.attention_block(seq, None, layer=0)
            seq = V.physical_prune(seq, mask)
            seq, _ = model.attention_block(seq, None, layer=1)
            seq, _ = model.attention_block(seq, None, layer=2)
            pruned_logits = model.classify(seq)

        assert np.abs(masked_logits.data - pruned_logits.data).max() < 1e-8


class TestGradientThroughMaps:
    def test_finite_differences_into_statistics(self):
        # Two-layer toy model; the loss reads the layer-2 maps through the
        # descriptor pipeline, so the gradient must reach layer-1 weights.
        rng = np.random.default_rng(15)
        cfg = tiny_cfg()
        model = V.VisionTransformer(cfg, seed=16)
        # Default-scale weights leave attention almost uniform and gradients
        # too small for a well-conditioned difference quotient; scale up.
        for name, t in model.params.items():
            if ".attn.w" in name or ".mlp.w" in name:
                t.data = rng.normal(0.0, 0.6, size=t.data.shape)
        img = rand_image(rng, cfg)
        n_patch = cfg.n_patches
        mix = rng.random((n_patch, 6))
        wname = "block0.attn.wq"

        def loss_value() -> float:
            seq = model.patchify_embed(img)
            seq, _ = model.attention_block(seq, None, layer=0)
            _, maps = model.attention_block(seq, None, layer=1)
            total = None
            for m in maps:
                d = S.descriptor_from_matrix(m.values)
                term = T.sum_(T.mul(d.values, Tensor(mix)))
                total = term if total is None else T.add(total, term)
            return total

        loss = loss_value()
        T.backward(loss)
        analytic = model.params[wname].grad.copy()

        w = model.params[wname].data
        num = np.zeros_like(w)
        h = 1e-5
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + h
                up = loss_value().item()
                w[i, j] = orig - h
                down = loss_value().item()
                w[i, j] = orig
                num[i, j] = (up - down) / (2 * h)
        assert relative_error(analytic, num) < 1e-5
