"""
Tests for the relator model
===========================

Structural oracles for the encoder and the mask prompt, purity of the shared
context block, mask-head edge values, an end-to-end gradient check and the
inference probes (the target mask never reaches a prediction; the text
condition never reaches a visual-only prediction).
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from function.compute_mask.masks import BinaryMask
from function.compute_model.fusion import AlignConfig, FusionConfig
from function.compute_model.model import CondTokens, ModelConfig, ObjectRelatorModel, logits_to_mask
from function.compute_tensor.tensor_core import Tensor, grad_check, no_grad
from function.errors import ConditionError, ConfigError, DimensionError, StateError


@pytest.fixture
def model(small_config):
    return ObjectRelatorModel(small_config, seed=3)


def _box(size, y0, y1, x0, x1):
    bits = np.zeros((size, size), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return BinaryMask.from_array(bits)


class TestConfig:
    def test_visual_token_count_fixed(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_visual_tokens=3)

    def test_patch_grid_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=20, patch_size=8)

    def test_parameter_groups(self, model):
        names = model.params.names()
        assert names[0] == "encoder.patch_w"
        assert model.params.names("mcfuse.") == ["mcfuse.w_q", "mcfuse.w_k", "mcfuse.w_v", "mcfuse.alpha"]
        assert model.k_lea() == pytest.approx(0.8)


class TestEncoder:
    def test_shapes(self, model, rng):
        f_patches, f_pixels = model.encode_image(rng.uniform(size=(16, 16, 3)))
        assert f_patches.shape == (16, 8)
        assert f_pixels.shape == (256, 8)

    def test_zero_image_gives_zero_patches(self, model):
        f_patches, _ = model.encode_image(np.zeros((16, 16, 3)))
        np.testing.assert_array_equal(f_patches.data, np.zeros((16, 8)))

    def test_patch_locality(self, model, rng):
        image = rng.uniform(size=(16, 16, 3))
        changed = image.copy()
        changed[4:8, 8:12] = 0.0                 # patch (1, 2)
        before = model.embed_patches(image).data
        after = model.embed_patches(changed).data
        differs = np.any(before != after, axis=1)
        assert np.flatnonzero(differs).tolist() == [1 * 4 + 2]

    def test_pixel_features_structure(self, model, rng):
        image = rng.uniform(size=(16, 16, 3))
        f_patches, f_pixels = model.encode_image(image)
        p = model.params
        refined = f_patches.data @ p["decoder.refine_w"].data
        for y, x in ((0, 0), (5, 13), (15, 15), (8, 3)):
            expected = (refined[(y // 4) * 4 + x // 4] + image[y, x] @ p["decoder.color_w"].data
                        + p["decoder.refine_b"].data[0])
            assert np.max(np.abs(f_pixels.data[y * 16 + x] - expected)) < 1e-12

    def test_wrong_image_size(self, model):
        with pytest.raises(DimensionError):
            model.encode_image(np.zeros((8, 8, 3)))


class TestMaskPrompt:
    def test_single_patch_fills_every_token(self, model, rng):
        f_patches = model.embed_patches(rng.uniform(size=(16, 16, 3)))
        tokens = model.pool_visual_tokens(f_patches, _box(16, 0, 4, 0, 4)).data
        for i in range(4):
            assert np.max(np.abs(tokens[i] - f_patches.data[0])) < 1e-12

    def test_full_mask_gives_quadrant_means(self, model, rng):
        f_patches = model.embed_patches(rng.uniform(size=(16, 16, 3)))
        tokens = model.pool_visual_tokens(f_patches, _box(16, 0, 16, 0, 16)).data
        grid = f_patches.data.reshape(4, 4, 8)
        quadrants = [grid[:2, :2], grid[:2, 2:], grid[2:, :2], grid[2:, 2:]]
        for i, block in enumerate(quadrants):
            assert np.max(np.abs(tokens[i] - block.reshape(-1, 8).mean(axis=0))) < 1e-12

    def test_random_masks_match_brute_force(self, model, rng):
        f_patches = model.embed_patches(rng.uniform(size=(16, 16, 3))).data
        for _ in range(50):
            bits = rng.random((16, 16)) < rng.uniform(0.05, 0.5)
            if not bits.any():
                continue
            overlap = np.zeros(16)
            for y in range(16):
                for x in range(16):
                    overlap[(y // 4) * 4 + x // 4] += bits[y, x] / 16.0
            weights = model.pooling_weights(BinaryMask.from_array(bits))
            for i in range(4):
                qy, qx = divmod(i, 2)
                members = [gy * 4 + gx for gy in range(4) for gx in range(4)
                           if gy // 2 == qy and gx // 2 == qx]
                mass = sum(overlap[j] for j in members)
                expected = np.zeros(16)
                if mass > 0:
                    for j in members:
                        expected[j] = overlap[j] / mass
                else:
                    expected = overlap / overlap.sum()
                assert np.max(np.abs(weights[i] - expected)) < 1e-12
                pooled = weights[i] @ f_patches
                assert np.max(np.abs(pooled - expected @ f_patches)) < 1e-12

    def test_empty_mask_is_a_condition_error(self, model):
        with pytest.raises(ConditionError):
            model.pooling_weights(BinaryMask.empty(16, 16))

    def test_text_category_outside_model(self, model, pair_factory):
        sample = replace(pair_factory(), text_category=5)
        with pytest.raises(ConfigError):
            model.condition_tokens(sample)


class TestContextBlock:
    def test_pure_and_repeatable(self, model, pair_factory):
        sample = pair_factory()
        f_patches = model.embed_patches(sample.target_image)
        tokens = model.condition_tokens(sample)
        a = model.context_forward(f_patches, tokens)
        b = model.context_forward(f_patches, tokens)
        np.testing.assert_array_equal(a.e_vis_query.data, b.e_vis_query.data)
        np.testing.assert_array_equal(a.e_txt.data, b.e_txt.data)

    def test_both_passes_share_weights(self, model, pair_factory):
        sample = pair_factory()
        f_patches = model.embed_patches(sample.target_image)
        tokens = model.condition_tokens(sample)
        mirrored = CondTokens(tokens.t_ins, tokens.t_txt, tokens.t_vis_query, tokens.t_vis_query, tokens.t_mask)
        query = model.context_forward(f_patches, mirrored).e_vis_query
        target = model.context_forward(f_patches, mirrored, use_target_vis=True).e_vis_target
        np.testing.assert_array_equal(query.data, target.data)

    def test_target_pass_needs_target_tokens(self, model, pair_factory):
        sample = pair_factory()
        f_patches = model.embed_patches(sample.target_image)
        with pytest.raises(StateError):
            model.context_forward(f_patches, model.condition_tokens(sample), use_target_vis=True)


class TestMaskHead:
    def test_zero_condition_gives_half_probability(self, rng):
        model = ObjectRelatorModel(ModelConfig(dim=8, image_size=16, patch_size=4, dice_weight=0.0))
        model.params["head.bias"].data[...] = 0.0
        f_pixels = Tensor(rng.normal(size=(256, 8)))
        zeros = Tensor(np.zeros((4, 8)))
        logits, loss = model.mask_head(f_pixels, zeros, Tensor(np.zeros((1, 8))), gt=_box(16, 2, 9, 3, 7))
        np.testing.assert_array_equal(logits.data, np.zeros((256, 1)))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_saturated_logits_have_near_zero_loss(self, model):
        gt = _box(16, 2, 9, 3, 7)
        logits = np.where(gt.bits.reshape(-1, 1), 40.0, -40.0)
        assert model.mask_loss(Tensor(logits), gt).item() < 1e-6

    def test_threshold_at_zero_logit(self):
        mask = logits_to_mask(np.array([[-1e-9, 0.0], [2.0, -3.0]]))
        assert mask.bits.tolist() == [[False, True], [True, False]]


class TestForward:
    def test_end_to_end_gradients(self, small_config, pair_factory):
        model = ObjectRelatorModel(small_config, seed=1)
        samples = [pair_factory(), pair_factory()]
        align = AlignConfig("euclidean", lambda_xobj=0.5)

        def loss(params):
            total = None
            for sample in samples:
                term = model.forward(sample, align, use_alignment=True).total
                total = term if total is None else total + term
            return total

        assert grad_check(loss, model.params, eps=1e-5) < 1e-4

    def test_alignment_needs_visible_target(self, model, pair_factory):
        result = model.forward(pair_factory(target_empty=True), use_alignment=True)
        assert result.l_xobj is None
        assert result.total.item() == result.l_mask.item()

    def test_before_align_placement(self, small_config, pair_factory):
        model = ObjectRelatorModel(small_config, FusionConfig(placement="before_align"), seed=2)
        result = model.forward(pair_factory(), use_alignment=True)
        assert result.l_xobj is not None and math.isfinite(result.l_xobj.item())

    def test_invisible_query_rejected(self, model, pair_factory):
        sample = replace(pair_factory(), query_mask=BinaryMask.empty(16, 16), visible_query=False)
        with pytest.raises(ConditionError):
            model.forward(sample)

    def test_disabled_mcfuse_uses_visual_embedding(self, small_config, pair_factory):
        model = ObjectRelatorModel(small_config, mcfuse_enabled=False)
        emb = model.forward(pair_factory()).embeddings
        assert emb.e_cond is emb.e_vis_query and emb.ca_fuse is None


class TestInference:
    def test_target_mask_never_read(self, model, pair_factory, rng):
        sample = pair_factory()
        probe = replace(sample, target_mask=BinaryMask.from_array(rng.random((16, 16)) < 0.5),
                        visible_target=True, category=(sample.category + 1) % 5)
        np.testing.assert_array_equal(model.predict_logits(sample), model.predict_logits(probe))

    def test_visual_only_ignores_text(self, model, pair_factory):
        sample = pair_factory()
        other = replace(sample, text_category=(sample.text_category + 2) % 5)
        np.testing.assert_array_equal(model.predict_logits(sample, use_text=False),
                                      model.predict_logits(other, use_text=False))

    def test_prediction_shape_and_no_tape(self, model, pair_factory):
        logits = model.predict_logits(pair_factory())
        assert logits.shape == (16, 16)
        assert model.params["head.bias"].grad is None
        assert model.predict(pair_factory()).shape == (16, 16)

    def test_embedding_gap(self, model, pair_factory):
        assert model.embedding_gap([pair_factory(), pair_factory()]) >= 0.0
        assert math.isnan(model.embedding_gap([pair_factory(target_empty=True)]))

    def test_inference_records_nothing(self, model, pair_factory):
        with no_grad():
            tokens = model.condition_tokens(pair_factory())
        assert tokens.t_vis_query._parents == ()
