"""TTA, majority voting, postprocessing and the composed pipeline."""

import numpy as np
import pytest

from bitrunet import reference
from bitrunet.data import make_sphere_case
from bitrunet.inference import (
    InferenceConfig,
    PostprocConfig,
    apply_flip,
    external_to_internal,
    flip_combos,
    internal_to_external,
    majority_vote,
    predict_case,
    predict_probs,
    tta_predict,
    volume_threshold_postprocess,
)
from bitrunet.model import BiTrUnetModel, ModelConfig
from bitrunet.tensor import Tensor
from bitrunet.training import LossConfig, TrainConfig, train_loop

rng = np.random.default_rng(23)


class ConstantScoreModel:
    """Stub: fixed per-class scores everywhere, any input."""

    dtype = np.float64

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    def forward(self, x):
        n, _, h, w, d = x.shape
        out = np.broadcast_to(
            self.scores[None, :, None, None, None], (n, len(self.scores), h, w, d)
        )
        return Tensor(out.copy())


class BackgroundModel(ConstantScoreModel):
    def __init__(self, k=4):
        scores = np.full(k, -5.0)
        scores[0] = 5.0
        super().__init__(scores)


def tiny_trained_model(iters=12, size=16):
    cfg = ModelConfig(in_channels=4, base_width=4, num_classes=2, embed_dim=16,
                      vit_layers=1, heads=2, ffn_hidden=32,
                      input_size=(size, size, size))
    model = BiTrUnetModel(cfg, seed=2, dtype=np.float32)
    rec = make_sphere_case(size=size, radius=5, seed=8)
    train_loop(model, [(rec.volume.data, rec.label.astype(np.int64))],
               TrainConfig(iters=iters, loss=LossConfig(num_classes=2), seed=1))
    return model


class TestLabels:
    def test_bijection(self):
        internal = np.array([0, 1, 2, 3], dtype=np.uint8)
        ext = internal_to_external(internal)
        assert ext.tolist() == [0, 1, 2, 4]
        assert external_to_internal(ext).tolist() == [0, 1, 2, 3]

    def test_unknown_external_label_rejected(self):
        with pytest.raises(ValueError, match="labels outside"):
            external_to_internal(np.array([0, 3]))


class TestFlipCombos:
    def test_exactly_eight_distinct(self):
        combos = flip_combos()
        assert len(combos) == 8
        assert len(set(combos)) == 8

    def test_combo_applied_twice_is_identity(self):
        x = rng.standard_normal((4, 5, 6, 7))
        for combo in flip_combos():
            assert np.array_equal(apply_flip(apply_flip(x, combo), combo), x)


class TestTtaPredict:
    def test_constant_model_gives_constant_map(self):
        model = ConstantScoreModel([0.0, 1.0, 2.0, -1.0])
        x = rng.standard_normal((4, 16, 16, 16))
        probs = tta_predict(model, x)
        e = np.exp(model.scores - model.scores.max())
        expect = e / e.sum()
        assert np.allclose(probs, expect[:, None, None, None], atol=1e-12)

    def test_class_sums_stay_one(self):
        model = tiny_trained_model(iters=4)
        rec = make_sphere_case(size=16, radius=5, seed=8)
        probs = tta_predict(model, rec.volume.data)
        assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-5

    def test_divisibility_check(self):
        with pytest.raises(ValueError, match="divisible by 16"):
            tta_predict(ConstantScoreModel([0.0, 1.0]), np.zeros((4, 16, 20, 16)))

    def test_flip_equivariance_on_trained_model(self):
        model = tiny_trained_model(iters=8)
        rec = make_sphere_case(size=16, radius=5, seed=9)
        x = rec.volume.data
        base = tta_predict(model, x)
        for combo in flip_combos():
            flipped = tta_predict(model, np.ascontiguousarray(apply_flip(x, combo)))
            expect = apply_flip(base, combo)
            assert np.abs(flipped - expect).max() < 1e-6


class TestMajorityVote:
    def test_unanimity(self):
        mask = rng.integers(0, 4, (3, 3, 3))
        probs = [rng.random((4, 3, 3, 3)) for _ in range(3)]
        out = majority_vote([mask.copy() for _ in range(3)], probs)
        assert np.array_equal(out, mask)

    def test_single_model_identity(self):
        mask = rng.integers(0, 4, (4, 4, 4))
        probs = [rng.random((4, 4, 4, 4))]
        assert np.array_equal(majority_vote([mask], probs), mask)

    def test_two_models_match_brute_force(self):
        for _ in range(10):
            masks = [rng.integers(0, 4, (3, 3, 3)) for _ in range(2)]
            probs = [rng.random((4, 3, 3, 3)) for _ in range(2)]
            got = majority_vote(masks, probs)
            ref = reference.brute_force_vote(masks, probs)
            assert np.array_equal(got, ref)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            majority_vote([], [])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            majority_vote(
                [np.zeros((2, 2, 2), int), np.zeros((3, 3, 3), int)],
                [np.zeros((4, 2, 2, 2))] * 2,
            )

    def test_winner_is_a_cast_vote_with_enough_support(self):
        for _ in range(20):
            n = int(rng.integers(1, 6))
            masks = [rng.integers(0, 4, (3, 3, 3)) for _ in range(n)]
            probs = [rng.random((4, 3, 3, 3)) for _ in range(n)]
            out = majority_vote(masks, probs)
            votes = np.stack(masks)
            for idx in np.ndindex((3, 3, 3)):
                cast = votes[(slice(None),) + idx]
                winner = out[idx]
                assert winner in cast
                count = int((cast == winner).sum())
                distinct = len(set(cast.tolist()))
                assert count >= int(np.ceil(n / distinct))

    def test_shared_probability_scaling_does_not_change_outcome(self):
        masks = [rng.integers(0, 4, (3, 3, 3)) for _ in range(2)]
        probs = [rng.random((4, 3, 3, 3)) for _ in range(2)]
        base = majority_vote(masks, probs)
        scaled = majority_vote(masks, [0.25 * p for p in probs])
        assert np.array_equal(base, scaled)

    def test_final_tie_break_lowest_index(self):
        # two models, opposite votes, equal averaged probabilities
        m1 = np.full((2, 2, 2), 1)
        m2 = np.full((2, 2, 2), 3)
        p = np.full((4, 2, 2, 2), 0.25)
        out = majority_vote([m1, m2], [p.copy(), p.copy()])
        assert (out == 1).all()


class TestPostprocess:
    def test_zero_threshold_is_identity(self):
        mask = rng.integers(0, 4, (6, 6, 6))
        cfg = PostprocConfig(thresholds={1: 0, 2: 0, 3: 0})
        assert np.array_equal(volume_threshold_postprocess(mask, cfg), mask)

    def test_small_component_removed(self):
        mask = np.zeros((8, 8, 8), dtype=np.int64)
        mask[2:3, 2:4, 2:4] = 3  # 4 voxels of class 3
        mask[6, 6, 6] = 3  # 1 more voxel, separate component
        cfg = PostprocConfig(thresholds={3: 10})
        out = volume_threshold_postprocess(mask, cfg)
        assert (out == 0).all()

    def test_relabel_strategy(self):
        mask = np.zeros((4, 4, 4), dtype=np.int64)
        mask[0, 0, 0] = 3
        cfg = PostprocConfig(thresholds={3: 5}, strategy="relabel-class", fallback_class=1)
        out = volume_threshold_postprocess(mask, cfg)
        assert out[0, 0, 0] == 1

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError, match="strategy"):
            PostprocConfig(strategy="destroy")

    def test_matches_flood_fill_oracle(self):
        for _ in range(20):
            mask = rng.integers(0, 4, (8, 8, 8))
            thr = {1: int(rng.integers(1, 9)), 2: int(rng.integers(1, 9)),
                   3: int(rng.integers(1, 9))}
            got = volume_threshold_postprocess(mask, PostprocConfig(thresholds=thr))
            ref = reference.brute_force_postprocess(mask, thr)
            assert np.array_equal(got, ref)

    def test_idempotent(self):
        for _ in range(10):
            mask = rng.integers(0, 4, (8, 8, 8))
            cfg = PostprocConfig(thresholds={1: 4, 2: 6, 3: 3})
            once = volume_threshold_postprocess(mask, cfg)
            twice = volume_threshold_postprocess(once, cfg)
            assert np.array_equal(once, twice)

    def test_total_volume_semantics(self):
        mask = np.zeros((6, 6, 6), dtype=np.int64)
        mask[0, 0, :3] = 2
        mask[3, 3, :3] = 2  # two components, 6 voxels total
        got = volume_threshold_postprocess(
            mask, PostprocConfig(thresholds={2: 5}, semantics="total-volume")
        )
        assert np.array_equal(got, mask)  # total 6 >= 5 survives
        got = volume_threshold_postprocess(
            mask, PostprocConfig(thresholds={2: 7}, semantics="total-volume")
        )
        assert (got == 0).all()


class TestPredictCase:
    def test_background_stub_gives_all_zero(self):
        x = rng.standard_normal((4, 16, 16, 16))
        out = predict_case([BackgroundModel()], x, InferenceConfig(tta=False))
        assert out.shape == (16, 16, 16)
        assert (out == 0).all()

    def test_output_uses_external_vocabulary(self):
        # a stub voting for internal class 3 must emit external label 4
        scores = np.full(4, -5.0)
        scores[3] = 5.0
        x = rng.standard_normal((4, 16, 16, 16))
        out = predict_case([ConstantScoreModel(scores)], x, InferenceConfig(tta=False))
        assert (out == 4).all()

    def test_single_model_pipeline_decomposition(self):
        model = tiny_trained_model(iters=6)
        rec = make_sphere_case(size=16, radius=5, seed=12)
        x = rec.volume.data
        cfg = InferenceConfig(tta=True, postproc=PostprocConfig(thresholds={1: 3}))
        got = predict_case([model], x, cfg)
        probs = tta_predict(model, x)
        expect = internal_to_external(
            volume_threshold_postprocess(probs.argmax(axis=0), cfg.postproc)
        )
        assert np.array_equal(got, expect)

    def test_empty_model_list_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            predict_case([], np.zeros((4, 16, 16, 16)), InferenceConfig())

    def test_tta_false_uses_single_pass(self):
        model = tiny_trained_model(iters=4)
        rec = make_sphere_case(size=16, radius=5, seed=12)
        probs = predict_probs(model, rec.volume.data)
        assert probs.shape == (2, 16, 16, 16)
        assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-6
