import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pbseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pbseg.data import generate_scene
from pbseg.losses import (
    LossWeights,
    Targets,
    class_loss,
    compute_loss,
    dice_loss,
    hungarian_match,
    layer_loss,
    match_cost,
    sigmoid_bce,
)
from pbseg.matching import MatchResult, hungarian
from pbseg.model import MaskPrediction, ModelConfig, PBSeg
from pbseg.tensor import Tensor
from pbseg.train import AdamW, NonFiniteLossError, cosine_lr, evaluate, sample_targets, train_step

SMALL = dict(num_queries=8, hidden_dim=16, heads=2, layers=3, num_classes=4, height=32, width=32,
             backbone_channels=(8, 8, 16, 16), ffn_dim=16)


class TestHungarian:
    def test_one_target(self):
        res = hungarian(np.array([[3.0, 1.0]]))
        assert res.assignment.tolist() == [1] and res.cost == 1.0

    def test_two_by_two(self):
        res = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert res.assignment.tolist() == [0, 1] and res.cost == 2.0

    @pytest.mark.parametrize("seed", range(20))
    def test_five_by_seven_matches_brute_force(self, seed):
        cost = np.random.default_rng(seed).normal(size=(5, 7))
        res = hungarian(cost)
        best, _ = oracles.brute_force_assignment(cost)
        assert res.cost == pytest.approx(best, abs=1e-12)
        assert len(set(res.assignment.tolist())) == 5
        assert res.cost == pytest.approx(sum(cost[g, q] for g, q in enumerate(res.assignment)), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**31 - 1), st.booleans())
    def test_random_shapes_with_ties(self, n, extra, seed, integer):
        rng = np.random.default_rng(seed)
        cost = rng.integers(0, 3, size=(n, n + extra)).astype(float) if integer else rng.random((n, n + extra))
        best, _ = oracles.brute_force_assignment(cost)
        assert hungarian(cost).cost == pytest.approx(best, abs=1e-12)

    def test_empty(self):
        res = hungarian(np.zeros((0, 3)))
        assert res.assignment.size == 0 and res.cost == 0.0

    def test_too_many_targets(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((3, 2)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 1.0]]))


def make_pred(rng, L=4, C=3, h=2, w=2):
    return MaskPrediction(Tensor(rng.normal(size=(L, C + 1))), Tensor(rng.normal(size=(L, h, w))))


class TestLossTerms:
    def test_dice_all_ones(self):
        assert dice_loss(Tensor(np.full((1, 2, 2), 50.0)), np.ones((1, 2, 2))).item() == pytest.approx(0.0, abs=1e-12)

    def test_dice_empty_prediction(self):
        assert dice_loss(Tensor(np.full((1, 2, 2), -1e4)), np.ones((1, 2, 2))).item() == pytest.approx(0.8, abs=1e-12)

    def test_bce_value(self):
        x = np.array([[0.3, -1.2]])
        y = np.array([[1.0, 0.0]])
        expected = -np.mean(y * np.log(oracles.sigmoid(x)) + (1 - y) * np.log(1 - oracles.sigmoid(x)))
        assert sigmoid_bce(Tensor(x), y).item() == pytest.approx(expected, abs=1e-12)

    def test_class_loss_weights_null(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25], [0.2, 0.2, 0.6]]))
        val = class_loss(Tensor(logits), np.array([0, 2]), null_class=2, null_weight=0.1).item()
        assert val == pytest.approx(-(np.log(0.5) + 0.1 * np.log(0.6)) / 1.1, abs=1e-12)

    def test_confident_optimum(self):
        masks = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        pred = MaskPrediction(Tensor([[40.0, -40.0, -40.0], [-40.0, -40.0, 40.0]]), Tensor(np.stack([(masks[0] * 2 - 1) * 40] * 2)))
        tgt = Targets(np.array([0]), masks)
        loss = layer_loss(pred, tgt, MatchResult(np.array([0]), 0.0), LossWeights())
        assert loss.item() < 1e-6


class TestMatchingCost:
    def test_cost_equals_per_pair_losses(self, rng):
        pred = make_pred(rng)
        tgt = Targets(np.array([0, 2]), (rng.random((2, 2, 2)) > 0.5).astype(float))
        w = LossWeights()
        cost = match_cost(pred, tgt, w)
        probs = pred.class_probs()
        for g, q in itertools.product(range(2), range(4)):
            logits = Tensor(pred.mask_logits.data[q : q + 1])
            want = (-w.cls * probs[q, tgt.labels[g]] + w.bce * sigmoid_bce(logits, tgt.masks[g : g + 1]).item()
                    + w.dice * dice_loss(logits, tgt.masks[g : g + 1]).item())
            assert cost[g, q] == pytest.approx(want, abs=1e-12)

    def test_too_many_targets(self, rng):
        pred = make_pred(rng, L=1)
        with pytest.raises(ValueError):
            hungarian_match(pred, Targets(np.array([0, 1]), np.ones((2, 2, 2))), LossWeights())


class TestComputeLoss:
    def test_deep_supervision_multiplies(self, rng):
        pred = make_pred(rng)
        tgt = Targets(np.array([1]), np.ones((1, 2, 2)))
        single, _ = compute_loss([pred], tgt, LossWeights())
        seven, matches = compute_loss([pred] * 7, tgt, LossWeights())
        assert len(matches) == 7
        assert seven.item() == pytest.approx(7 * single.item(), rel=1e-12)

    def test_no_targets_is_class_only(self, rng):
        pred = make_pred(rng)
        loss, _ = compute_loss([pred], Targets(np.zeros(0, dtype=int), np.zeros((0, 2, 2))), LossWeights())
        expected = 2.0 * class_loss(pred.class_logits, np.full(4, 3), 3, 0.1).item()
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_targets_from_raster(self):
        tgt = Targets.from_raster(np.array([[0, 2], [2, 2]]), 4)
        assert tgt.labels.tolist() == [0, 2]
        assert tgt.masks.sum(axis=(1, 2)).tolist() == [1.0, 3.0]


class TestAdamW:
    def test_zero_lr_leaves_parameters_bitwise(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        before = p.data.copy()
        opt = AdamW([p])
        for _ in range(3):
            p.grad = rng.normal(size=5)
            opt.step(0.0)
        assert np.array_equal(p.data, before)

    def test_quadratic_descent(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([p], weight_decay=0.0)
        mags = [abs(p.data[0])]
        for _ in range(30):
            (p * p).sum().backward()
            opt.step(0.01)
            opt.zero_grad()
            mags.append(abs(p.data[0]))
        assert all(b < a for a, b in zip(mags, mags[1:]))

    def test_first_step_matches_formula(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, 0.5])
        AdamW([p]).step(0.1)
        expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_cosine_schedule(self):
        assert cosine_lr(1.0, 0, 10) == 1.0
        assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
        assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


class TestTrainStep:
    def test_fifty_steps_mostly_descend(self):
        cfg = ModelConfig(**SMALL)
        model, sample = PBSeg(cfg, seed=0), generate_scene(0, 32, 32, 4)
        opt = AdamW(model.parameters())
        losses = [train_step(model, [sample], opt, 1e-3) for _ in range(50)]
        assert np.mean(np.diff(losses) < 0) >= 0.8

    def test_gradients_reset_after_step(self):
        model = PBSeg(ModelConfig(**SMALL), seed=0)
        opt = AdamW(model.parameters())
        train_step(model, [generate_scene(1, 32, 32, 4)], opt, 1e-3)
        assert all(p.grad is None for p in model.parameters())

    def test_non_finite_loss_aborts(self):
        model = PBSeg(ModelConfig(**SMALL), seed=0)
        model.heads.cls.bias.data[0] = np.nan
        with pytest.raises(NonFiniteLossError, match="seed 3"):
            train_step(model, [generate_scene(3, 32, 32, 4)], AdamW(model.parameters()), 1e-3)

    def test_targets_at_mask_resolution(self):
        tgt = sample_targets(generate_scene(0, 32, 32, 4))
        assert tgt.masks.shape[1:] == (8, 8)
        np.testing.assert_array_equal(tgt.masks.sum(axis=0), 1.0)

    def test_evaluate_counts_every_pixel(self):
        model = PBSeg(ModelConfig(**SMALL), seed=0)
        cm = evaluate(model, [generate_scene(s, 32, 32, 4) for s in range(2)])
        assert cm.total == 2 * 32 * 32


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        state = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "scalar": np.array(2.5)}
        save_checkpoint(tmp_path / "m.pbsg", {"k": [1, 2]}, state)
        cfg, back = load_checkpoint(tmp_path / "m.pbsg")
        assert cfg == {"k": [1, 2]} and back.keys() == state.keys()
        for k in state:
            assert back[k].shape == state[k].shape and np.array_equal(back[k], state[k])

    def test_model_round_trip(self, tmp_path):
        cfg = ModelConfig(**SMALL)
        model = PBSeg(cfg, seed=3)
        save_checkpoint(tmp_path / "m.pbsg", cfg.to_dict(), model.state_dict())
        cfg2, state = load_checkpoint(tmp_path / "m.pbsg")
        clone = PBSeg(ModelConfig.from_dict(cfg2), seed=99)
        clone.load_state_dict(state)
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), clone.named_parameters()):
            assert n1 == n2 and np.array_equal(p1.data, p2.data)

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.pbsg", {}, {"w": np.array([1.0, 2.0])})
        buf = (tmp_path / "m.pbsg").read_bytes()
        assert buf[:4] == b"PBSG" and struct.unpack("<I", buf[4:8]) == (1,)
        assert buf[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.pbsg", {}, {"w": np.ones(4)})
        buf = (tmp_path / "m.pbsg").read_bytes()
        (tmp_path / "t.pbsg").write_bytes(buf[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.pbsg")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.pbsg").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.pbsg")
