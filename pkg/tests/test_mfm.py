# -*- coding: utf-8 -*-
import os
import sys
import unittest
import warnings
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np


ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from core import numerics as nx
from core.dataio import VideoFeatures, synth_pretrain_corpus
from core.errors import ConfigError, NumericError, ShapeError
from core.mfm import (
    MaskingConfig,
    PretrainConfig,
    compute_targets,
    gradcheck_mfm,
    init_mask_embedding,
    load_train_state,
    mask_count,
    mask_features,
    mfm_forward,
    mfm_loss,
    new_train_state,
    pretrain,
)
from core.optim import multistep_lr


def tiny_corpus(seed: int = 0):
    return synth_pretrain_corpus(8, 2, 4, 8, 2, 8, 16, seed, topics_per_video=3)


class TestMasking(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(31)
        self.objects = self.rng.standard_normal((3, 50, 4))
        self.p = init_mask_embedding(4, seed=1)

    def test_mask_count(self) -> None:
        self.assertEqual(mask_count(0.4, 50), 20)
        self.assertEqual(mask_count(0.4, 3), 1)
        self.assertEqual(mask_count(0.0, 9), 0)
        self.assertEqual(mask_count(1.0, 9), 9)

    def test_each_frame_masks_exactly_floor_gamma_k(self) -> None:
        masked = mask_features(self.objects, MaskingConfig(0.4, seed=5), self.p, "v0", 1)
        out = masked.as_array()
        for frame, chosen in enumerate(masked.masks):
            self.assertEqual(len(chosen), 20)
            self.assertEqual(len(set(chosen.tolist())), 20)
            np.testing.assert_array_equal(out[frame, chosen], np.repeat(self.p.data, 20, axis=0))
            keep = np.setdiff1d(np.arange(50), chosen)
            np.testing.assert_array_equal(out[frame, keep], self.objects[frame, keep])

    def test_gamma_zero_is_identity(self) -> None:
        masked = mask_features(self.objects, MaskingConfig(0.0), self.p, "v0", 1)
        np.testing.assert_array_equal(masked.as_array(), self.objects)
        self.assertTrue(all(len(m) == 0 for m in masked.masks))

    def test_gamma_one_masks_everything(self) -> None:
        out = mask_features(self.objects, MaskingConfig(1.0), self.p, "v0", 1).as_array()
        np.testing.assert_array_equal(out, np.broadcast_to(self.p.data, out.shape))

    def test_masks_are_reproducible_and_vary_by_epoch(self) -> None:
        cfg = MaskingConfig(0.4, seed=9)
        a = mask_features(self.objects, cfg, self.p, "v0", 1).masks
        b = mask_features(self.objects, cfg, self.p, "v0", 1).masks
        c = mask_features(self.objects, cfg, self.p, "v0", 2).masks
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        self.assertFalse(all(np.array_equal(x, y) for x, y in zip(a, c)))

    def test_input_not_modified(self) -> None:
        before = self.objects.copy()
        mask_features(self.objects, MaskingConfig(0.4), self.p, "v0", 1)
        np.testing.assert_array_equal(self.objects, before)

    def test_invalid_gamma(self) -> None:
        with self.assertRaises(ConfigError):
            MaskingConfig(gamma=1.5)

    def test_embedding_shape_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            mask_features(self.objects, MaskingConfig(0.4), init_mask_embedding(5, 0), "v0", 1)

    def test_targets_do_not_depend_on_gamma(self) -> None:
        videos, codebook = tiny_corpus()
        before = compute_targets(videos, codebook, 4)
        state = new_train_state(8, 16, PretrainConfig(epochs=1, milestones=()))
        for video in videos:
            mask_features(video.objects, MaskingConfig(0.9), state.p, video.id, 1)
        after = compute_targets(videos, codebook, 4)
        for x, y in zip(before, after):
            np.testing.assert_array_equal(x.v, y.v)


class TestLoss(unittest.TestCase):
    def test_sigmoid_loss_at_zero_logits(self) -> None:
        loss = mfm_loss(nx.constant(np.zeros((1, 6))), np.array([1, 0, 0, 1, 0, 0]))
        self.assertAlmostEqual(loss.item(), np.log(2.0), places=12)

    def test_softmax_loss_uses_normalized_targets(self) -> None:
        z = np.array([[0.5, -0.5, 1.0, 0.0]])
        v = np.array([1, 0, 1, 0])
        logp = z - np.log(np.exp(z).sum())
        expected = -(logp[0, 0] + logp[0, 2]) / 2.0
        self.assertAlmostEqual(mfm_loss(nx.constant(z), v, "softmax").item(), expected, places=12)

    def test_length_mismatch(self) -> None:
        with self.assertRaises(ShapeError):
            mfm_loss(nx.constant(np.zeros((1, 4))), np.ones(5))

    def test_forward_shapes(self) -> None:
        state = new_train_state(5, 7, PretrainConfig(epochs=1, milestones=()))
        rng = np.random.default_rng(1)
        out = mfm_forward(nx.constant(rng.standard_normal((6, 5))), state.gat, state.head)
        self.assertEqual(out.latent.shape, (1, 5))
        self.assertEqual(out.logits.shape, (1, 7))
        self.assertTrue(np.all((out.scores.data > 0) & (out.scores.data < 1)))


class TestGradients(unittest.TestCase):
    def test_full_loss_gradcheck_includes_mask_embedding(self) -> None:
        reports = gradcheck_mfm(seed=1)
        names = [r.name for r in reports]
        self.assertIn("mfm/p", names)
        for report in reports:
            self.assertTrue(report.passed, f"{report.name}: {report.max_rel_error:.3e}")

    def test_softmax_head_gradcheck(self) -> None:
        for report in gradcheck_mfm(seed=2, nonlinearity="softmax"):
            self.assertTrue(report.passed, f"{report.name}: {report.max_rel_error:.3e}")

    def test_mask_embedding_gets_no_gradient_without_masking(self) -> None:
        videos, codebook = tiny_corpus()
        (target,) = compute_targets(videos[:1], codebook, 4)
        state = new_train_state(8, 16, PretrainConfig(epochs=1, milestones=()))
        masked = mask_features(videos[0].objects, MaskingConfig(0.0), state.p, videos[0].id, 1)
        mfm_loss(mfm_forward(masked.nodes, state.gat, state.head).logits, target.v).backward()
        self.assertFalse(np.any(state.p.grad))
        self.assertTrue(np.any(state.head.W_fc.grad))


class TestPretrain(unittest.TestCase):
    def test_schedule_milestones(self) -> None:
        expected = {1: 1e-3, 49: 1e-3, 50: 1e-4, 99: 1e-4, 100: 1e-5, 200: 1e-5}
        for epoch, lr in expected.items():
            self.assertAlmostEqual(multistep_lr(1e-3, (50, 100), 0.1, epoch), lr, places=15)

    def test_logged_learning_rates(self) -> None:
        videos, codebook = tiny_corpus()
        cfg = PretrainConfig(epochs=4, milestones=(2, 4), lr=1e-3, batch_size=4, top_r=4)
        _, metrics = pretrain(videos, codebook, cfg, MaskingConfig(0.4))
        self.assertEqual(metrics.column("epoch"), [1, 2, 3, 4])
        for got, want in zip(metrics.column("lr"), [1e-3, 1e-4, 1e-4, 1e-5]):
            self.assertAlmostEqual(got, want, places=15)

    def test_loss_decreases_and_is_deterministic(self) -> None:
        videos, codebook = tiny_corpus()
        cfg = PretrainConfig(epochs=30, milestones=(), lr=1e-2, batch_size=4, top_r=4)
        _, first = pretrain(videos, codebook, cfg, MaskingConfig(0.4))
        _, second = pretrain(videos, codebook, cfg, MaskingConfig(0.4))
        losses = first.column("loss")
        self.assertLess(losses[-1], 0.9 * losses[0])
        self.assertEqual(losses, second.column("loss"))
        self.assertEqual(first.summary["final_loss"], losses[-1])

    def test_desktop_corpus_halves_the_loss(self) -> None:
        videos, codebook = synth_pretrain_corpus(64, 5, 8, 32, 4, 16, 64, seed=0)
        cfg = PretrainConfig(epochs=100, milestones=(50,), lr=1e-3, top_r=8, seed=0)
        _, metrics = pretrain(videos, codebook, cfg, MaskingConfig(0.4, seed=0))
        losses = metrics.column("loss")
        self.assertEqual(len(losses), 100)
        self.assertLessEqual(losses[-1], 0.5 * losses[0])

    def test_single_video_overfits_in_200_steps(self) -> None:
        videos, codebook = synth_pretrain_corpus(1, 5, 8, 32, 4, 16, 64, seed=2)
        cfg = PretrainConfig(epochs=200, milestones=(), lr=1e-3, batch_size=1, top_r=8, seed=2)
        state, metrics = pretrain(videos, codebook, cfg, MaskingConfig(0.4, seed=2))
        losses = metrics.column("loss")
        self.assertEqual(state.optimizer.step_count, 200)
        self.assertLess(losses[-1], 0.5 * losses[0])

    def test_resume_continues_the_same_run(self) -> None:
        videos, codebook = tiny_corpus()
        mask_cfg = MaskingConfig(0.4, seed=3)
        full_cfg = PretrainConfig(epochs=4, milestones=(), lr=5e-3, batch_size=3, top_r=4, seed=3)
        _, full = pretrain(videos, codebook, full_cfg, mask_cfg)
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "omega_t.mfmk")
            half_cfg = PretrainConfig(epochs=2, milestones=(), lr=5e-3, batch_size=3, top_r=4, seed=3,
                                      checkpoint_path=path)
            pretrain(videos, codebook, half_cfg, mask_cfg)
            state = load_train_state(path)
            self.assertEqual(state.epoch, 2)
            self.assertEqual(state.optimizer.step_count, 6)
            _, resumed = pretrain(videos, codebook, full_cfg, mask_cfg, resume=state)
        self.assertEqual(resumed.column("epoch"), [1, 2, 3, 4])
        for got, want in zip(resumed.column("loss"), full.column("loss")[2:]):
            self.assertAlmostEqual(got, want, places=12)

    def test_checkpoint_round_trip(self) -> None:
        videos, codebook = tiny_corpus()
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "omega_t.mfmk")
            cfg = PretrainConfig(epochs=1, milestones=(), batch_size=8, top_r=4, checkpoint_path=path)
            state, _ = pretrain(videos, codebook, cfg, MaskingConfig(0.4))
            loaded = load_train_state(path)
        for a, b in zip(state.parameters(), loaded.parameters()):
            self.assertEqual(a.name, b.name)
            np.testing.assert_array_equal(a.data, b.data)

    def test_non_finite_loss_aborts_with_checkpoint(self) -> None:
        rng = np.random.default_rng(4)
        video = VideoFeatures(id="huge", objects=np.full((1, 3, 4), 1e200),
                              patches=rng.standard_normal((1, 3, 2, 4)))
        codebook = synth_pretrain_corpus(1, 1, 3, 4, 2, 4, 6, 0)[1]
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "omega_t.mfmk")
            cfg = PretrainConfig(epochs=2, milestones=(), top_r=2, checkpoint_path=path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                with self.assertRaises(NumericError):
                    pretrain([video], codebook, cfg, MaskingConfig(0.0))
            self.assertTrue(os.path.exists(path))
            self.assertEqual(load_train_state(path).epoch, 0)

    def test_abort_mid_epoch_saves_the_epoch_start_state(self) -> None:
        rng = np.random.default_rng(5)
        videos = [VideoFeatures(id=f"ok{i}", objects=rng.standard_normal((1, 3, 4)),
                                patches=rng.standard_normal((1, 3, 2, 4))) for i in range(4)]
        videos.append(VideoFeatures(id="huge", objects=np.full((1, 3, 4), 1e200),
                                    patches=rng.standard_normal((1, 3, 2, 4))))
        codebook = synth_pretrain_corpus(1, 1, 3, 4, 2, 4, 6, 0)[1]
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "omega_t.mfmk")
            cfg = PretrainConfig(epochs=2, milestones=(), batch_size=1, top_r=2, checkpoint_path=path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                with self.assertRaises(NumericError):
                    pretrain(videos, codebook, cfg, MaskingConfig(0.0))
            saved = load_train_state(path)
        initial = new_train_state(4, 6, cfg)
        self.assertEqual(saved.epoch, 0)
        self.assertEqual(saved.optimizer.step_count, 0)
        for a, b in zip(initial.parameters(), saved.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_top_r_larger_than_vocabulary(self) -> None:
        videos, codebook = tiny_corpus()
        with self.assertRaises(ConfigError):
            pretrain(videos, codebook, PretrainConfig(epochs=1, milestones=(), top_r=17), MaskingConfig(0.4))

    def test_config_validation(self) -> None:
        with self.assertRaises(ConfigError):
            PretrainConfig(epochs=10, milestones=(5, 3))
        with self.assertRaises(ConfigError):
            PretrainConfig(epochs=10, milestones=(50,))
        with self.assertRaises(ConfigError):
            PretrainConfig(epochs=1, milestones=(), nonlinearity="tanh")


if __name__ == "__main__":
    unittest.main()
