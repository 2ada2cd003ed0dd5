import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag
from numpy.testing import assert_allclose, assert_array_equal

from gaussians.appearance import C0
from gaussians.primitives import FIELDS, GaussianSet, logit
from initfit.seeding import random_primitives
from rendering.cameras import Camera
from rendering.rasterizer import RasterSettings, render_forward
from scenes.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from scenes.manifest import FrameObservation, SceneManifest
from scenes.synthetic import generate_synthetic_scene
from splatsystem.exceptions import NonFiniteLossError, ShapeMismatchError

from .config import CliConfig, describe_keys, flatten, parse_override
from .management.commands.eval import evaluate_checkpoint
from .management.commands.train import Command as TrainCommand, initial_set
from .objective import (
    LossWeights, apply_mask, evaluate_pair, loss_reg, loss_render, metric_dssim, metric_psnr, ssim, ssim_and_grad,
)
from .optimizer import (
    AdamState, LearningRates, TrainConfig, Trainer, TrainingStepError, adam_step, velocity_lr_schedule,
)
from .relocation import (
    RelocationConfig, draw_targets, normalize_grad_stat, relocate, sampling_score,
)


def blob_set(count, rng, sh_degree=0, depth=(3.0, 5.0)):
    """Float64 primitives in front of a camera at the origin looking down +z."""
    g = GaussianSet.empty(count, sh_degree, np.float64)
    g.position_raw[:] = np.column_stack([
        rng.uniform(-0.8, 0.8, count), rng.uniform(-0.8, 0.8, count), rng.uniform(*depth, count),
    ])
    g.time_raw[:, 0] = 0.5
    g.duration_raw[:, 0] = np.log(2.0)
    g.scale_raw[:] = np.log(rng.uniform(0.15, 0.3, size=(count, 3)))
    g.orientation_raw[:, 0] = 1.0
    g.opacity_raw[:, 0] = logit(rng.uniform(0.4, 0.9, count))
    g.sh_coeffs[:, :, 0] = rng.uniform(0.2, 0.9, size=(count, 3)) / C0
    return g


def memory_scene(gaussians, cameras, times, raster):
    """A scene whose images are exact renders of ``gaussians``, held in the image cache."""
    frames = [
        FrameObservation(cam.id, float(t), f"images/{cam.id}_{i:04d}.png")
        for cam in cameras for i, t in enumerate(times)
    ]
    scene = SceneManifest(
        name='memory', root=Path('.'), frame_count=len(times), fps=30.0, background=(0.0, 0.0, 0.0),
        cameras={cam.id: cam for cam in cameras}, frames=frames,
        split={'train': [cam.id for cam in cameras], 'test': []},
    )
    background = np.zeros(3, dtype=gaussians.dtype)
    for frame in frames:
        rgb = render_forward(gaussians, scene.camera(frame.camera_id), frame.time, background, raster).rgb
        scene._images[(frame.image, gaussians.dtype.str)] = rgb
    return scene


def config_with(**values):
    """A `CliConfig` with dotted keys given as ``section__key=value``."""
    config = CliConfig()
    for key, value in values.items():
        config.set(key.replace('__', '.'), value)
    return config


class LossTests(SimpleTestCase):
    """Tests for the rendering and opacity-regularization losses."""

    def setUp(self):
        """Sets up a seeded 8x8 image pair with every pixel at least 0.05 apart."""
        rng = np.random.default_rng(0)
        self.gt = rng.uniform(0.1, 0.8, size=(8, 8, 3))
        self.pred = self.gt + rng.choice([-1.0, 1.0], size=self.gt.shape) * rng.uniform(0.05, 0.1, size=self.gt.shape)

    def test_identical_images(self):
        """Tests zero loss and zero gradient for identical images."""
        loss, grad, terms = loss_render(self.gt, self.gt.copy(), LossWeights())
        self.assertLessEqual(abs(loss), 1e-9)
        self.assertEqual(terms['l1'], 0.0)
        assert_allclose(grad, 0.0, atol=1e-9)

    def test_uniform_offset_l1_term(self):
        """Tests that a uniform 0.1 offset gives a weighted L1 term of 0.08."""
        weights = LossWeights()
        loss, _, terms = loss_render(self.gt + 0.1, self.gt, weights)
        self.assertAlmostEqual(terms['l1'], 0.1, places=12)
        self.assertAlmostEqual(weights.lambda_img * terms['l1'], 0.08, places=12)
        self.assertAlmostEqual(loss, 0.08 + weights.lambda_ssim * terms['dssim'], places=12)

    def test_gradient_matches_finite_differences(self):
        """Tests the analytic gradient image on an 8x8 pair."""
        weights = LossWeights()
        _, grad, _ = loss_render(self.pred, self.gt, weights)
        numeric = np.zeros_like(self.pred)
        h = 1e-6
        for idx in np.ndindex(self.pred.shape):
            plus, minus = self.pred.copy(), self.pred.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (loss_render(plus, self.gt, weights)[0] - loss_render(minus, self.gt, weights)[0]) / (2 * h)
        assert_allclose(grad, numeric, rtol=1e-5, atol=1e-10)

    def test_ssim_gradient_on_anticorrelated_images(self):
        """Tests the SSIM gradient where the contrast term is negative and the float32 path."""
        rows, cols = np.indices((12, 12))
        checker = np.where((rows + cols) % 2 == 0, 0.8, 0.2)[:, :, None].repeat(3, axis=2)
        pred, gt = checker + 0.01 * np.sin(rows + 2 * cols)[:, :, None], 1.0 - checker
        value, grad = ssim_and_grad(pred, gt)
        self.assertLess(value, 0.0)
        self.assertTrue(np.all(np.isfinite(grad)))
        numeric = np.zeros_like(pred)
        h = 1e-6
        for idx in np.ndindex(pred.shape):
            plus, minus = pred.copy(), pred.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (ssim(plus, gt) - ssim(minus, gt)) / (2 * h)
        assert_allclose(grad, numeric, rtol=1e-5, atol=1e-10)

        single = pred.astype(np.float32)
        _, grad32 = ssim_and_grad(single, gt.astype(np.float32))
        self.assertEqual(grad32.dtype, np.float32)
        _, grad64 = ssim_and_grad(single.astype(np.float64), gt.astype(np.float32).astype(np.float64))
        assert_array_equal(grad32, grad64.astype(np.float32))

    def test_non_finite_loss_raises(self):
        """Tests that a NaN in the render is reported instead of reaching the optimizer."""
        pred = self.pred.copy()
        pred[2, 3, 1] = np.nan
        with self.assertRaises(NonFiniteLossError):
            loss_render(pred, self.gt, LossWeights())

    def test_shape_mismatch(self):
        """Tests that differently sized images are rejected."""
        with self.assertRaises(ShapeMismatchError):
            loss_render(self.pred, self.gt[:4], LossWeights())

    def test_loss_weights(self):
        """Tests the perceptual-weight pin and the regularization window."""
        with self.assertRaises(ValidationError):
            LossWeights(lambda_perc=0.01).check()
        with self.assertRaises(ValidationError):
            LossWeights(lambda_reg=-1.0).check()
        weights = LossWeights()
        self.assertEqual(weights.reg_scale(0.3), 1.0)
        self.assertAlmostEqual(weights.reg_scale(0.55), 0.5)
        self.assertEqual(weights.reg_scale(0.7), 0.0)

    def test_reg_examples(self):
        """Tests the saturated example and the two-primitive hand computation."""
        g = GaussianSet.empty(3, 0, np.float64)
        g.time_raw[:] = 0.4
        g.opacity_raw[:] = 40.0
        loss, _ = loss_reg(g, 0.4)
        self.assertEqual(loss, 1.0)

        g = GaussianSet.empty(2, 0, np.float64)
        g.opacity_raw[:, 0] = logit(np.array([0.2, 0.4]))
        g.time_raw[:, 0] = [0.3, 0.3 - 0.1 * np.sqrt(2.0 * np.log(2.0))]
        g.duration_raw[:, 0] = np.log(0.1)
        loss, _ = loss_reg(g, 0.3)
        self.assertAlmostEqual(loss, 0.2, places=12)

    def test_reg_gradient_reaches_opacity_only(self):
        """Tests the returned gradient against differences in the opacity logits."""
        rng = np.random.default_rng(3)
        g = blob_set(5, rng)
        g.time_raw[:, 0] = rng.uniform(0.0, 1.0, 5)
        loss, d_opacity = loss_reg(g, 0.6)
        self.assertEqual(d_opacity.shape, (5, 1))
        h = 1e-6
        for i in range(5):
            original = g.opacity_raw[i, 0]
            g.opacity_raw[i, 0] = original + h
            plus = loss_reg(g, 0.6)[0]
            g.opacity_raw[i, 0] = original - h
            minus = loss_reg(g, 0.6)[0]
            g.opacity_raw[i, 0] = original
            self.assertAlmostEqual(d_opacity[i, 0], (plus - minus) / (2 * h), places=8)
            self.assertGreater(plus, loss)

    def test_reg_empty_set(self):
        """Tests that an empty set has zero loss and an empty gradient."""
        loss, d_opacity = loss_reg(GaussianSet.empty(0), 0.5)
        self.assertEqual(loss, 0.0)
        self.assertEqual(d_opacity.shape, (0, 1))


class MetricTests(SimpleTestCase):
    """Tests for PSNR, both DSSIM variants and masked evaluation."""

    def setUp(self):
        """Sets up a seeded noisy image pair."""
        rng = np.random.default_rng(1)
        self.a = rng.uniform(0.0, 1.0, size=(24, 24, 3))
        self.b = np.clip(self.a + rng.normal(scale=0.1, size=self.a.shape), 0.0, 1.0)

    def test_psnr_examples(self):
        """Tests the cap, the 20 dB and the 0 dB examples."""
        self.assertEqual(metric_psnr(self.a, self.a.copy()), 99.0)
        self.assertAlmostEqual(metric_psnr(np.full((4, 4, 3), 0.6), np.full((4, 4, 3), 0.5)), 20.0, places=10)
        self.assertAlmostEqual(metric_psnr(np.ones((4, 4, 3)), np.zeros((4, 4, 3))), 0.0, places=12)
        with self.assertRaises(ShapeMismatchError):
            metric_psnr(self.a, self.a[:-1])

    def test_dssim_examples(self):
        """Tests zero for identical images, the variant order and symmetry."""
        self.assertEqual(metric_dssim(self.a, self.a.copy(), 1), 0.0)
        self.assertEqual(metric_dssim(self.a, self.a.copy(), 2), 0.0)
        self.assertLessEqual(metric_dssim(self.a, self.b, 2), metric_dssim(self.a, self.b, 1))
        self.assertAlmostEqual(metric_dssim(self.a, self.b, 1), metric_dssim(self.b, self.a, 1), places=14)
        self.assertGreater(metric_dssim(self.a, self.b, 1), 0.0)
        with self.assertRaises(ValidationError):
            metric_dssim(self.a, self.b, 3)

    def test_ssim_small_images(self):
        """Tests that images smaller than the window still score."""
        self.assertAlmostEqual(ssim(self.a[:5, :5], self.a[:5, :5]), 1.0, places=12)

    def test_all_ones_mask_is_identity(self):
        """Tests that a full mask leaves the metrics unchanged."""
        cropped = apply_mask(self.a, self.b, np.ones(self.a.shape[:2], dtype=bool))
        self.assertEqual(evaluate_pair(*cropped), evaluate_pair(self.a, self.b))

    def test_mask_crops_to_bounding_box(self):
        """Tests the crop, the zeroing outside the mask and the empty mask."""
        mask = np.zeros(self.a.shape[:2], dtype=bool)
        mask[4:10, 6:9] = True
        mask[4, 6] = False
        pred, gt = apply_mask(self.a, self.b, mask)
        self.assertEqual(pred.shape, (6, 3, 3))
        assert_array_equal(pred[0, 0], 0.0)
        assert_array_equal(gt[1, 1], self.b[5, 7])
        self.assertIsNone(apply_mask(self.a, self.b, np.zeros_like(mask)))


class AdamTests(SimpleTestCase):
    """Tests for the bias-corrected Adam update."""

    def setUp(self):
        """Sets up a one-primitive set, its Adam state and a position-only learning rate."""
        self.g = GaussianSet.empty(1, 0, np.float64)
        self.g.orientation_raw[0, 0] = 1.0
        self.state = AdamState.for_set(self.g)
        self.rates = {'position_raw': 1e-3}

    def grads(self, value):
        return {name: np.full_like(array, value) for name, array in self.g.arrays()}

    def test_first_step_closed_form(self):
        """Tests the first update for a unit gradient."""
        adam_step(self.state, self.g, self.grads(1.0), self.rates)
        assert_allclose(self.g.position_raw[0], -1e-3 / (1.0 + 1e-8), rtol=1e-12)
        self.assertAlmostEqual(self.g.position_raw[0, 0], -9.99999e-4, delta=1e-9)
        assert_array_equal(self.g.velocity, 0.0)
        self.assertEqual(self.state.step_count, 1)

    def test_second_step_keeps_magnitude(self):
        """Tests that a repeated unit gradient moves by the learning rate again."""
        adam_step(self.state, self.g, self.grads(1.0), self.rates)
        before = self.g.position_raw.copy()
        adam_step(self.state, self.g, self.grads(1.0), self.rates)
        assert_allclose(before - self.g.position_raw, 1e-3, rtol=1e-7)

    def test_zero_gradient(self):
        """Tests that a zero gradient leaves parameters unchanged."""
        before = self.g.copy()
        adam_step(self.state, self.g, self.grads(0.0), {name: 1e-2 for name in FIELDS})
        for name, array in before.arrays():
            assert_array_equal(getattr(self.g, name), array, err_msg=name)
        self.assertTrue(all(np.all(v >= 0) for v in self.state.v.values()))

    def test_non_finite_entries_skipped(self):
        """Tests that NaN and infinite entries are skipped and counted."""
        grads = self.grads(1.0)
        grads['position_raw'][0, 1] = np.nan
        grads['velocity'][0, 2] = np.inf
        with self.assertLogs('training.optimizer', 'WARNING'):
            skipped = adam_step(self.state, self.g, grads, {'position_raw': 1e-3, 'velocity': 1e-3})
        self.assertEqual(skipped, 2)
        self.assertEqual(self.state.skipped, 2)
        self.assertEqual(self.g.position_raw[0, 1], 0.0)
        self.assertEqual(self.state.m['position_raw'][0, 1], 0.0)
        self.assertEqual(self.g.velocity[0, 2], 0.0)
        self.assertLess(self.g.position_raw[0, 0], 0.0)

    def test_scaled_gradients_keep_signs(self):
        """Tests that scaling all gradients keeps the update sign pattern."""
        rng = np.random.default_rng(4)
        g = blob_set(6, rng, sh_degree=1)
        raw = {name: rng.normal(size=array.shape) for name, array in g.arrays()}
        rates = {name: 1e-3 for name in FIELDS}
        moved = []
        for factor in (1.0, 7.5):
            params = g.copy()
            adam_step(AdamState.for_set(params), params, {k: factor * v for k, v in raw.items()}, rates)
            moved.append({name: getattr(params, name) - array for name, array in g.arrays()})
        for name in FIELDS:
            assert_array_equal(np.sign(moved[0][name]), np.sign(moved[1][name]), err_msg=name)
            assert_array_equal(np.sign(moved[0][name]), -np.sign(raw[name]), err_msg=name)

    def test_zero_rows(self):
        """Tests that clearing moments only touches the given primitives."""
        state = AdamState.for_set(GaussianSet.empty(3))
        for name in FIELDS:
            state.m[name][...] = 1.0
            state.v[name][...] = 1.0
        state.zero_rows([1])
        for name in FIELDS:
            assert_array_equal(state.m[name][1], 0.0)
            assert_array_equal(state.v[name][0], 1.0)


class ScheduleTests(SimpleTestCase):
    """Tests for the velocity learning-rate annealing."""

    def test_boundaries_and_midpoint(self):
        """Tests lambda0, lambda1 and the geometric mean."""
        self.assertEqual(velocity_lr_schedule(0.0, 1e-2, 1e-4), 1e-2)
        self.assertEqual(velocity_lr_schedule(1.0, 1e-2, 1e-4), 1e-4)
        self.assertAlmostEqual(velocity_lr_schedule(0.5, 1e-2, 1e-4), 1e-3, places=15)

    def test_strictly_decreasing(self):
        """Tests monotonicity when lambda0 exceeds lambda1."""
        values = [velocity_lr_schedule(p, 1.0, 0.01) for p in np.linspace(0.0, 1.0, 50)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))

    def test_disabled_and_sum_forms(self):
        """Tests zero endpoints, the literal sum form and unknown modes."""
        self.assertEqual(velocity_lr_schedule(0.3, 0.0, 0.0), 0.0)
        self.assertEqual(velocity_lr_schedule(0.0, 1.0, 0.01, 'sum'), 2.0)
        self.assertAlmostEqual(velocity_lr_schedule(1.0, 1.0, 0.01, 'sum'), 1.01, places=15)
        with self.assertRaises(ValidationError):
            velocity_lr_schedule(0.5, 1.0, 0.01, 'cosine')


class RelocationTests(SimpleTestCase):
    """Tests for the sampling score and dead-primitive relocation."""

    def setUp(self):
        """Sets up a three-primitive set where primitive 0 is dead and 1 dominates the score."""
        self.rng = np.random.default_rng(5)
        self.g = blob_set(3, self.rng, sh_degree=1)
        self.g.velocity[:] = self.rng.normal(size=(3, 3))
        self.g.sh_coeffs[:] = self.rng.normal(size=self.g.sh_coeffs.shape)
        self.g.opacity_raw[0, 0] = logit(0.001)
        self.adam = AdamState.for_set(self.g)
        for name in FIELDS:
            self.adam.m[name][...] = 1.0
            self.adam.v[name][...] = 1.0
        self.cfg = RelocationConfig()

    def test_sampling_score_examples(self):
        """Tests the zero and the 0.5 examples and the gradient normalisation."""
        self.assertEqual(sampling_score(0.0, 0.0, self.cfg), 0.0)
        self.assertAlmostEqual(sampling_score(0.4, 0.6, self.cfg), 0.5)
        assert_allclose(normalize_grad_stat([[2.0], [1.0], [0.0]]), [1.0, 0.5, 0.0])
        assert_array_equal(normalize_grad_stat(np.zeros((3, 1))), 0.0)

    def test_no_dead_primitives(self):
        """Tests that a live set is left untouched."""
        self.g.opacity_raw[0, 0] = 0.0
        before = self.g.copy()
        report = relocate(self.g, self.adam, np.ones(3), self.cfg, self.rng)
        self.assertEqual(report.moved, 0)
        for name, array in before.arrays():
            assert_array_equal(getattr(self.g, name), array)

    def test_dead_primitive_copies_target(self):
        """Tests the copy, the jitter bounds, the opacity reset and the moment reset."""
        target = self.g.copy()
        report = relocate(self.g, self.adam, np.array([0.0, 1.0, 0.0]), self.cfg, self.rng)
        self.assertEqual((report.moved, report.dead), (1, 1))
        self.assertEqual(report.mean_target_score, 1.0)
        self.assertEqual(self.g.count, 3)
        for name in ('duration_raw', 'velocity', 'scale_raw', 'orientation_raw', 'sh_coeffs'):
            assert_array_equal(getattr(self.g, name)[0], getattr(target, name)[1], err_msg=name)
        bound = 5 * 0.1 * np.exp(target.scale_raw[1])
        self.assertTrue(np.all(np.abs(self.g.position_raw[0] - target.position_raw[1]) <= bound))
        self.assertLessEqual(abs(self.g.time_raw[0, 0] - target.time_raw[1, 0]), 5 * 0.1 * np.exp(target.duration_raw[1, 0]))
        self.assertAlmostEqual(self.g.opacities()[0], 0.1)
        for name in FIELDS:
            assert_array_equal(self.adam.m[name][0], 0.0)
            assert_array_equal(self.adam.v[name][1], 1.0)

    def test_all_dead(self):
        """Tests that a fully dead set is a no-op with a warning."""
        self.g.opacity_raw[:] = logit(1e-4)
        with self.assertLogs('training.relocation', 'WARNING'):
            report = relocate(self.g, self.adam, np.ones(3), self.cfg, self.rng)
        self.assertEqual((report.moved, report.dead), (0, 3))

    def test_target_frequencies(self):
        """Tests the 90/10 split over 10k seeded draws."""
        targets = draw_targets([0.9, 0.1], 10000, np.random.default_rng(0))
        self.assertAlmostEqual(np.mean(targets == 0), 0.9, delta=0.02)
        uniform = draw_targets([0.0, 0.0, 0.0, 0.0], 10000, np.random.default_rng(0))
        self.assertAlmostEqual(np.mean(uniform == 2), 0.25, delta=0.02)

    def test_repeated_events_keep_count(self):
        """Tests the count and the opacity floor over 30 relocation events."""
        rng = np.random.default_rng(6)
        g = blob_set(40, rng)
        adam = AdamState.for_set(g)
        floor = min(self.cfg.dead_threshold, self.cfg.reset_opacity)
        for _ in range(30):
            g.opacity_raw[rng.choice(40, size=5, replace=False), 0] = logit(1e-3)
            relocate(g, adam, sampling_score(rng.uniform(size=40), g.opacities(), self.cfg), self.cfg, rng)
            g.check()
            self.assertEqual(g.count, 40)
            self.assertTrue(np.all(g.opacities() >= floor))

    def test_config_checks(self):
        """Tests the rejected relocation configurations."""
        for bad in ({'period': 0}, {'lambda_grad': 0.0, 'lambda_opacity': 0.0}, {'dead_threshold': 1.0}):
            with self.assertRaises(ValidationError):
                RelocationConfig(**bad).check()


class ConfigTests(SimpleTestCase):
    """Tests for layered configuration."""

    def test_defaults_match_settings(self):
        """Tests a few defaults and that every key is documented."""
        config = CliConfig()
        self.assertEqual(config.values['relocation.period'], 100)
        self.assertEqual(config.values['loss.lambda_img'], 0.8)
        self.assertEqual(config.values['loss.lambda_perc'], 0.0)
        lines = describe_keys()
        self.assertEqual(len(lines), len(config.values))
        self.assertTrue(any(line.startswith('relocation.period=100 ') for line in lines))
        self.assertNotIn('[]', '\n'.join(lines))

    def test_unknown_and_badly_typed_keys(self):
        """Tests that unknown keys and uncoercible values are rejected."""
        config = CliConfig()
        with self.assertRaises(ValidationError):
            config.set('train.nope', 1)
        with self.assertRaises(ValidationError):
            config.set('train.seed', 'three')
        with self.assertRaises(ValidationError):
            config.set('train.background', [0.0, 0.0])
        with self.assertRaises(ValidationError):
            config.set('relocation.enabled', 1)

    def test_coercion(self):
        """Tests that integral floats become ints and ints become floats."""
        config = CliConfig()
        config.set('train.seed', 3.0)
        config.set('loss.lambda_reg', 0)
        self.assertEqual(config.values['train.seed'], 3)
        self.assertIsInstance(config.values['loss.lambda_reg'], float)

    def test_parse_override(self):
        """Tests JSON values, string fallback and malformed overrides."""
        self.assertEqual(parse_override('train.seed=3'), ('train.seed', 3))
        self.assertEqual(parse_override('train.velocity_schedule=sum'), ('train.velocity_schedule', 'sum'))
        self.assertEqual(parse_override('relocation.enabled=false'), ('relocation.enabled', False))
        with self.assertRaises(ValidationError):
            parse_override('train.seed')

    def test_precedence(self):
        """Tests defaults < file < overrides."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps({'train': {'seed': 5, 'log_every': 7}, 'loss': {'lambda_reg': 0}}))
            config = CliConfig.load(path, ['train.seed=9'])
        self.assertEqual(config.values['train.seed'], 9)
        self.assertEqual(config.values['train.log_every'], 7)
        self.assertEqual(config.values['loss.lambda_reg'], 0.0)
        self.assertEqual(config.values['loss.lambda_img'], 0.8)
        self.assertEqual(flatten(config.to_dict()), config.values)

    def test_build_train_config(self):
        """Tests that the assembled config carries every section."""
        config = config_with(relocation__period=10, raster__tile_size=8, train__velocity_lambda1=0.5)
        train = config.build_train_config(threads=3)
        train.check()
        self.assertEqual(train.relocation.period, 10)
        self.assertEqual(train.raster.tile_size, 8)
        self.assertEqual(train.raster.threads, 3)
        self.assertEqual(train.velocity_lambda1, 0.5)
        self.assertEqual(train.lr, LearningRates())
        self.assertEqual(train.iterations_for(300), 30000)

    def test_help_lists_config_keys(self):
        """Tests that the train command's help enumerates the config keys."""
        text = TrainCommand().create_parser('manage.py', 'train').format_help()
        self.assertIn('relocation.lambda_grad=0.5', text)
        self.assertIn('loss.lambda_reg=0.01', text)
        self.assertIn('initfit.knn_k=1', text)
        self.assertIn('initfit.zero_velocity=false', text)


class TrainerTests(SimpleTestCase):
    """Tests for the training step and loop on exactly fitting in-memory scenes."""

    def setUp(self):
        """Sets up eight blobs seen by two cameras at three times."""
        self.raster = RasterSettings(tile_size=16)
        self.truth = blob_set(8, np.random.default_rng(7))
        cameras = [
            Camera('a', 24.0, 24.0, 12.0, 12.0, 24, 24),
            Camera.look_at('b', [1.0, 0.0, 0.0], [0.0, 0.0, 4.0], (0, -1, 0), 24.0, 24.0, 24, 24),
        ]
        self.scene = memory_scene(self.truth, cameras, [0.0, 0.5, 1.0], self.raster)

    def config(self, **kwargs):
        kwargs.setdefault('raster', self.raster)
        kwargs.setdefault('loss', LossWeights(lambda_reg=0.0))
        kwargs.setdefault('relocation', RelocationConfig(enabled=False))
        return TrainConfig(total_iters=20, log_every=0, **kwargs)

    def test_fixed_point(self):
        """Tests that an exactly fitting set has zero loss and barely drifts."""
        gaussians = self.truth.copy()
        trainer = Trainer(self.scene, gaussians, self.config())
        reports = trainer.run(5)
        self.assertEqual(len(reports), 5)
        self.assertLessEqual(max(report.loss for report in reports), 1e-9)
        for name, array in self.truth.arrays():
            self.assertLess(np.max(np.abs(getattr(gaussians, name) - array)), 1e-6, name)

    def test_identical_loss_traces(self):
        """Tests that two seeded runs produce identical losses and parameters."""
        start = self.truth.copy()
        start.position_raw += 0.05
        start.opacity_raw -= 0.5
        runs = []
        for _ in range(2):
            trainer = Trainer(self.scene, start.copy(), self.config(loss=LossWeights()))
            trainer.run(6)
            runs.append(trainer)
        self.assertEqual(runs[0].loss_trace, runs[1].loss_trace)
        assert_array_equal(runs[0].gaussians.position_raw, runs[1].gaussians.position_raw)
        self.assertGreater(runs[0].loss_trace[0], 0.0)

    def test_resume_continues_sampler(self):
        """Tests that a resumed trainer draws the same frames as an uninterrupted one."""
        whole = Trainer(self.scene, self.truth.copy(), self.config())
        frames = [whole.sample_frame() for _ in range(6)]
        first = Trainer(self.scene, self.truth.copy(), self.config())
        for _ in range(3):
            first.sample_frame()
        resumed = Trainer(self.scene, self.truth.copy(), self.config(), 3, first.rng.bit_generator.state)
        self.assertEqual([resumed.sample_frame() for _ in range(3)], frames[3:])
        self.assertEqual(resumed.iteration, 3)

    def test_learning_rates(self):
        """Tests the scene-extent scaling and the velocity schedule."""
        trainer = Trainer(self.scene, self.truth.copy(), self.config())
        rates = trainer.learning_rates()
        self.assertAlmostEqual(rates['position_raw'], 1.6e-4 * self.scene.camera_extent())
        self.assertAlmostEqual(rates['velocity'], 1e-3)
        trainer.iteration = trainer.total_iters
        self.assertAlmostEqual(trainer.learning_rates()['velocity'], 1e-5)
        frozen = Trainer(self.scene, self.truth.copy(), self.config(velocity_lambda0=0.0, velocity_lambda1=0.0))
        self.assertEqual(frozen.learning_rates()['velocity'], 0.0)

    def test_relocation_event(self):
        """Tests that a relocation step revives dead primitives and resets the statistics."""
        gaussians = self.truth.copy()
        gaussians.opacity_raw[:2, 0] = logit(1e-3)
        trainer = Trainer(self.scene, gaussians, self.config(relocation=RelocationConfig(period=4)))
        with self.assertLogs('training.progress', 'INFO') as logs:
            reports = trainer.run(4)
        self.assertEqual([r.relocation is not None for r in reports], [False, False, False, True])
        self.assertEqual(reports[-1].relocation.moved, 2)
        self.assertIn('iter=4 relocated=2 dead=2', logs.output[0])
        self.assertEqual(gaussians.count, 8)
        self.assertTrue(np.all(gaussians.opacities() >= 0.005))
        assert_array_equal(trainer.grads.accum_count, 0.0)
        assert_array_equal(trainer.grads.accum_grad2d, 0.0)

    def test_progress_log_line(self):
        """Tests the periodic progress line."""
        config = TrainConfig(total_iters=4, log_every=2, raster=self.raster,
                             relocation=RelocationConfig(enabled=False))
        trainer = Trainer(self.scene, self.truth.copy(), config)
        with self.assertLogs('training.progress', 'INFO') as logs:
            trainer.run()
        self.assertEqual(len(logs.output), 2)
        self.assertRegex(logs.output[1], r'iter=4 loss=\S+ l1=\S+ dssim=\S+ reg=\S+ count=8 mean_opacity=\S+')

    def test_non_finite_parameters_fail_with_context(self):
        """Tests that a NaN parameter aborts the step with the iteration in the message."""
        gaussians = self.truth.copy()
        gaussians.velocity[3, 1] = np.nan
        trainer = Trainer(self.scene, gaussians, self.config())
        with self.assertRaisesMessage(TrainingStepError, "Iteration 0"):
            trainer.run(1)

    def test_train_config_checks(self):
        """Tests the rejected training configurations."""
        with self.assertRaises(ValidationError):
            TrainConfig(iters_per_frame=0).check()
        with self.assertRaises(ValidationError):
            TrainConfig(velocity_schedule='cosine').check()
        with self.assertRaises(ValidationError):
            TrainConfig(velocity_lambda0=-1.0).check()


class TrainCommandTests(SimpleTestCase):
    """Tests for the train and eval management commands."""

    @classmethod
    def setUpClass(cls):
        """Writes one small moving-blobs scene shared by every test."""
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.synthetic = generate_synthetic_scene(
            'moving-blobs', 0, cls.root / 'scene', blobs=6, cameras=3, frames=3, size=24,
        )

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def train(self, out, *extra):
        args = [
            '--scene', str(self.root / 'scene'), '--out', str(self.root / out),
            '--set', 'train.total_iters=6', '--set', 'train.checkpoint_every=3',
            '--set', 'train.log_every=2', '--set', 'model.sh_degree=0', '--set', 'relocation.period=3',
        ]
        call_command('train', *args, *extra, stdout=StringIO())
        return self.root / out

    def test_initial_set_honours_initfit_keys(self):
        """Tests the at-rest seeding switch, the density cap and the neighbour checks."""
        scene = self.synthetic.scene
        dtype = np.dtype('float64')
        moving = initial_set(scene, config_with(), 'tracks', 0, dtype)
        still = initial_set(scene, config_with(initfit__zero_velocity=True), 'tracks', 0, dtype)
        self.assertTrue(np.any(moving.velocity != 0))
        assert_array_equal(still.velocity, 0.0)
        assert_array_equal(still.position_raw, moving.position_raw)
        capped = initial_set(scene, config_with(initfit__max_seed_points=2), 'tracks', 0, dtype)
        self.assertLessEqual(capped.count, 2 * scene.frame_count)
        self.assertGreater(capped.count, 0)
        with self.assertRaises(ValidationError):
            initial_set(scene, config_with(initfit__knn_k=0), 'tracks', 0, dtype)
        with self.assertRaises(ValidationError):
            initial_set(scene, config_with(initfit__knn_cutoff=0.0), 'tracks', 0, dtype)

    def test_train_writes_artifacts(self):
        """Tests the periodic and final checkpoints, the loss trace and the log."""
        out = self.train('run')
        self.assertTrue((out / 'iter_000003.ckpt').exists())
        self.assertFalse((out / 'iter_000006.ckpt').exists())
        ckpt = load_checkpoint(out / 'final.ckpt')
        self.assertEqual(ckpt.iteration, 6)
        self.assertEqual(ckpt.config['train']['total_iters'], 6)
        self.assertEqual(ckpt.gaussians.sh_degree, 0)
        self.assertEqual(len(json.loads((out / 'loss_trace.json').read_text())), 6)
        log = (out / 'train.log').read_text()
        self.assertIn('iter=6 loss=', log)
        self.assertIn('relocated=', log)

    def test_deterministic_checkpoints(self):
        """Tests that two seeded runs write byte-identical final checkpoints."""
        first = self.train('det_a')
        second = self.train('det_b')
        self.assertEqual((first / 'final.ckpt').read_bytes(), (second / 'final.ckpt').read_bytes())

    def test_resume_continues_counter(self):
        """Tests that resuming picks up the iteration counter."""
        first = self.train('resume_a', '--set', 'train.total_iters=4')
        out = self.train('resume_b', '--resume', str(first / 'final.ckpt'))
        self.assertEqual(load_checkpoint(out / 'final.ckpt').iteration, 6)
        self.assertEqual(len(json.loads((out / 'loss_trace.json').read_text())), 2)

    def test_random_initialisation(self):
        """Tests the random seeding path."""
        out = self.train('random', '--init', 'random', '--random-count', '50')
        self.assertEqual(load_checkpoint(out / 'final.ckpt').gaussians.count, 50)

    def test_exit_codes(self):
        """Tests usage, data and numeric failures."""
        with self.assertRaises(CommandError) as cm:
            call_command('train', '--scene', str(self.root / 'scene'), stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 1)
        with self.assertRaises(CommandError) as cm:
            self.train('bad_key', '--set', 'train.nope=1')
        self.assertEqual(cm.exception.returncode, 2)
        with self.assertRaises(CommandError) as cm:
            call_command('train', '--scene', str(self.root / 'missing'), '--out', str(self.root / 'x'),
                         stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 2)

        broken = self.synthetic.ground_truth.copy()
        broken.position_raw[0, 0] = np.nan
        save_checkpoint(Checkpoint(broken), self.root / 'broken.ckpt')
        with self.assertRaises(CommandError) as cm:
            self.train('nan', '--resume', str(self.root / 'broken.ckpt'))
        self.assertEqual(cm.exception.returncode, 3)
        self.assertNotIn('\n', str(cm.exception))

    def test_eval_ground_truth(self):
        """Tests that the ground truth scores the PSNR cap and zero DSSIM."""
        report_path = self.root / 'eval' / 'report.json'
        call_command(
            'eval', '--checkpoint', str(self.root / 'scene' / 'ground_truth.ckpt'),
            '--scene', str(self.root / 'scene'), '--split', 'test', '--out', str(report_path),
            stdout=StringIO(),
        )
        report = json.loads(report_path.read_text())
        self.assertEqual(report['split'], 'test')
        self.assertEqual(len(report['frames']), 3)
        self.assertEqual(report['mean'], {'psnr': 99.0, 'dssim1': 0.0, 'dssim2': 0.0})
        if report['masked_mean'] is not None:
            self.assertEqual(report['masked_mean']['psnr'], 99.0)

    def test_eval_empty_split(self):
        """Tests that evaluating a split without frames is a data error."""
        scene = self.synthetic.scene
        scene.split = {'train': list(scene.cameras), 'test': []}
        try:
            with self.assertRaises(ValidationError):
                evaluate_checkpoint(self.synthetic.ground_truth, scene, 'test', RasterSettings())
        finally:
            ids = list(scene.cameras)
            scene.split = {'train': ids[:-1], 'test': ids[-1:]}


def desk_scene(preset, directory, seed=0):
    """Five ring cameras (four for training) at 32x32, the size the end-to-end properties run at."""
    return generate_synthetic_scene(preset, seed, directory, blobs=24, cameras=5, frames=5, size=32).scene


def start_trainer(scene, total_iters, init='tracks', extra=None, **values):
    config = config_with(train__total_iters=total_iters, train__log_every=0, **values)
    dtype = np.dtype('float32')
    gaussians = initial_set(scene, config, init, 400, dtype)
    if extra is not None:
        gaussians = extra(gaussians)
    return Trainer(scene, gaussians, config.build_train_config())


def held_out_psnr(trainer):
    return evaluate_checkpoint(trainer.gaussians, trainer.scene, 'test', trainer.config.raster)['mean']['psnr']


@tag('slow')
class EndToEndTests(SimpleTestCase):
    """Seeded end-to-end training properties on synthetic scenes."""

    def setUp(self):
        """Creates a scratch directory."""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_moving_average_loss_decreases(self):
        """Tests that the 100-step moving-average loss falls between steps 200 and 2000."""
        trainer = start_trainer(desk_scene('moving-blobs', self.root / 'moving'), 2000)
        trainer.run()
        trace = trainer.loss_trace
        self.assertLess(np.mean(trace[1900:2000]), np.mean(trace[100:200]))

    def test_static_scene_converges(self):
        """Tests a tenfold loss reduction on static blobs with velocities frozen."""
        trainer = start_trainer(
            desk_scene('static-blobs', self.root / 'static'), 2000,
            train__velocity_lambda0=0.0, train__velocity_lambda1=0.0,
        )
        trainer.run()
        self.assertLess(np.mean(trainer.loss_trace[-100:]), np.mean(trainer.loss_trace[:10]) / 10)

    def test_motion_beats_frozen_velocity(self):
        """Tests that learning velocities wins at least 0.5 dB on the held-out camera."""
        scene = desk_scene('moving-blobs', self.root / 'moving')
        full = start_trainer(scene, 3000)
        full.run()
        frozen = start_trainer(scene, 3000, train__velocity_lambda0=0.0, train__velocity_lambda1=0.0)
        frozen.run()
        self.assertGreaterEqual(held_out_psnr(full) - held_out_psnr(frozen), 0.5)

    def test_regularization_lowers_opacity(self):
        """Tests the opacity drop at iteration 500 and the bounded PSNR cost."""
        scene = desk_scene('moving-blobs', self.root / 'moving')
        results = {}
        for weight in (1e-2, 0.0):
            trainer = start_trainer(scene, 1500, loss__lambda_reg=weight)
            trainer.run(500)
            opacity = trainer.mean_opacity()
            trainer.run()
            results[weight] = (opacity, held_out_psnr(trainer))
        self.assertLess(results[1e-2][0], results[0.0][0])
        self.assertGreaterEqual(results[1e-2][1], results[0.0][1] - 0.2)

    def test_relocation_revives_dead_primitives(self):
        """Tests the count over 30 relocation events and the dead count against a run without relocation."""
        scene = desk_scene('moving-blobs', self.root / 'moving')

        def with_dead(gaussians):
            dead = random_primitives(40, [5.0] * 3, [6.0] * 3, scene.frame_times, gaussians.sh_degree, 1,
                                     gaussians.dtype)
            dead.opacity_raw[:] = logit(1e-3)
            return GaussianSet(**{name: np.concatenate([array, getattr(dead, name)])
                                  for name, array in gaussians.arrays()})

        counts = []
        trainer = start_trainer(scene, 300, extra=with_dead, relocation__period=10)
        start = trainer.gaussians.count
        reports = trainer.run(callback=lambda t, report: counts.append(report.count))
        self.assertEqual(sum(r.relocation is not None for r in reports), 30)
        self.assertEqual(set(counts), {start})

        dead_counts = {}
        for enabled in (True, False):
            trainer = start_trainer(scene, 300, extra=with_dead, relocation__enabled=enabled)
            trainer.run()
            dead_counts[enabled] = int(np.sum(trainer.gaussians.opacities() < 0.005))
        self.assertLess(dead_counts[True], dead_counts[False])

    def test_seeded_start_beats_random_start(self):
        """Tests that track seeding renders a lower first-iteration loss than random seeding."""
        scene = desk_scene('moving-blobs', self.root / 'moving')
        losses = {}
        for init in ('tracks', 'random'):
            trainer = start_trainer(scene, 10, init=init, loss__lambda_reg=0.0)
            losses[init] = np.mean([
                loss_render(
                    render_forward(trainer.gaussians, scene.camera(frame.camera_id), frame.time,
                                   trainer.background, trainer.config.raster).rgb,
                    scene.image(frame, trainer.gaussians.dtype), trainer.config.loss,
                )[0]
                for frame in trainer.frames
            ])
        self.assertLess(losses['tracks'], losses['random'])
