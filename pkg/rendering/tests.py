import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from gaussians.appearance import C0
from gaussians.primitives import FIELDS, GaussianSet, activate, logit
from splatsystem.exceptions import NonFiniteParameterError, RenderMismatchError
from training.objective import LossWeights, loss_render

from .cameras import Camera
from .projection import (
    project_covariance, project_gaussians, project_point, projection_jacobian, projection_vjp,
)
from .rasterizer import RasterSettings, cull_and_bin, render_backward, render_forward


def splat_set(positions, colors, opacities, scales=0.3, times=0.0, durations=1.0, sh_degree=0):
    """Isotropic, motionless float64 primitives."""
    count = len(positions)
    g = GaussianSet.empty(count, sh_degree, np.float64)
    g.position_raw[:] = positions
    g.time_raw[:, 0] = times
    g.duration_raw[:, 0] = np.log(durations)
    g.scale_raw[:] = np.log(scales)
    g.opacity_raw[:, 0] = logit(np.asarray(opacities, dtype=np.float64))
    g.sh_coeffs[:, :, 0] = np.asarray(colors, dtype=np.float64) / C0
    return g


def random_scene(rng, count=16, sh_degree=1):
    """Primitives in front of an identity camera, all with t != mu_t at t = 0.5."""
    g = GaussianSet.empty(count, sh_degree, np.float64)
    g.position_raw[:] = np.column_stack([
        rng.uniform(-1.2, 1.2, count), rng.uniform(-1.2, 1.2, count), rng.uniform(4.0, 6.0, count),
    ])
    times = rng.uniform(0.0, 1.0, count)
    times = np.where(np.abs(times - 0.5) < 0.1, times + 0.2, times)
    g.time_raw[:, 0] = times
    g.duration_raw[:, 0] = np.log(rng.uniform(0.5, 1.0, count))
    g.velocity[:] = rng.normal(scale=0.3, size=(count, 3))
    g.scale_raw[:] = np.log(rng.uniform(0.15, 0.4, size=(count, 3)))
    g.orientation_raw[:] = rng.normal(size=(count, 4))
    g.opacity_raw[:, 0] = logit(rng.uniform(0.3, 0.85, count))
    g.sh_coeffs[:, :, 0] = rng.uniform(0.3, 0.9, size=(count, 3)) / C0
    g.sh_coeffs[:, :, 1:] = rng.normal(scale=0.05, size=(count, 3, g.sh_coeffs.shape[2] - 1))
    return g


def small_camera(size=32):
    return Camera('cam', float(size), float(size), size / 2.0, size / 2.0, size, size)


class CameraTests(SimpleTestCase):
    """Tests for the pinhole camera."""

    def test_look_at_centre_and_axis(self):
        """Tests that look_at places the target on the optical axis."""
        cam = Camera.look_at('a', [4.0, 0.0, 1.0], [0.0, 0.0, 0.0], (0, 0, 1), 64, 64, 64, 64)
        cam.check()
        assert_allclose(cam.center, [4.0, 0.0, 1.0], atol=1e-12)
        pixel = project_point(cam, [0.0, 0.0, 0.0]).pixel
        assert_allclose(pixel, [31.5, 31.5], atol=1e-9)
        above = project_point(cam, [0.0, 0.0, 0.5]).pixel
        self.assertLess(above[1], pixel[1])

    def test_check_rejects_bad_cameras(self):
        """Tests the focal-length and orthonormality checks."""
        with self.assertRaises(ValidationError):
            Camera('a', 0.0, 1.0, 0.0, 0.0, 4, 4).check()
        with self.assertRaises(ValidationError):
            Camera('a', 1.0, 1.0, 0.0, 0.0, 4, 4, rotation=np.diag([1.0, 2.0, 1.0])).check()


class ProjectionTests(SimpleTestCase):
    """Tests for point projection, the Jacobian and EWA covariance projection."""

    def setUp(self):
        """Sets up an identity-pose camera with fx=fy=100 and centre (50, 50)."""
        self.cam = Camera('c', 100.0, 100.0, 50.0, 50.0, 100, 100)

    def test_project_point_examples(self):
        """Tests on-axis, off-axis and behind-camera points."""
        on_axis = project_point(self.cam, [0.0, 0.0, 5.0])
        assert_allclose(on_axis.pixel, [50.0, 50.0])
        self.assertEqual(on_axis.depth, 5.0)
        assert_allclose(project_point(self.cam, [1.0, 0.0, 5.0]).pixel, [70.0, 50.0])
        self.assertFalse(project_point(self.cam, [0.0, 0.0, -1.0]).valid)

    def test_jacobian_examples(self):
        """Tests the on-axis Jacobian, 1/z scaling and the invalid case."""
        assert_allclose(projection_jacobian(self.cam, [0.0, 0.0, 5.0]), [[20.0, 0, 0], [0, 20.0, 0]])
        near = projection_jacobian(self.cam, [0.3, -0.2, 2.0])
        far = projection_jacobian(self.cam, [0.3, -0.2, 4.0])
        self.assertAlmostEqual(far[0, 0], near[0, 0] / 2)
        self.assertAlmostEqual(far[1, 1], near[1, 1] / 2)
        self.assertIsNone(projection_jacobian(self.cam, [0.0, 0.0, -1.0]))

    def test_jacobian_matches_finite_differences(self):
        """Tests every Jacobian entry against central differences of project_point."""
        p = np.array([0.4, -0.7, 3.0])
        jac = projection_jacobian(self.cam, p)
        h = 1e-6
        for k in range(3):
            step = np.zeros(3)
            step[k] = h
            numeric = (project_point(self.cam, p + step).pixel - project_point(self.cam, p - step).pixel) / (2 * h)
            assert_allclose(jac[:, k], numeric, rtol=1e-6, atol=1e-8)

    def test_isotropic_closed_form(self):
        """Tests the axis-aligned covariance projection with dilation."""
        g = activate(splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5], scales=0.2), 0)
        proj = project_covariance(self.cam, g, 0.0)
        expected = (100.0 * 0.2 / 4.0) ** 2 + 0.3
        assert_allclose(proj.cov2d, np.diag([expected, expected]), rtol=1e-12)
        self.assertTrue(proj.valid)

    def test_flat_gaussian_keeps_dilation(self):
        """Tests that the smallest eigenvalue stays at least 0.3 px^2."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5])
        g.scale_raw[0] = np.log([1e-6, 1e-6, 0.5])
        proj = project_covariance(self.cam, activate(g, 0), 0.0)
        self.assertGreaterEqual(np.linalg.eigvalsh(proj.cov2d).min(), 0.3 - 1e-12)
        assert_allclose(proj.cov2d, proj.cov2d.T, atol=1e-12)

    def test_view_axis_rotation_preserves_eigenvalues(self):
        """Tests that spinning a primitive about the view axis only rotates cov2d."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5])
        g.scale_raw[0] = np.log([0.1, 0.3, 0.2])
        before = project_covariance(self.cam, activate(g, 0), 0.0).cov2d - 0.3 * np.eye(2)
        angle = 0.7
        g.orientation_raw[0] = [np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)]
        after = project_covariance(self.cam, activate(g, 0), 0.0).cov2d - 0.3 * np.eye(2)
        assert_allclose(np.linalg.eigvalsh(after), np.linalg.eigvalsh(before), rtol=1e-10)
        self.assertGreater(abs(after[0, 1]), 1e-6)

    def test_batched_matches_single(self):
        """Tests project_gaussians against project_covariance per primitive."""
        g = random_scene(np.random.default_rng(5), count=5)
        batch = project_gaussians(g, self.cam, 0.3)
        for i in range(5):
            single = project_covariance(self.cam, activate(g, i), 0.3)
            assert_allclose(batch.mean2d[i], single.mean2d, rtol=1e-12)
            assert_allclose(batch.cov2d[i], single.cov2d, rtol=1e-10)

    def test_projection_vjp_matches_finite_differences(self):
        """Tests d(mean2d, conic) pulled back to positions, scales and quaternions."""
        rng = np.random.default_rng(6)
        g = random_scene(rng, count=3)
        g.velocity[:] = 0.0
        w_mean, w_conic = rng.normal(size=(3, 2)), rng.normal(size=(3, 3))

        def objective():
            proj = project_gaussians(g, self.cam, 0.5)
            return float(np.sum(proj.mean2d * w_mean) + np.sum(proj.conic * w_conic))

        d_moved, d_scale, d_orient = projection_vjp(g, self.cam, project_gaussians(g, self.cam, 0.5), w_mean, w_conic)
        for name, analytic in (('position_raw', d_moved), ('scale_raw', d_scale), ('orientation_raw', d_orient)):
            array = getattr(g, name)
            numeric = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                original = array[idx]
                h = 1e-6 * max(1.0, abs(original))
                array[idx] = original + h
                plus = objective()
                array[idx] = original - h
                minus = objective()
                array[idx] = original
                numeric[idx] = (plus - minus) / (2 * h)
            assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-7, err_msg=name)


class CullingTests(SimpleTestCase):
    """Tests for culling and tile binning."""

    def setUp(self):
        """Sets up a 32x32 camera with 16 px tiles."""
        self.cam = small_camera()
        self.raster = RasterSettings()

    def test_temporal_cull(self):
        """Tests that a primitive beyond the temporal threshold is skipped."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5], times=0.3, durations=0.1)
        limit = 0.1 * np.sqrt(2 * np.log(1 / 0.05))
        self.assertFalse(cull_and_bin(g, self.cam, 0.3 + limit + 0.005, self.raster).visible[0])
        self.assertTrue(cull_and_bin(g, self.cam, 0.3 + limit - 0.005, self.raster).visible[0])

    def test_faint_primitive_culled(self):
        """Tests that a primitive under the alpha floor leaves the image unchanged."""
        bright = splat_set([[0.0, 0.0, 5.0]], [[0.2, 0.6, 0.9]], [0.8])
        both = splat_set([[0.1, 0.0, 4.0], [0.0, 0.0, 5.0]], [[1, 1, 1], [0.2, 0.6, 0.9]], [0.003, 0.8])
        binned = cull_and_bin(both, self.cam, 0.0, self.raster)
        self.assertFalse(binned.visible[0])
        self.assertTrue(binned.visible[1])
        black = np.zeros(3)
        assert_array_equal(
            render_forward(both, self.cam, 0.0, black, self.raster).rgb,
            render_forward(bright, self.cam, 0.0, black, self.raster).rgb,
        )

    def test_splat_tail_under_floor_skipped(self):
        """Tests that pixels where a splat's alpha falls under 1/255 get nothing from it."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5])
        black = np.zeros(3)
        out = render_forward(g, self.cam, 0.0, black, self.raster)
        self.assertEqual(out.pixel_records(26, 16), [])
        assert_array_equal(out.rgb[16, 26], 0.0)
        self.assertGreater(out.rgb[16, 22, 0], 0.0)
        unfloored = render_forward(g, self.cam, 0.0, black, self.raster.with_overrides(alpha_floor=0.0))
        self.assertGreater(unfloored.rgb[16, 26, 0], 0.0)

    def test_empty_set(self):
        """Tests that an empty set bins to empty tiles."""
        binned = cull_and_bin(GaussianSet.empty(0, 0, np.float64), self.cam, 0.0, self.raster)
        self.assertEqual(len(binned.tiles), 4)
        self.assertTrue(all(tile.ids.size == 0 for tile in binned.tiles))

    def test_straddling_splat_in_both_tiles(self):
        """Tests that a splat on a tile boundary is listed in both tiles."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5], scales=0.1)
        binned = cull_and_bin(g, self.cam, 0.0, self.raster)
        self.assertIn(0, binned.tiles[0].ids)
        self.assertIn(0, binned.tiles[1].ids)

    def test_depth_order(self):
        """Tests ascending depth order within a tile."""
        g = splat_set([[0, 0, 6.0], [0, 0, 4.0], [0, 0, 5.0]], [[1, 1, 1]] * 3, [0.5] * 3)
        binned = cull_and_bin(g, self.cam, 0.0, self.raster)
        assert_array_equal(binned.tiles[0].ids, [1, 2, 0])


class RenderForwardTests(SimpleTestCase):
    """Tests for forward compositing against closed forms."""

    def setUp(self):
        """Sets up a 32x32 camera whose axis hits pixel (16, 16)."""
        self.cam = small_camera()
        self.black = np.zeros(3)

    def test_zero_primitives(self):
        """Tests that an empty set renders the background."""
        out = render_forward(GaussianSet.empty(0, 0, np.float64), self.cam, 0.0, [0.2, 0.4, 0.6])
        assert_allclose(out.rgb, np.broadcast_to([0.2, 0.4, 0.6], (32, 32, 3)))
        assert_array_equal(out.alpha, 0.0)

    def test_single_saturated_splat(self):
        """Tests alpha 0.999 and colour at the centre pixel of an opaque splat."""
        g = splat_set([[0.0, 0.0, 4.0]], [[0.2, 0.5, 0.8]], [0.999999])
        out = render_forward(g, self.cam, 0.0, self.black)
        self.assertAlmostEqual(out.alpha[16, 16], 0.999, delta=1e-6)
        assert_allclose(out.rgb[16, 16], 0.999 * np.array([0.2, 0.5, 0.8]), atol=1e-6)

    def test_two_splats_by_hand(self):
        """Tests half-transparent white over opaque black."""
        g = splat_set([[0, 0, 4.0], [0, 0, 6.0]], [[1, 1, 1], [0, 0, 0]], [0.5, 0.999999])
        out = render_forward(g, self.cam, 0.0, self.black)
        assert_allclose(out.rgb[16, 16], [0.5, 0.5, 0.5], atol=1e-6)
        records = out.pixel_records(16, 16)
        self.assertEqual([pid for pid, _ in records], [0, 1])
        self.assertAlmostEqual(records[0][1], 0.5, delta=1e-6)
        self.assertAlmostEqual(records[1][1], 0.5 * 0.999, delta=1e-6)

    def test_temporal_falloff(self):
        """Tests that one duration away the isolated alpha drops by exp(-0.5)."""
        g = splat_set([[0.0, 0.0, 4.0]], [[1, 1, 1]], [0.5], times=0.3, durations=0.2)
        at_peak = render_forward(g, self.cam, 0.3, self.black).pixel_records(16, 16)[0][1]
        later = render_forward(g, self.cam, 0.5, self.black).pixel_records(16, 16)[0][1]
        self.assertAlmostEqual(later, at_peak * np.exp(-0.5), delta=1e-6)

    def test_non_finite_parameter(self):
        """Tests that NaN parameters are reported with the primitive index."""
        g = splat_set([[0, 0, 4.0], [0, 0, 5.0]], [[1, 1, 1]] * 2, [0.5, 0.5])
        g.position_raw[1, 0] = np.nan
        with self.assertRaises(NonFiniteParameterError) as ctx:
            render_forward(g, self.cam, 0.0, self.black)
        self.assertEqual(ctx.exception.index, 1)

    def test_conservation(self):
        """Tests alpha in [0, 1] and rgb <= 1 for colours <= 1 on black."""
        g = random_scene(np.random.default_rng(7), sh_degree=0)
        out = render_forward(g, self.cam, 0.5, self.black)
        self.assertTrue(np.all((out.alpha >= 0) & (out.alpha <= 1)))
        self.assertTrue(np.all(out.rgb <= 1.0 + 1e-12))

    def test_deterministic_and_threaded_agree(self):
        """Tests bit-identical renders and gradients across tile schedules."""
        g = random_scene(np.random.default_rng(8))
        cam = small_camera(48)
        sequential = RasterSettings(deterministic=True)
        threaded = RasterSettings(deterministic=False, threads=4)
        first = render_forward(g, cam, 0.5, self.black, sequential)
        again = render_forward(g, cam, 0.5, self.black, sequential)
        pooled = render_forward(g, cam, 0.5, self.black, threaded)
        assert_array_equal(first.rgb, again.rgb)
        assert_array_equal(first.rgb, pooled.rgb)
        d_rgb = np.random.default_rng(9).normal(size=first.rgb.shape)
        grads_a = render_backward(g, cam, 0.5, first, d_rgb)
        grads_b = render_backward(g, cam, 0.5, pooled, d_rgb)
        for name in FIELDS:
            assert_array_equal(grads_a[name], grads_b[name])


class RenderBackwardTests(SimpleTestCase):
    """Tests for the analytic backward pass."""

    def setUp(self):
        """Sets up a single-tile configuration with no thresholds, for smooth losses."""
        self.cam = small_camera()
        self.black = np.zeros(3)
        self.raster = RasterSettings(tile_size=32, temporal_threshold=0.0, alpha_floor=0.0, transmittance_stop=0.0)

    def test_zero_upstream_gradient(self):
        """Tests that dL/drgb = 0 gives zero gradients everywhere."""
        g = random_scene(np.random.default_rng(10))
        out = render_forward(g, self.cam, 0.5, self.black, self.raster)
        grads = render_backward(g, self.cam, 0.5, out, np.zeros_like(out.rgb))
        for name, array in grads.items():
            assert_array_equal(array, 0.0, err_msg=name)

    def test_velocity_gradient_vanishes_at_centre_time(self):
        """Tests that velocity gets no gradient when t equals every mu_t."""
        g = random_scene(np.random.default_rng(11))
        g.time_raw[:] = 0.5
        out = render_forward(g, self.cam, 0.5, self.black, self.raster)
        grads = render_backward(g, self.cam, 0.5, out, np.ones_like(out.rgb))
        assert_array_equal(grads['velocity'], 0.0)
        self.assertTrue(np.any(grads['position_raw'] != 0))

    def test_mismatched_output(self):
        """Tests the checksum guard after the set is mutated."""
        g = random_scene(np.random.default_rng(12))
        out = render_forward(g, self.cam, 0.5, self.black, self.raster)
        g.touch()
        with self.assertRaises(RenderMismatchError):
            render_backward(g, self.cam, 0.5, out, np.zeros_like(out.rgb))
        with self.assertRaises(RenderMismatchError):
            render_backward(g, self.cam, 0.6, out, np.zeros_like(out.rgb))

    def test_screen_gradient_statistics(self):
        """Tests that visible primitives are counted once per backward pass."""
        g = random_scene(np.random.default_rng(13))
        out = render_forward(g, self.cam, 0.5, self.black, self.raster)
        grads = render_backward(g, self.cam, 0.5, out, np.ones_like(out.rgb))
        assert_array_equal(grads.accum_count[:, 0], out.binned.visible.astype(float))
        self.assertTrue(np.all(grads.accum_grad2d >= 0))

    def check_gradients(self, g, rng, label, raster=None, t=0.5):
        raster = raster or self.raster
        weights = LossWeights()
        out = render_forward(g, self.cam, t, self.black, raster)
        # Keep every pixel at least 0.05 from the target so L1 stays smooth.
        gt = out.rgb + rng.choice([-1.0, 1.0], size=out.rgb.shape) * rng.uniform(0.05, 0.3, size=out.rgb.shape)
        _, d_rgb, _ = loss_render(out.rgb, gt, weights)
        grads = render_backward(g, self.cam, t, out, d_rgb)

        def loss():
            return loss_render(render_forward(g, self.cam, t, self.black, raster).rgb, gt, weights)[0]

        for name in FIELDS:
            array = getattr(g, name)
            indices = list(np.ndindex(array.shape))
            if name == 'sh_coeffs':
                indices = [indices[i] for i in rng.choice(len(indices), min(32, len(indices)), replace=False)]
            analytic, numeric = [], []
            for idx in indices:
                original = array[idx]
                h = 1e-6 * max(1.0, abs(original))
                array[idx] = original + h
                plus = loss()
                array[idx] = original - h
                minus = loss()
                array[idx] = original
                analytic.append(grads[name][idx])
                numeric.append((plus - minus) / (2 * h))
            self.assertTrue(np.any(np.array(analytic) != 0), f"{label}: no gradient for {name}")
            assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-8, err_msg=f"{label}: {name}")
        return out

    def test_gradients_match_finite_differences(self):
        """Tests every raw field against central differences over 10 seeded scenes."""
        for seed in range(10):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(seed)
                self.check_gradients(random_scene(rng), rng, f"seed {seed}")

    def test_gradients_with_early_termination(self):
        """Tests that a stack cut short by the transmittance stop still differentiates correctly."""
        rng = np.random.default_rng(21)
        count = 6
        positions = np.column_stack([
            rng.uniform(-0.05, 0.05, count), rng.uniform(-0.05, 0.05, count), 4.0 + 0.4 * np.arange(count),
        ])
        g = splat_set(positions, rng.uniform(0.2, 0.9, size=(count, 3)), [0.95] * count, scales=0.4, times=0.2)
        g.scale_raw[:] = np.log(rng.uniform(0.3, 0.5, size=(count, 3)))
        g.orientation_raw[:] = rng.normal(size=(count, 4))
        g.velocity[:] = rng.normal(scale=0.1, size=(count, 3))
        raster = self.raster.with_overrides(transmittance_stop=1e-4)
        out = self.check_gradients(g, rng, "early stop", raster, t=0.3)
        n_contrib = out.records[0].n_contrib
        self.assertLess(n_contrib[16 * 32 + 16], count)
        self.assertGreaterEqual(n_contrib[16 * 32 + 16], 2)
        self.assertEqual(n_contrib.max(), count)
