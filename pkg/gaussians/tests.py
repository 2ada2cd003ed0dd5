import warnings

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from splatsystem.exceptions import DegenerateQuaternionError

from .appearance import C0, C1, DegenerateDirectionWarning, colors_vjp, eval_color, eval_colors, sh_basis
from .primitives import (
    FIELDS, GaussianSet, activate, covariance, logit, motion_position,
    spacetime_opacity, spacetime_opacity_and_grad, temporal_opacity,
)


def single(position=(0.0, 0.0, 0.0), time=0.0, duration=1.0, velocity=(0.0, 0.0, 0.0),
           scale=(1.0, 1.0, 1.0), orientation=(1.0, 0.0, 0.0, 0.0), opacity=0.5, sh_degree=0):
    """A one-primitive float64 set built from activated values."""
    g = GaussianSet.empty(1, sh_degree, np.float64)
    g.position_raw[0] = position
    g.time_raw[0] = time
    g.duration_raw[0] = np.log(duration)
    g.velocity[0] = velocity
    g.scale_raw[0] = np.log(scale)
    g.orientation_raw[0] = orientation
    g.opacity_raw[0] = logit(opacity)
    return g


def random_set(rng, count=4, sh_degree=1):
    g = GaussianSet.empty(count, sh_degree, np.float64)
    g.position_raw[:] = rng.normal(size=(count, 3))
    g.time_raw[:] = rng.uniform(0, 1, size=(count, 1))
    g.duration_raw[:] = np.log(rng.uniform(0.2, 0.6, size=(count, 1)))
    g.velocity[:] = rng.normal(scale=0.5, size=(count, 3))
    g.scale_raw[:] = np.log(rng.uniform(0.5, 1.5, size=(count, 3)))
    g.orientation_raw[:] = rng.normal(size=(count, 4))
    g.opacity_raw[:] = rng.normal(size=(count, 1))
    g.sh_coeffs[:] = rng.normal(size=g.sh_coeffs.shape)
    return g


class ActivationTests(SimpleTestCase):
    """Tests for activation conventions and storage."""

    def test_activation_examples(self):
        """Tests sigmoid(0), exp(0) and quaternion normalisation."""
        g = GaussianSet.empty(1, 0, np.float64)
        g.orientation_raw[0] = (2.0, 0.0, 0.0, 0.0)
        view = activate(g, 0)
        self.assertEqual(view.opacity, 0.5)
        assert_array_equal(view.scale, [1.0, 1.0, 1.0])
        assert_array_equal(view.quaternion, [1.0, 0.0, 0.0, 0.0])
        assert_allclose(view.rotation, np.eye(3))

    def test_activate_errors(self):
        """Tests out-of-range indices and zero quaternions."""
        g = GaussianSet.empty(2, 0, np.float64)
        with self.assertRaises(IndexError):
            activate(g, 2)
        g.orientation_raw[1] = 0.0
        with self.assertRaises(DegenerateQuaternionError):
            activate(g, 1)
        with self.assertRaises(DegenerateQuaternionError):
            g.unit_quaternions()

    def test_field_shapes(self):
        """Tests that every field shares the leading dimension and check() passes."""
        g = GaussianSet.empty(5, 2)
        g.check()
        for name, array in g.arrays():
            self.assertEqual(array.shape[0], 5, name)
        self.assertEqual(g.sh_coeffs.shape, (5, 3, 9))
        self.assertEqual(g.sh_degree, 2)
        g.velocity = np.zeros((4, 3), dtype=np.float32)
        with self.assertRaises(ValueError):
            g.check()

    def test_touch_and_copy(self):
        """Tests the mutation counter survives copies."""
        g = GaussianSet.empty(1)
        g.touch()
        self.assertEqual(g.copy().version, 1)


class EvaluationTests(SimpleTestCase):
    """Tests for motion, temporal opacity, covariance and space-time opacity."""

    def test_motion_position_examples(self):
        """Tests the linear motion examples."""
        g = activate(single(velocity=(1.0, 0.0, 0.0)), 0)
        assert_allclose(motion_position(g, 0.5), [0.5, 0.0, 0.0])
        g = activate(single(position=(1, 2, 3), velocity=(0.2, -0.4, 0.0), time=0.1), 0)
        assert_allclose(motion_position(g, 0.6), [1.1, 1.8, 3.0])
        assert_array_equal(motion_position(g, 0.1), [1.0, 2.0, 3.0])

    def test_motion_is_affine(self):
        """Tests the midpoint property of the motion function."""
        g = activate(single(position=(1, 2, 3), velocity=(0.3, -0.7, 1.1), time=0.4), 0)
        mid = motion_position(g, 0.5 * (0.2 + 0.9))
        assert_allclose(mid, 0.5 * (motion_position(g, 0.2) + motion_position(g, 0.9)), atol=1e-15)

    def test_temporal_opacity_examples(self):
        """Tests the peak, the one-duration value and symmetry."""
        g = activate(single(time=0.3, duration=0.2), 0)
        self.assertEqual(temporal_opacity(g, 0.3), 1.0)
        self.assertAlmostEqual(temporal_opacity(g, 0.5), np.exp(-0.5), places=12)
        self.assertAlmostEqual(temporal_opacity(g, 0.3 + 0.07), temporal_opacity(g, 0.3 - 0.07), places=14)

    def test_covariance_examples(self):
        """Tests the axis-aligned and the 90 degree z-rotation covariances."""
        g = activate(single(scale=(1.0, 2.0, 3.0)), 0)
        assert_allclose(covariance(g), np.diag([1.0, 4.0, 9.0]), atol=1e-12)
        half = np.sqrt(0.5)
        g = activate(single(scale=(1.0, 2.0, 3.0), orientation=(half, 0.0, 0.0, half)), 0)
        assert_allclose(covariance(g), np.diag([4.0, 1.0, 9.0]), atol=1e-12)

    def test_covariance_symmetric_positive(self):
        """Tests symmetry and positive eigenvalues on random primitives."""
        g = random_set(np.random.default_rng(0), count=8)
        for i in range(8):
            cov = covariance(activate(g, i))
            assert_allclose(cov, cov.T, atol=1e-12)
            self.assertTrue(np.all(np.linalg.eigvalsh(cov) > 0))
            assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * g.scale_raw[i])), rtol=1e-10)

    def test_spacetime_opacity_examples(self):
        """Tests the peak value and the unit-distance isotropic case."""
        g = activate(single(opacity=0.8, time=0.2), 0)
        self.assertAlmostEqual(spacetime_opacity(g, [0.0, 0.0, 0.0], 0.2), 0.8, places=12)
        self.assertAlmostEqual(spacetime_opacity(g, [1.0, 0.0, 0.0], 0.2), 0.485225, delta=1e-6)
        g = activate(single(opacity=1e-30), 0)
        self.assertLess(spacetime_opacity(g, [0.0, 0.0, 0.0], 0.0), 1e-29)

    def test_spacetime_opacity_bound(self):
        """Tests that the value never exceeds base times temporal opacity."""
        rng = np.random.default_rng(1)
        g = random_set(rng, count=3)
        for i in range(3):
            view = activate(g, i)
            for _ in range(20):
                x, t = rng.normal(size=3), rng.uniform(-0.5, 1.5)
                self.assertLessEqual(spacetime_opacity(view, x, t), view.opacity * temporal_opacity(view, t) + 1e-15)

    def test_spacetime_opacity_gradient(self):
        """Tests analytic raw-field gradients against central differences."""
        rng = np.random.default_rng(2)
        g = random_set(rng, count=2, sh_degree=0)
        x, t = rng.normal(size=3) * 0.5, 0.8
        _, grads = spacetime_opacity_and_grad(g, 1, x, t)
        for name in FIELDS:
            array = getattr(g, name)
            numeric = np.zeros_like(array[1])
            for idx in np.ndindex(array[1].shape):
                original = array[1][idx]
                h = 1e-5 * max(1.0, abs(original))
                array[1][idx] = original + h
                plus = spacetime_opacity(activate(g, 1), x, t)
                array[1][idx] = original - h
                minus = spacetime_opacity(activate(g, 1), x, t)
                array[1][idx] = original
                numeric[idx] = (plus - minus) / (2 * h)
            assert_allclose(grads[name], numeric, rtol=1e-6, atol=1e-10, err_msg=name)


class AppearanceTests(SimpleTestCase):
    """Tests for the SH basis and colour evaluation."""

    def test_basis_examples(self):
        """Tests the degree-0 constant and the +z degree-1 block."""
        assert_allclose(sh_basis([0.3, -0.2, 0.9], 0).values, [0.2820948], atol=1e-7)
        basis = sh_basis([0.0, 0.0, 1.0], 1)
        assert_allclose(basis.values[1:4], [0.0, 0.4886025, 0.0], atol=1e-7)
        self.assertEqual(basis.values[0], C0)

    def test_basis_parity(self):
        """Tests that odd degrees flip sign under d -> -d."""
        d = np.array([0.3, -0.5, 0.8])
        plus, minus = sh_basis(d, 3).values, sh_basis(-d, 3).values
        degree = np.repeat(np.arange(4), [1, 3, 5, 7])
        assert_allclose(minus, np.where(degree % 2 == 1, -plus, plus), atol=1e-12)

    def test_basis_normalises_and_rejects_degree(self):
        """Tests the non-unit leniency and the degree range check."""
        assert_allclose(sh_basis([0, 0, 5], 1).values, sh_basis([0, 0, 1], 1).values)
        with self.assertRaises(ValidationError):
            sh_basis([0, 0, 1], 4)

    def test_basis_zero_direction_falls_back(self):
        """Tests that a zero direction warns and evaluates at (0, 0, 1) instead of NaN."""
        with self.assertWarns(DegenerateDirectionWarning):
            basis = sh_basis([0.0, 0.0, 0.0], 2)
        self.assertTrue(np.all(np.isfinite(basis.values)))
        assert_allclose(basis.values, sh_basis([0.0, 0.0, 1.0], 2).values)

    def test_eval_color_dc_only(self):
        """Tests that degree-0 colour is C0 times the coefficient from any viewpoint."""
        g = single(position=(0.0, 0.0, 5.0), sh_degree=2)
        g.sh_coeffs[0, :, 0] = 1.0
        view = activate(g, 0)
        rng = np.random.default_rng(3)
        colors = np.array([eval_color(view, rng.normal(size=3) * 10, 0.0, 2) for _ in range(100)])
        assert_allclose(colors, np.full((100, 3), 0.2820948), atol=1e-7)
        self.assertEqual(float(np.var(colors)), 0.0)

    def test_eval_color_clamp_and_degenerate(self):
        """Tests the zero clamp and the fallback direction warning."""
        g = single(sh_degree=1)
        g.sh_coeffs[0, :, 0] = -1.0
        assert_array_equal(eval_color(activate(g, 0), [0, 0, -3], 0.0, 1), [0.0, 0.0, 0.0])
        g.sh_coeffs[0, :, 0] = 0.0
        g.sh_coeffs[0, :, 2] = 1.0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            color = eval_color(activate(g, 0), [0.0, 0.0, 0.0], 0.0, 1)
        self.assertTrue(any(issubclass(w.category, DegenerateDirectionWarning) for w in caught))
        assert_allclose(color, [C1, C1, C1])

    def test_colors_vjp_matches_finite_differences(self):
        """Tests the batched colour gradient w.r.t. SH and positions."""
        rng = np.random.default_rng(4)
        positions = rng.normal(size=(3, 3)) + [0, 0, 4]
        sh = rng.normal(size=(3, 3, 9)) + np.array([20.0, 0, 0, 0, 0, 0, 0, 0, 0])
        center = np.array([0.2, -0.1, 0.0])
        weights = rng.normal(size=(3, 3))
        evaluation = eval_colors(positions, center, sh, 2)
        d_sh, d_pos = colors_vjp(evaluation, sh, 2, weights)

        def objective(p, s):
            return float(np.sum(eval_colors(p, center, s, 2).colors * weights))

        h = 1e-6
        for idx in np.ndindex(positions.shape):
            step = np.zeros_like(positions)
            step[idx] = h
            numeric = (objective(positions + step, sh) - objective(positions - step, sh)) / (2 * h)
            self.assertAlmostEqual(d_pos[idx], numeric, delta=1e-6 * max(1.0, abs(numeric)))
        for idx in [(0, 0, 0), (1, 2, 4), (2, 1, 8)]:
            step = np.zeros_like(sh)
            step[idx] = h
            numeric = (objective(positions, sh + step) - objective(positions, sh - step)) / (2 * h)
            self.assertAlmostEqual(d_sh[idx], numeric, delta=1e-8 * max(1.0, abs(numeric)))
