import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from gaussians.appearance import C0
from rendering.cameras import Camera
from scenes.synthetic import ring_cameras
from splatsystem.exceptions import EmptySeedCloudError

from .correspondences import CorrespondenceSet, Observation, format_tracks, parse_tracks, synthesize_tracks
from .seeding import (
    SeedCloud, SeedFrame, build_seed_cloud, frame_interval, random_primitives, seed_primitives,
)
from .triangulation import reprojection_rms, triangulate, triangulate_frame
from .velocity import knn_velocity, point_spacing


def observe(point, cameras, noise=0.0, rng=None):
    """Projects one world point into every camera."""
    track = []
    for cam in cameras:
        x, y, z = cam.world_to_camera(np.asarray(point, dtype=np.float64)[None])[0]
        pixel = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        if noise:
            pixel = pixel + rng.normal(scale=noise, size=2)
        track.append(Observation(cam.id, pixel))
    return track


def stereo_pair(angle_deg=30.0, depth=5.0, focal=800.0):
    """Two cameras on a circle around (0, 0, depth), ``angle_deg`` apart, both aimed at its centre."""
    target = np.array([0.0, 0.0, depth])
    cameras = []
    for name, angle in (('left', -0.5), ('right', 0.5)):
        theta = np.radians(angle * angle_deg)
        eye = target + depth * np.array([np.sin(theta), 0.0, -np.cos(theta)])
        cameras.append(Camera.look_at(name, eye, target, (0.0, -1.0, 0.0), focal, focal, 640, 480))
    return cameras


def grid_points(spacing=0.5, half=1):
    axis = np.arange(-half, half + 1) * spacing
    return np.array(np.meshgrid(axis, axis, axis, indexing='ij')).reshape(3, -1).T


class CorrespondenceTests(SimpleTestCase):
    """Tests for the track file format and synthetic tracks."""

    def test_parse_tracks(self):
        """Tests times, comments and the number of tracks."""
        text = "# synthetic\n0.5 cam0 1.0 2.0 cam1 3 4\n\n1.0 a 1 1 b 2 2 c 3 3\n0.5 a 0 0 b 1 1\n"
        tracks = parse_tracks(text)
        self.assertEqual(tracks.times, [0.5, 1.0])
        self.assertEqual(len(tracks), 3)
        first = tracks.tracks[0.5][0]
        self.assertEqual(first[1].camera_id, 'cam1')
        assert_array_equal(first[1].pixel, [3.0, 4.0])
        self.assertEqual(len(parse_tracks(format_tracks(tracks))), 3)

    def test_parse_errors_name_the_line(self):
        """Tests single-view tracks, broken triples and bad numbers."""
        for text in ("0.1 a 1 1 b 2 2\n0.2 a 1 1\n", "0.1 a 1 1 b 2\n0.1 a 1 1 b 2 2\n", "x a 1 1 b 2 2\n"):
            with self.assertRaises(ValidationError) as cm:
                parse_tracks(text, source='tracks.txt')
            self.assertIn('tracks.txt:', cm.exception.message)
        with self.assertRaisesMessage(ValidationError, 'tracks.txt:2:'):
            parse_tracks("0.1 a 1 1 b 2 2\n0.2 a 1 1\n", source='tracks.txt')

    def test_unknown_camera(self):
        """Tests that a track naming an undeclared camera is rejected."""
        tracks = parse_tracks("0.0 a 1 1 ghost 2 2\n")
        with self.assertRaisesMessage(ValidationError, "'ghost'"):
            tracks.check(['a', 'b'])

    def test_synthesized_tracks_project_exactly(self):
        """Tests that synthetic tracks are the exact projections of the points."""
        cameras = ring_cameras(3)
        points = grid_points(0.3)
        tracks = synthesize_tracks({0.0: points}, cameras)
        self.assertEqual(len(tracks), len(points))
        by_id = {cam.id: cam for cam in cameras}
        for point, track in zip(points, tracks.tracks[0.0]):
            self.assertLess(reprojection_rms(point, track, by_id), 1e-9)


class TriangulationTests(SimpleTestCase):
    """Tests for DLT triangulation."""

    def setUp(self):
        """Sets up a 30 degree stereo pair looking at a point 5 units away."""
        self.cameras = stereo_pair()
        self.by_id = {cam.id: cam for cam in self.cameras}

    def test_noiseless_recovery(self):
        """Tests recovery to 1e-9 from exact projections."""
        for point in ([0.0, 0.0, 5.0], [0.4, -0.3, 5.6], [-0.7, 0.2, 4.1]):
            result = triangulate(observe(point, self.cameras), self.by_id)
            self.assertTrue(result.accepted)
            assert_allclose(result.point, point, atol=1e-9)
            self.assertLess(result.rms, 1e-6)

    def test_identical_cameras_are_degenerate(self):
        """Tests that one camera seen twice has no baseline."""
        track = observe([0.1, 0.2, 5.0], [self.cameras[0], self.cameras[0]])
        result = triangulate(track, self.by_id)
        self.assertFalse(result.accepted)
        self.assertEqual(result.reason, 'degenerate')

    def test_noisy_recovery(self):
        """Tests sub-0.05 RMS error under one pixel of noise."""
        rng = np.random.default_rng(0)
        errors = []
        for _ in range(200):
            point = np.array([0.0, 0.0, 5.0]) + rng.uniform(-0.3, 0.3, size=3)
            result = triangulate(observe(point, self.cameras, noise=1.0, rng=rng), self.by_id)
            self.assertTrue(result.accepted)
            errors.append(np.linalg.norm(result.point - point))
        self.assertLess(np.sqrt(np.mean(np.square(errors))), 0.05)

    def test_point_behind_cameras(self):
        """Tests that a point behind the rig is rejected."""
        cameras = [Camera('a', 100.0, 100.0, 50.0, 50.0, 100, 100),
                   Camera('b', 100.0, 100.0, 50.0, 50.0, 100, 100, translation=np.array([-1.0, 0.0, 0.0]))]
        by_id = {cam.id: cam for cam in cameras}
        result = triangulate(observe([0.5, 0.2, -5.0], cameras), by_id)
        self.assertFalse(result.accepted)
        self.assertEqual(result.reason, 'behind camera')

    def test_reprojection_rejection(self):
        """Tests that an inconsistent third view pushes the RMS over 2 px."""
        cameras = self.cameras + [Camera.look_at('top', [0.0, -3.0, 1.0], [0.0, 0.0, 5.0], (0.0, -1.0, 0.0),
                                                 800.0, 800.0, 640, 480)]
        by_id = {cam.id: cam for cam in cameras}
        track = observe([0.1, 0.1, 5.0], cameras)
        track[2] = Observation('top', track[2].pixel + np.array([0.0, 40.0]))
        result = triangulate(track, by_id)
        self.assertFalse(result.accepted)
        self.assertEqual(result.reason, 'reprojection')
        self.assertGreater(result.rms, 2.0)

        points, kept = triangulate_frame([observe([0.0, 0.1, 5.0], cameras), track], by_id)
        self.assertEqual(kept, [0])
        self.assertEqual(points.shape, (1, 3))


class VelocityTests(SimpleTestCase):
    """Tests for nearest-neighbour velocities."""

    def setUp(self):
        """Sets up a 4x4x4 unit grid."""
        self.points = np.array(np.meshgrid(*[np.arange(4.0)] * 3, indexing='ij')).reshape(3, -1).T

    def test_rigid_shift(self):
        """Tests that a shifted cloud gives the shift over the time step."""
        d = np.array([0.1, -0.05, 0.02])
        velocities = knn_velocity(self.points, self.points + d, 0.25)
        assert_allclose(velocities, np.tile(d / 0.25, (64, 1)), atol=1e-12)

    def test_identity(self):
        """Tests that an unchanged cloud is at rest."""
        assert_array_equal(knn_velocity(self.points, self.points.copy(), 0.1), 0.0)

    def test_outlier_gets_zero_velocity(self):
        """Tests the mismatch cutoff on a point far from everything."""
        d = np.array([0.1, 0.0, 0.0])
        points = np.vstack([self.points, [[100.0, 100.0, 100.0]]])
        velocities = knn_velocity(points, self.points + d, 1.0)
        assert_array_equal(velocities[-1], 0.0)
        assert_allclose(velocities[:-1], np.tile(d, (64, 1)), atol=1e-12)

    def test_mostly_static_cloud_keeps_movers(self):
        """Tests that a few movers among many jittering static points keep their velocity."""
        rng = np.random.default_rng(5)
        points = np.array(np.meshgrid(np.arange(4.0), np.arange(4.0), np.arange(5.0), indexing='ij')).reshape(3, -1).T
        movers = points[:, 2] == 4.0
        after = points + rng.normal(scale=1e-4, size=points.shape)
        after[movers] = points[movers] + [0.02, 0.0, 0.0]
        velocities = knn_velocity(points, after, 0.1)
        self.assertEqual(int(movers.sum()), 16)
        assert_allclose(velocities[movers], np.tile([0.2, 0.0, 0.0], (16, 1)), atol=1e-12)
        self.assertLess(np.abs(velocities[~movers]).max(), 0.01)

    def test_point_spacing(self):
        """Tests the median same-cloud neighbour distance."""
        self.assertEqual(point_spacing(self.points), 1.0)
        self.assertEqual(point_spacing(self.points[:1]), 0.0)

    def test_empty_clouds_and_bad_step(self):
        """Tests the empty next cloud warning and the time-step check."""
        with self.assertLogs('initfit.velocity', 'WARNING'):
            velocities = knn_velocity(self.points, np.zeros((0, 3)), 0.1)
        assert_array_equal(velocities, np.zeros((64, 3)))
        self.assertEqual(knn_velocity(np.zeros((0, 3)), self.points, 0.1).shape, (0, 3))
        with self.assertRaises(ValueError):
            knn_velocity(self.points, self.points, 0.0)


class SeedingTests(SimpleTestCase):
    """Tests for seed clouds and initial sets."""

    def test_dc_coefficient_from_colour(self):
        """Tests the single-point example: colour Y00 gives unit DC coefficients."""
        cloud = SeedCloud({0.0: SeedFrame(np.array([[0.0, 0.0, 5.0]]), np.zeros((1, 3)), np.full((1, 3), C0))})
        g = seed_primitives(cloud, [0.0], sh_degree=1, dtype=np.float64)
        self.assertEqual(g.count, 1)
        assert_allclose(g.sh_coeffs[0, :, 0], 1.0, rtol=1e-15)
        assert_array_equal(g.sh_coeffs[0, :, 1:], 0.0)
        assert_array_equal(g.position_raw[0], [0.0, 0.0, 5.0])
        assert_array_equal(g.orientation_raw[0], [1.0, 0.0, 0.0, 0.0])
        self.assertAlmostEqual(g.opacities()[0], 0.1)
        self.assertAlmostEqual(g.scales()[0, 0], 0.01)
        self.assertAlmostEqual(g.durations()[0], 2.0)

    def test_rigid_shift_velocities(self):
        """Tests that two rigidly shifted frames seed the shift over the frame interval."""
        cameras = ring_cameras(4)
        points = grid_points(0.5)
        d = np.array([0.05, 0.02, -0.03])
        tracks = synthesize_tracks({0.0: points, 0.5: points + d}, cameras)
        cloud = build_seed_cloud(tracks, {cam.id: cam for cam in cameras})
        self.assertEqual(cloud.times, [0.0, 0.5])
        self.assertEqual(cloud.total_points, 2 * len(points))
        g = seed_primitives(cloud, [0.0, 0.5], dtype=np.float64)
        assert_allclose(g.velocity, np.tile(d / 0.5, (g.count, 1)), atol=1e-8)
        assert_array_equal(np.unique(g.times()), [0.0, 0.5])
        assert_allclose(g.durations(), 1.0)
        assert_allclose(g.sh_coeffs[:, :, 0], 0.5 / C0)
        g.check()
        self.assertTrue(np.all(g.scales() > 0))

    def test_zero_velocity_seeding(self):
        """Tests that seeding at rest keeps placement and colour but drops the motion."""
        cameras = ring_cameras(4)
        points = grid_points(0.5)
        d = np.array([0.05, 0.02, -0.03])
        tracks = synthesize_tracks({0.0: points, 0.5: points + d}, cameras)
        cloud = build_seed_cloud(tracks, {cam.id: cam for cam in cameras})
        moving = seed_primitives(cloud, [0.0, 0.5], dtype=np.float64)
        still = seed_primitives(cloud, [0.0, 0.5], dtype=np.float64, zero_velocity=True)
        self.assertTrue(np.all(moving.velocity != 0))
        assert_array_equal(still.velocity, 0.0)
        for name in ('position_raw', 'time_raw', 'duration_raw', 'scale_raw', 'opacity_raw', 'sh_coeffs'):
            assert_array_equal(getattr(still, name), getattr(moving, name))

    def test_colours_and_density_cap(self):
        """Tests image colours and the per-frame stride subsampling."""
        cameras = ring_cameras(3)
        tracks = synthesize_tracks({0.0: grid_points(0.5)}, cameras)
        image = np.full((64, 64, 3), 0.3)
        cloud = build_seed_cloud(
            tracks, {cam.id: cam for cam in cameras}, image_lookup=lambda camera_id, time: image, max_points=10,
        )
        self.assertEqual(cloud.total_points, 9)
        assert_allclose(cloud.frames[0.0].colors, 0.3)

    def test_empty_cloud(self):
        """Tests the error that points to random initialization."""
        with self.assertRaisesMessage(EmptySeedCloudError, 'random'):
            seed_primitives(SeedCloud(), [0.0, 1.0])
        self.assertEqual(build_seed_cloud(CorrespondenceSet(), {}).total_points, 0)

    def test_frame_interval(self):
        """Tests the median spacing and the single-frame value."""
        self.assertEqual(frame_interval([0.0, 0.25, 0.5, 1.0]), 0.25)
        self.assertEqual(frame_interval([0.3]), 1.0)

    def test_random_primitives(self):
        """Tests bounds, rest and reproducibility of the random start."""
        g = random_primitives(200, [-1.0, -2.0, 0.0], [1.0, 2.0, 3.0], [0.0, 0.5, 1.0], sh_degree=1, seed=4)
        self.assertEqual(g.count, 200)
        self.assertTrue(np.all(g.position_raw >= [-1.0, -2.0, 0.0]))
        self.assertTrue(np.all(g.position_raw <= [1.0, 2.0, 3.0]))
        self.assertTrue(np.all((g.time_raw >= 0.0) & (g.time_raw <= 1.0)))
        assert_array_equal(g.velocity, 0.0)
        again = random_primitives(200, [-1.0, -2.0, 0.0], [1.0, 2.0, 3.0], [0.0, 0.5, 1.0], sh_degree=1, seed=4)
        assert_array_equal(g.position_raw, again.position_raw)
