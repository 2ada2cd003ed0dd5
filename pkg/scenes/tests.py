import json
import tempfile
from contextlib import redirect_stderr
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from gaussians.primitives import GaussianSet
from initfit.correspondences import read_tracks
from rendering.rasterizer import RasterSettings, render_forward

from .checkpoints import (
    MAGIC, Checkpoint, CheckpointFormatError, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint,
)
from .images import quantize, read_image, write_image
from .management.commands.render import Command as RenderCommand
from .manifest import load_scene, parse_scene, write_scene
from .synthetic import SPEED_RANGE, blob_radii, generate_synthetic_scene


def camera_entry(camera_id='a', **overrides):
    entry = {
        'id': camera_id, 'fx': 2.0, 'fy': 2.0, 'cx': 1.0, 'cy': 1.0, 'width': 2, 'height': 2,
        'rotation': [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 'translation': [0.0, 0.0, 0.0],
    }
    entry.update(overrides)
    return entry


def random_checkpoint(count=7, sh_degree=2, seed=0):
    rng = np.random.default_rng(seed)
    g = GaussianSet.empty(count, sh_degree)
    for name, array in g.arrays():
        array[...] = rng.normal(size=array.shape)
    return Checkpoint(g, config={'train': {'seed': seed}}, iteration=42, rng_state=rng.bit_generator.state)


def rewrite_header(data, edit):
    """Applies ``edit`` to the decoded header and reassembles the file."""
    line, _, rest = data.partition(b'\n')
    length = int(line.split(b' ')[2])
    header = json.loads(rest[:length])
    edit(header)
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    return MAGIC + f" 1 {len(encoded)}\n".encode('ascii') + encoded + rest[length:]


class ManifestTests(SimpleTestCase):
    """Tests for scene manifest validation and image decoding."""

    def setUp(self):
        """Writes a 2x2 white frame into a scratch scene directory."""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        write_image(self.root / 'images' / 'a_0000.png', np.ones((2, 2, 3)))
        self.data = {
            'name': 'tiny',
            'cameras': [camera_entry()],
            'frames': [{'camera': 'a', 'time': 0.0, 'image': 'images/a_0000.png'}],
        }

    def test_minimal_manifest(self):
        """Tests that one camera and one frame load with their defaults."""
        (self.root / 'scene.json').write_text(json.dumps(self.data))
        scene = load_scene(self.root)
        self.assertEqual(scene.name, 'tiny')
        self.assertEqual(scene.frame_times, [0.0])
        self.assertEqual(scene.split_cameras('train'), ['a'])
        self.assertEqual(scene.test_frames(), [])
        self.assertEqual(scene.camera_extent(), 1.0)
        self.assertIsNone(scene.mask(scene.frames[0]))

    def test_white_decodes_to_one(self):
        """Tests that 8-bit 255 decodes to exactly 1.0."""
        scene = parse_scene(self.data, self.root)
        image = scene.image(scene.frames[0])
        self.assertEqual(image.dtype, np.float32)
        assert_array_equal(image, 1.0)
        assert_array_equal(scene.image(scene.frames[0], np.float64), 1.0)

    def test_undeclared_camera(self):
        """Tests that the error names the unknown camera id and the entry."""
        with self.assertRaisesMessage(ValidationError, "split.test: unknown camera id 'ghost'"):
            parse_scene(self.data | {'split': {'test': ['ghost']}}, self.root)
        self.data['frames'][0]['camera'] = 'ghost'
        with self.assertRaisesMessage(ValidationError, "frames[0].camera: unknown camera id 'ghost'"):
            parse_scene(self.data, self.root)

    def test_time_out_of_range(self):
        """Tests that frame times must lie in [0, 1]."""
        self.data['frames'][0]['time'] = 1.5
        with self.assertRaisesMessage(ValidationError, 'frames[0].time'):
            parse_scene(self.data, self.root)

    def test_missing_image(self):
        """Tests the missing-file error and the unreadable-image error."""
        self.data['frames'][0]['image'] = 'images/nope.png'
        with self.assertRaisesMessage(ValidationError, 'file not found: images/nope.png'):
            parse_scene(self.data, self.root)
        (self.root / 'broken.png').write_bytes(b'not a png')
        with self.assertRaises(ValidationError):
            read_image(self.root / 'broken.png')

    def test_bad_cameras(self):
        """Tests rotation shape, orthonormality, duplicates and zero focal length."""
        bad = [
            camera_entry(rotation=[[1.0, 0.0], [0.0, 1.0]]),
            camera_entry(rotation=[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            camera_entry(fx=0.0),
        ]
        for entry in bad:
            with self.assertRaisesMessage(ValidationError, 'cameras[0]'):
                parse_scene(self.data | {'cameras': [entry]}, self.root)
        with self.assertRaisesMessage(ValidationError, 'duplicate'):
            parse_scene(self.data | {'cameras': [camera_entry(), camera_entry()]}, self.root)

    def test_write_and_reload(self):
        """Tests that a written manifest loads back equal."""
        scene = parse_scene(self.data | {'bounds': [[-1, -1, -1], [1, 1, 1]]}, self.root)
        write_scene(scene)
        again = load_scene(self.root / 'scene.json')
        self.assertEqual(again.to_dict(), scene.to_dict())
        low, high = again.scene_bounds()
        assert_array_equal(low, -1.0)
        assert_array_equal(high, 1.0)


class CheckpointTests(SimpleTestCase):
    """Tests for the checkpoint layout."""

    def test_save_load_save_is_byte_identical(self):
        """Tests idempotent round trips and exact arrays."""
        ckpt = random_checkpoint()
        first = encode_checkpoint(ckpt)
        loaded = decode_checkpoint(first)
        self.assertEqual(encode_checkpoint(loaded), first)
        for name, array in ckpt.gaussians.arrays():
            assert_array_equal(getattr(loaded.gaussians, name), array)
        self.assertEqual(loaded.iteration, 42)
        self.assertEqual(loaded.rng_state, ckpt.rng_state)
        self.assertEqual(loaded.config, {'train': {'seed': 0}})

    def test_files_and_precision(self):
        """Tests writing to disk and casting on load."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'nested' / 'run.ckpt'
            ckpt = random_checkpoint(sh_degree=0)
            ckpt.gaussians = ckpt.gaussians.astype(np.float64)
            save_checkpoint(ckpt, path)
            loaded = load_checkpoint(path, np.float64)
        self.assertEqual(loaded.gaussians.dtype, np.float64)
        assert_array_equal(loaded.gaussians.velocity, ckpt.gaussians.velocity.astype(np.float32))

    def test_corrupted_shape_names_field(self):
        """Tests that a wrong header shape is reported with its field."""
        def edit(header):
            entry = next(f for f in header['fields'] if f['name'] == 'velocity')
            entry['shape'] = [7, 4]
        with self.assertRaisesMessage(CheckpointFormatError, "'velocity'"):
            decode_checkpoint(rewrite_header(encode_checkpoint(random_checkpoint()), edit))

    def test_missing_field(self):
        """Tests that a header without a field is rejected."""
        def edit(header):
            header['fields'] = [f for f in header['fields'] if f['name'] != 'sh_coeffs']
        with self.assertRaisesMessage(CheckpointFormatError, "'sh_coeffs'"):
            decode_checkpoint(rewrite_header(encode_checkpoint(random_checkpoint()), edit))

    def test_version_and_truncation(self):
        """Tests the version check, truncated blobs and foreign files."""
        data = encode_checkpoint(random_checkpoint())
        with self.assertRaisesMessage(CheckpointFormatError, 'version 2'):
            decode_checkpoint(data.replace(MAGIC + b' 1 ', MAGIC + b' 2 ', 1))
        with self.assertRaisesMessage(CheckpointFormatError, 'truncated'):
            decode_checkpoint(data[:-10])
        with self.assertRaises(CheckpointFormatError):
            decode_checkpoint(b'hello world')
        self.assertTrue(issubclass(CheckpointFormatError, ValidationError))

    def test_size_follows_layout(self):
        """Tests the blob section size against the per-primitive float count."""
        count, degree = 1000, 3
        data = encode_checkpoint(Checkpoint(GaussianSet.empty(count, degree)))
        line, _, rest = data.partition(b'\n')
        header_bytes = int(line.split(b' ')[2])
        floats = 3 + 1 + 1 + 3 + 3 + 4 + 1 + 3 * (degree + 1) ** 2
        self.assertEqual(len(rest) - header_bytes, count * floats * 4)

    def test_empty_set(self):
        """Tests a zero-primitive checkpoint."""
        loaded = decode_checkpoint(encode_checkpoint(Checkpoint(GaussianSet.empty(0, 1))))
        self.assertEqual(loaded.gaussians.count, 0)
        self.assertEqual(loaded.gaussians.sh_degree, 1)


class SyntheticSceneTests(SimpleTestCase):
    """Tests for the synthetic scene presets."""

    @classmethod
    def setUpClass(cls):
        """Generates one small scene per preset."""
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.scenes = {
            preset: generate_synthetic_scene(preset, 3, cls.root / preset, blobs=8, cameras=4, frames=3, size=24)
            for preset in ('static-blobs', 'moving-blobs', 'crossing-blobs')
        }

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_static_blobs_rest(self):
        """Tests zero velocities and the absence of masks."""
        result = self.scenes['static-blobs']
        assert_array_equal(result.ground_truth.velocity, 0.0)
        self.assertTrue(all(frame.mask is None for frame in result.scene.frames))

    def test_moving_blobs_travel(self):
        """Tests speeds and that every blob travels more than two radii."""
        gt = self.scenes['moving-blobs'].ground_truth
        speeds = np.linalg.norm(gt.velocity.astype(np.float64), axis=1)
        self.assertTrue(np.all((speeds >= SPEED_RANGE[0] - 1e-6) & (speeds <= SPEED_RANGE[1] + 1e-6)))
        travel = np.linalg.norm(gt.positions_at(1.0) - gt.positions_at(0.0), axis=1)
        self.assertTrue(np.all(travel > 2 * blob_radii(gt)))

    def test_crossing_blobs_meet(self):
        """Tests that blobs 0 and 1 are within one radius of each other at t = 0.5."""
        gt = self.scenes['crossing-blobs'].ground_truth
        positions = gt.positions_at(0.5)
        self.assertLessEqual(np.linalg.norm(positions[0] - positions[1]), blob_radii(gt)[:2].min())
        self.assertGreater(np.linalg.norm(gt.positions_at(0.0)[0] - gt.positions_at(0.0)[1]), blob_radii(gt)[:2].max())

    def test_rerender_is_bit_exact(self):
        """Tests that the saved ground truth reproduces every dataset image."""
        scene = self.scenes['moving-blobs'].scene
        ckpt = load_checkpoint(scene.path('ground_truth.ckpt'), np.float32)
        raster = RasterSettings.from_settings()
        for frame in scene.frames:
            out = render_forward(ckpt.gaussians, scene.camera(frame.camera_id), frame.time, scene.background, raster)
            assert_array_equal(quantize(out.rgb), scene.image(frame))

    def test_directory_contents(self):
        """Tests the split, the masks and the track file."""
        result = self.scenes['moving-blobs']
        scene = result.scene
        self.assertEqual(scene.split, {'train': ['cam0', 'cam1', 'cam2'], 'test': ['cam3']})
        self.assertEqual(len(scene.frames), 12)
        self.assertTrue(all(scene.path(frame.mask).is_file() for frame in scene.frames))
        tracks = read_tracks(scene.path(scene.correspondences))
        self.assertEqual(len(tracks), len(result.tracks))
        self.assertEqual(tracks.times, [0.0, 0.5, 1.0])

    def test_reproducible(self):
        """Tests that the same preset and seed write the same files."""
        again = self.root / 'again'
        generate_synthetic_scene('moving-blobs', 3, again, blobs=8, cameras=4, frames=3, size=24)
        first = self.root / 'moving-blobs'
        for name in ('scene.json', 'ground_truth.ckpt', 'tracks.txt', 'images/cam2_0001.png'):
            self.assertEqual((again / name).read_bytes(), (first / name).read_bytes(), name)

    def test_unknown_preset(self):
        """Tests that an unknown preset is rejected."""
        with self.assertRaises(ValueError):
            generate_synthetic_scene('spinning-blobs', 0, self.root / 'bad')


class SceneCommandTests(SimpleTestCase):
    """Tests for the synth and render management commands."""

    @classmethod
    def setUpClass(cls):
        """Generates a small scene through the synth command."""
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.scene_dir = cls.root / 'scene'
        call_command(
            'synth', '--preset', 'moving-blobs', '--seed', '1', '--out', str(cls.scene_dir),
            '--blobs', '6', '--cameras', '3', '--frames', '3', '--size', '20', stdout=StringIO(),
        )
        cls.checkpoint = str(cls.scene_dir / 'ground_truth.ckpt')

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def render(self, out, *extra):
        call_command('render', '--checkpoint', self.checkpoint, '--out', str(self.root / out), *extra,
                     stdout=StringIO())
        return self.root / out

    def test_synth_output(self):
        """Tests the generated directory."""
        scene = load_scene(self.scene_dir)
        self.assertEqual(len(scene.cameras), 3)
        self.assertEqual(len(scene.frames), 9)
        self.assertTrue((self.scene_dir / 'tracks.txt').is_file())

    def test_render_matches_dataset(self):
        """Tests that rendering the ground truth at a training view reproduces its image."""
        scene = load_scene(self.scene_dir)
        frame = scene.frames[4]
        out = self.render('cam.png', '--scene', str(self.scene_dir), '--camera', frame.camera_id,
                          '--time', repr(frame.time))
        assert_array_equal(read_image(out), scene.image(frame))

    def test_render_between_frames_and_inline_camera(self):
        """Tests continuous time and an inline JSON camera."""
        scene = load_scene(self.scene_dir)
        camera = json.dumps(scene.camera('cam0').to_dict())
        out = self.render('inline.png', '--camera-json', camera, '--time', '0.37')
        self.assertEqual(read_image(out).shape, (20, 20, 3))
        self.assertFalse(np.array_equal(read_image(out), scene.image(scene.frames[0])))

    def test_render_errors(self):
        """Tests the exit codes of bad render invocations."""
        with self.assertRaises(CommandError) as cm:
            self.render('x.png', '--scene', str(self.scene_dir), '--camera', 'ghost', '--time', '0.5')
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn("'ghost'", str(cm.exception))
        with self.assertRaises(CommandError) as cm:
            self.render('x.png', '--scene', str(self.scene_dir), '--camera', 'cam0', '--time', '1.5')
        self.assertEqual(cm.exception.returncode, 2)
        with self.assertRaises(CommandError) as cm:
            self.render('x.png', '--camera', 'cam0', '--time', '0.5')
        self.assertEqual(cm.exception.returncode, 1)
        with self.assertRaises(CommandError) as cm:
            self.render('x.png', '--camera-json', '{"id": "c", "fx": 0}', '--time', '0.5')
        self.assertEqual(cm.exception.returncode, 2)

    def test_command_line_exit_codes(self):
        """Tests that usage errors exit 1 and data errors exit 2 with one stderr line."""
        stderr = StringIO()
        with redirect_stderr(stderr), self.assertRaises(SystemExit) as cm:
            RenderCommand().run_from_argv(['manage.py', 'render', '--time', '0.5'])
        self.assertEqual(cm.exception.code, 1)

        stderr = StringIO()
        with redirect_stderr(stderr), self.assertRaises(SystemExit) as cm:
            RenderCommand().run_from_argv([
                'manage.py', 'render', '--checkpoint', str(self.root / 'missing.ckpt'),
                '--camera-json', json.dumps(load_scene(self.scene_dir).camera('cam0').to_dict()),
                '--time', '0.5', '--out', str(self.root / 'y.png'),
            ])
        self.assertEqual(cm.exception.code, 2)
        self.assertEqual(len(stderr.getvalue().strip().splitlines()), 1)
