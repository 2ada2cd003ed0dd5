"""Synthetic dynamic scenes with known ground truth.

Presets:

* ``static-blobs``: coloured anisotropic blobs at rest;
* ``moving-blobs``: the same blobs moving linearly at 0.25 to 0.5 scene units
  per unit time, so every blob travels more than two blob radii over the
  sequence (a blob's radius is its largest scale);
* ``crossing-blobs``: ``moving-blobs`` where blobs 0 and 1 pass within half a
  radius of each other at t = 0.5.

Cameras sit on a ring around the origin looking inward; the last camera is
held out as the test split. Frames are rendered with the project rasterizer
from the float32 ground truth, which is saved next to the images together
with a noise-free (or noisy) correspondence file.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.conf import settings

from gaussians.appearance import C0
from gaussians.primitives import GaussianSet, logit
from initfit.correspondences import synthesize_tracks, write_tracks
from rendering.cameras import Camera
from rendering.rasterizer import RasterSettings, render_forward

from .checkpoints import Checkpoint, save_checkpoint
from .images import write_image, write_mask
from .manifest import FrameObservation, SceneManifest, load_scene, write_scene


logger = logging.getLogger(__name__)

PRESETS = ('static-blobs', 'moving-blobs', 'crossing-blobs')
SCENE_HALF_SIZE = 1.0
SCALE_RANGE = (0.06, 0.1)
SPEED_RANGE = (0.25, 0.5)
BLOB_TIME = 0.5
BLOB_DURATION = 2.0
MASK_ALPHA = 0.05


@dataclass
class SyntheticScene:
    scene: SceneManifest
    ground_truth: GaussianSet
    tracks: object


def ring_cameras(count, size=64, radius=4.0, height=1.0, fov_scale=1.0):
    """Cameras evenly spaced on a horizontal ring, all looking at the origin."""
    cameras = []
    focal = fov_scale * size
    for i in range(count):
        angle = 2.0 * np.pi * i / count
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        cameras.append(Camera.look_at(f"cam{i}", eye, np.zeros(3), (0.0, 0.0, 1.0), focal, focal, size, size))
    return cameras


def blob_radii(gaussians):
    return gaussians.scales().max(axis=1)


def ground_truth_blobs(preset, rng, count=32, sh_degree=0):
    """Builds the float32 ground-truth set of a preset.

    Every blob is centred at t = 0.5 with duration 2, so its temporal opacity
    stays above 0.88 over the whole sequence.
    """
    if preset not in PRESETS:
        raise ValueError(f"Unknown preset '{preset}'; expected one of {', '.join(PRESETS)}.")
    gaussians = GaussianSet.empty(count, sh_degree, np.float64)
    gaussians.position_raw[:] = rng.uniform(-SCENE_HALF_SIZE, SCENE_HALF_SIZE, size=(count, 3))
    gaussians.time_raw[:] = BLOB_TIME
    gaussians.duration_raw[:] = np.log(BLOB_DURATION)
    gaussians.scale_raw[:] = np.log(rng.uniform(*SCALE_RANGE, size=(count, 3)))
    quaternions = rng.normal(size=(count, 4))
    gaussians.orientation_raw[:] = quaternions / np.linalg.norm(quaternions, axis=1, keepdims=True)
    gaussians.opacity_raw[:, 0] = logit(rng.uniform(0.7, 0.95, size=count))
    gaussians.sh_coeffs[:, :, 0] = rng.uniform(0.15, 0.95, size=(count, 3)) / C0

    if preset != 'static-blobs':
        directions = rng.normal(size=(count, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        gaussians.velocity[:] = directions * rng.uniform(*SPEED_RANGE, size=(count, 1))

    if preset == 'crossing-blobs' and count >= 2:
        offset = rng.normal(size=3)
        offset *= 0.5 * blob_radii(gaussians)[:2].min() / np.linalg.norm(offset)
        gaussians.position_raw[1] = gaussians.position_raw[0] + offset
        gaussians.velocity[1] = -gaussians.velocity[0]
    return gaussians.astype(np.float32)


def generate_synthetic_scene(preset, seed, out_dir, blobs=32, cameras=6, frames=10, size=64,
                             track_noise=0.0, raster=None):
    """Writes a complete synthetic scene directory.

    Args:
        preset: One of `PRESETS`.
        seed: Seed of every random choice.
        out_dir: Output directory.
        blobs: Ground-truth blob count.
        cameras: Ring camera count; the last one is the test split.
        frames: Frame times, evenly spaced over [0, 1].
        size: Square image size in pixels.
        track_noise: Pixel noise of the correspondence file.
        raster: `RasterSettings`; the project defaults when omitted.

    Returns:
        SyntheticScene: The loaded manifest, ground truth and tracks.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    raster = raster or RasterSettings.from_settings()
    dtype = np.dtype(settings.SPLAT_PRECISION)
    gaussians = ground_truth_blobs(preset, rng, blobs)
    render_set = gaussians.astype(dtype)
    moving = np.flatnonzero(np.any(gaussians.velocity != 0, axis=1))
    dynamic_set = GaussianSet(**{name: array[moving] for name, array in render_set.arrays()})
    rig = ring_cameras(cameras, size)
    times = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    background = np.zeros(3, dtype=dtype)

    observations = []
    for cam in rig:
        for i, t in enumerate(times):
            image = f"images/{cam.id}_{i:04d}.png"
            out = render_forward(render_set, cam, float(t), background, raster)
            write_image(out_dir / image, out.rgb)
            mask = None
            if moving.size:
                mask = f"masks/{cam.id}_{i:04d}.png"
                dynamic = render_forward(dynamic_set, cam, float(t), background, raster)
                write_mask(out_dir / mask, dynamic.alpha > MASK_ALPHA)
            observations.append(FrameObservation(cam.id, float(t), image, mask))

    points = {float(t): gaussians.astype(np.float64).positions_at(float(t)) for t in times}
    tracks = synthesize_tracks(points, rig, noise=track_noise, rng=rng)
    write_tracks(tracks, out_dir / 'tracks.txt')

    save_checkpoint(
        Checkpoint(gaussians, config={'synthetic': {'preset': preset, 'seed': seed, 'blobs': blobs}}),
        out_dir / 'ground_truth.ckpt',
    )
    manifest = SceneManifest(
        name=preset,
        root=out_dir,
        frame_count=len(times),
        fps=30.0,
        background=(0.0, 0.0, 0.0),
        cameras={cam.id: cam for cam in rig},
        frames=observations,
        correspondences='tracks.txt',
        split={'train': [cam.id for cam in rig[:-1]], 'test': [rig[-1].id]},
        bounds=[[-1.5 * SCENE_HALF_SIZE] * 3, [1.5 * SCENE_HALF_SIZE] * 3],
    )
    write_scene(manifest)
    logger.info("Wrote %s scene (seed %d): %d cameras, %d frames, %d tracks.",
                preset, seed, len(rig), len(times), len(tracks))
    return SyntheticScene(load_scene(out_dir), gaussians, tracks)
