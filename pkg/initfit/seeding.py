"""Seed clouds and initial primitive sets.

Every frame time with tracks contributes its triangulated points. Each point
becomes one primitive centred at the point and the frame time, moving with
its nearest-neighbour velocity, with an isotropic scale equal to the mean
distance to its three nearest same-frame neighbours, an identity orientation,
opacity 0.1 and a DC colour from the observing images (mid-gray without
images).
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from gaussians.appearance import C0
from gaussians.primitives import GaussianSet, logit
from splatsystem.exceptions import EmptySeedCloudError

from .triangulation import MAX_RMS, triangulate_frame
from .velocity import CUTOFF_FACTOR, KNN_K, knn_velocity


logger = logging.getLogger(__name__)

MAX_POINTS_PER_FRAME = 20000
SEED_OPACITY = 0.1
DEFAULT_COLOR = 0.5
SCALE_NEIGHBOURS = 3
FALLBACK_SCALE = 0.01
MIN_SCALE = 1e-6


@dataclass
class SeedFrame:
    points: np.ndarray                 # (N, 3)
    velocities: np.ndarray             # (N, 3)
    colors: np.ndarray = None          # (N, 3) or None


@dataclass
class SeedCloud:
    """Per-frame seed points keyed by normalized frame time."""
    frames: dict = field(default_factory=dict)

    @property
    def times(self):
        return sorted(self.frames)

    @property
    def total_points(self):
        return sum(frame.points.shape[0] for frame in self.frames.values())


def frame_interval(frame_times):
    """Median spacing of the distinct frame times; 1.0 for a single frame."""
    times = np.unique(np.asarray(frame_times, dtype=np.float64))
    if times.size < 2:
        return 1.0
    return float(np.median(np.diff(times)))


def _stride_subsample(count, cap):
    stride = -(-count // cap) if count > cap else 1
    return np.arange(0, count, stride)


def _track_color(track, image_lookup, time):
    samples = []
    for obs in track:
        image = image_lookup(obs.camera_id, time)
        if image is None:
            continue
        col = int(np.clip(np.rint(obs.pixel[0]), 0, image.shape[1] - 1))
        row = int(np.clip(np.rint(obs.pixel[1]), 0, image.shape[0] - 1))
        samples.append(image[row, col, :3])
    return np.mean(samples, axis=0) if samples else None


def compute_velocities(cloud, k=KNN_K, cutoff_factor=CUTOFF_FACTOR):
    """Fills every frame's velocities from its successor frame.

    The last frame looks back at its predecessor and reverses the result; a
    single frame gets zero velocity.
    """
    times = cloud.times
    for i, time in enumerate(times):
        frame = cloud.frames[time]
        if i + 1 < len(times):
            nxt = times[i + 1]
            frame.velocities = knn_velocity(frame.points, cloud.frames[nxt].points, nxt - time, k, cutoff_factor)
        elif i > 0:
            prev = times[i - 1]
            frame.velocities = -knn_velocity(frame.points, cloud.frames[prev].points, time - prev, k, cutoff_factor)
        else:
            frame.velocities = np.zeros_like(frame.points)
    return cloud


def build_seed_cloud(correspondences, cameras, image_lookup=None, max_points=MAX_POINTS_PER_FRAME,
                     max_rms=MAX_RMS, k=KNN_K, cutoff_factor=CUTOFF_FACTOR):
    """Triangulates the tracks of every frame and estimates velocities.

    Args:
        correspondences: `CorrespondenceSet`.
        cameras: Camera id -> `Camera`.
        image_lookup: Optional ``lookup(camera_id, time)`` returning an
            (H, W, 3) image or None; used to colour the points.
        max_points: Per-frame density cap, applied by stride subsampling.
        max_rms: Reprojection rejection threshold in pixels.
        k: Neighbours per velocity estimate.
        cutoff_factor: Velocity mismatch cutoff factor.

    Returns:
        SeedCloud: Points, velocities and (when images are given) colours.
    """
    correspondences.check(cameras)
    cloud = SeedCloud()
    for time in correspondences.times:
        tracks = correspondences.tracks[time]
        points, kept = triangulate_frame(tracks, cameras, max_rms)
        if points.shape[0] == 0:
            continue
        chosen = _stride_subsample(points.shape[0], max_points)
        points = points[chosen]
        colors = None
        if image_lookup is not None:
            found = [_track_color(tracks[kept[i]], image_lookup, time) for i in chosen]
            colors = np.array([np.full(3, DEFAULT_COLOR) if c is None else c for c in found]).reshape(-1, 3)
        cloud.frames[time] = SeedFrame(points, np.zeros_like(points), colors)
        logger.info("Frame t=%.4f: %d of %d tracks seeded.", time, points.shape[0], len(tracks))
    return compute_velocities(cloud, k, cutoff_factor)


def _isotropic_scales(points):
    count = points.shape[0]
    if count < 2:
        return np.full(count, FALLBACK_SCALE)
    k = min(SCALE_NEIGHBOURS, count - 1)
    distances, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(distances[:, 1:].mean(axis=1), MIN_SCALE)


def seed_primitives(cloud, frame_times, sh_degree=0, dtype=np.float32, zero_velocity=False):
    """Turns a seed cloud into the initial `GaussianSet`.

    Args:
        cloud: `SeedCloud`.
        frame_times: Every frame time of the scene; sets the duration.
        sh_degree: SH degree of the new set; only the DC term is non-zero.
        dtype: Floating dtype of the set.
        zero_velocity: Seed every primitive at rest, keeping the space-time
            placement but discarding the estimated motion.

    Returns:
        GaussianSet: One primitive per seed point.

    Raises:
        EmptySeedCloudError: If the cloud holds no points at all.
    """
    if cloud.total_points == 0:
        raise EmptySeedCloudError(
            "No seed points to initialize from; use random_primitives for a random start."
        )
    duration = 2.0 * frame_interval(frame_times)
    parts = []
    for time in cloud.times:
        frame = cloud.frames[time]
        count = frame.points.shape[0]
        part = GaussianSet.empty(count, sh_degree, np.float64)
        part.position_raw[:] = frame.points
        part.time_raw[:] = time
        part.duration_raw[:] = np.log(duration)
        if not zero_velocity:
            part.velocity[:] = frame.velocities
        part.scale_raw[:] = np.log(_isotropic_scales(frame.points))[:, None]
        part.opacity_raw[:] = logit(SEED_OPACITY)
        colors = frame.colors if frame.colors is not None else np.full((count, 3), DEFAULT_COLOR)
        part.sh_coeffs[:, :, 0] = colors / C0
        parts.append(part)
    return concatenate(parts).astype(dtype)


def concatenate(parts):
    """Stacks several sets of the same SH degree into one."""
    first = parts[0]
    return GaussianSet(**{
        name: np.concatenate([getattr(part, name) for part in parts], axis=0)
        for name, _ in first.arrays()
    })


def random_primitives(count, bounds_min, bounds_max, frame_times, sh_degree=0, seed=0, dtype=np.float32):
    """Random initialization: uniform in the box and the time range, at rest.

    Args:
        count: Number of primitives.
        bounds_min: (3,) lower corner of the scene box.
        bounds_max: (3,) upper corner.
        frame_times: Frame times; centre times are drawn over their range.
        sh_degree: SH degree of the new set.
        seed: Seed of the generator.
        dtype: Floating dtype of the set.

    Returns:
        GaussianSet: The random set.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds_min, dtype=np.float64), np.asarray(bounds_max, dtype=np.float64)
    times = np.asarray(frame_times, dtype=np.float64)
    gaussians = GaussianSet.empty(count, sh_degree, np.float64)
    gaussians.position_raw[:] = rng.uniform(lo, hi, size=(count, 3))
    gaussians.time_raw[:, 0] = rng.uniform(times.min(), times.max(), size=count)
    gaussians.duration_raw[:] = np.log(2.0 * frame_interval(times))
    spacing = float(np.prod(hi - lo) / max(count, 1)) ** (1.0 / 3.0)
    gaussians.scale_raw[:] = np.log(max(0.5 * spacing, MIN_SCALE))
    gaussians.opacity_raw[:] = logit(SEED_OPACITY)
    gaussians.sh_coeffs[:, :, 0] = rng.uniform(0.0, 1.0, size=(count, 3)) / C0
    return gaussians.astype(dtype)
