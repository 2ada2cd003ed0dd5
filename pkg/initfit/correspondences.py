"""Correspondence track files.

One track per line, whitespace separated::

    <time> <camera id> <u> <v> <camera id> <u> <v> ...

``time`` is the normalized frame time and every ``(camera id, u, v)`` triple
is one observation of the same 3D point. Blank lines and lines starting with
``#`` are ignored.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from django.core.exceptions import ValidationError

from rendering.projection import DEFAULT_NEAR


logger = logging.getLogger(__name__)


class Observation(NamedTuple):
    camera_id: str
    pixel: np.ndarray


@dataclass
class CorrespondenceSet:
    """Tracks grouped by frame time.

    Attributes:
        tracks: Frame time -> list of tracks; a track is a list of
            `Observation` with at least two entries.
        source: File the tracks were read from, if any.
    """
    tracks: dict = field(default_factory=lambda: defaultdict(list))
    source: str = ''

    @property
    def times(self):
        return sorted(self.tracks)

    def __len__(self):
        return sum(len(tracks) for tracks in self.tracks.values())

    def add(self, time, track):
        if len(track) < 2:
            raise ValidationError(f"Track at t={time} has {len(track)} view(s); at least 2 are required.")
        self.tracks[float(time)].append(list(track))

    def check(self, camera_ids):
        """Raises ValidationError when a track references an undeclared camera."""
        known = set(camera_ids)
        for time, tracks in self.tracks.items():
            for track in tracks:
                for obs in track:
                    if obs.camera_id not in known:
                        raise ValidationError(
                            f"Track at t={time} references unknown camera '{obs.camera_id}'."
                        )


def parse_tracks(text, source=''):
    """Parses the track file format.

    Raises:
        ValidationError: With the line number, for malformed lines.
    """
    result = CorrespondenceSet(source=source)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        if (len(parts) - 1) % 3 != 0:
            raise ValidationError(f"{source or 'tracks'}:{lineno}: expected 'time' then (camera u v) triples.")
        try:
            time = float(parts[0])
            track = [
                Observation(parts[i], np.array([float(parts[i + 1]), float(parts[i + 2])]))
                for i in range(1, len(parts), 3)
            ]
        except ValueError as exc:
            raise ValidationError(f"{source or 'tracks'}:{lineno}: {exc}")
        try:
            result.add(time, track)
        except ValidationError as exc:
            raise ValidationError(f"{source or 'tracks'}:{lineno}: {exc.message}")
    return result


def read_tracks(path):
    path = Path(path)
    return parse_tracks(path.read_text(), source=str(path))


def format_tracks(correspondences):
    lines = []
    for time in correspondences.times:
        for track in correspondences.tracks[time]:
            cells = [repr(float(time))]
            for obs in track:
                cells += [obs.camera_id, repr(float(obs.pixel[0])), repr(float(obs.pixel[1]))]
            lines.append(' '.join(cells))
    return '\n'.join(lines) + '\n'


def write_tracks(correspondences, path):
    Path(path).write_text(format_tracks(correspondences))


def synthesize_tracks(points_by_time, cameras, noise=0.0, rng=None, near=DEFAULT_NEAR):
    """Projects known 3D points into every camera to build tracks.

    Args:
        points_by_time: Frame time -> (N, 3) world points.
        cameras: Iterable of `Camera`.
        noise: Pixel noise standard deviation.
        rng: ``numpy.random.Generator``; required when ``noise > 0``.
        near: Near-plane depth.

    Returns:
        CorrespondenceSet: One track per point seen inside at least two images.
    """
    cameras = list(cameras)
    result = CorrespondenceSet()
    for time, points in sorted(points_by_time.items()):
        points = np.asarray(points, dtype=np.float64)
        views = []
        for cam in cameras:
            p_cam = cam.world_to_camera(points)
            z = np.where(p_cam[:, 2] > near, p_cam[:, 2], 1.0)
            pixels = np.stack([cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy], axis=1)
            if noise > 0:
                pixels = pixels + rng.normal(scale=noise, size=pixels.shape)
            inside = (
                (p_cam[:, 2] > near)
                & (pixels[:, 0] >= -0.5) & (pixels[:, 0] <= cam.width - 0.5)
                & (pixels[:, 1] >= -0.5) & (pixels[:, 1] <= cam.height - 0.5)
            )
            views.append((cam.id, pixels, inside))
        for i in range(points.shape[0]):
            track = [Observation(cam_id, pixels[i]) for cam_id, pixels, inside in views if inside[i]]
            if len(track) >= 2:
                result.add(time, track)
    logger.debug("Synthesized %d tracks over %d frames.", len(result), len(points_by_time))
    return result
