"""Linear (DLT) triangulation of multi-view tracks."""
import logging
from typing import NamedTuple, Optional

import numpy as np

from rendering.projection import DEFAULT_NEAR


logger = logging.getLogger(__name__)

MAX_RMS = 2.0
DEGENERATE_RATIO = 1e-8


class Triangulation(NamedTuple):
    """Outcome of triangulating one track.

    ``reason`` is empty for accepted points and otherwise one of
    ``'degenerate'``, ``'behind camera'`` or ``'reprojection'``.
    """
    point: Optional[np.ndarray]
    rms: float
    accepted: bool
    reason: str = ''


def reprojection_rms(point, track, cameras):
    """RMS pixel distance between a point's projections and the observations."""
    errors = []
    for obs in track:
        cam = cameras[obs.camera_id]
        x, y, z = cam.world_to_camera(point[None])[0]
        pixel = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        errors.append(np.sum((pixel - obs.pixel) ** 2))
    return float(np.sqrt(np.mean(errors)))


def triangulate(track, cameras, max_rms=MAX_RMS, near=DEFAULT_NEAR):
    """Triangulates one track by direct linear transform.

    Each observation contributes the rows ``u P3 - P1`` and ``v P3 - P2`` of
    its camera's projection matrix, normalised to unit length. The point is
    the right singular vector of the smallest singular value.

    Args:
        track: List of `Observation` with at least two views.
        cameras: Camera id -> `Camera`.
        max_rms: Rejection threshold on the RMS reprojection error in pixels.
        near: Points at or closer than this depth to any view are rejected.

    Returns:
        Triangulation: The point, its RMS error and whether it was accepted.
    """
    rows = []
    for obs in track:
        proj = cameras[obs.camera_id].projection_matrix()
        u, v = obs.pixel
        rows.append(u * proj[2] - proj[0])
        rows.append(v * proj[2] - proj[1])
    a = np.array(rows)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    _, s, vt = np.linalg.svd(a)
    if s[-2] / s[0] < DEGENERATE_RATIO or abs(vt[-1, 3]) < DEGENERATE_RATIO * np.linalg.norm(vt[-1]):
        return Triangulation(None, float('inf'), False, 'degenerate')
    point = vt[-1, :3] / vt[-1, 3]

    depths = [cameras[obs.camera_id].world_to_camera(point[None])[0, 2] for obs in track]
    if min(depths) <= near:
        return Triangulation(point, float('inf'), False, 'behind camera')
    rms = reprojection_rms(point, track, cameras)
    if rms > max_rms:
        return Triangulation(point, rms, False, 'reprojection')
    return Triangulation(point, rms, True)


def triangulate_frame(tracks, cameras, max_rms=MAX_RMS):
    """Triangulates every track of one frame.

    Returns:
        tuple: ``(points (M, 3), kept track indices)`` for the accepted tracks.
    """
    points, kept = [], []
    rejected = {}
    for index, track in enumerate(tracks):
        result = triangulate(track, cameras, max_rms)
        if result.accepted:
            points.append(result.point)
            kept.append(index)
        else:
            rejected[result.reason] = rejected.get(result.reason, 0) + 1
    if rejected:
        logger.info("Rejected tracks: %s", ', '.join(f"{k}={v}" for k, v in sorted(rejected.items())))
    return np.array(points, dtype=np.float64).reshape(-1, 3), kept
