"""Nearest-neighbour velocity estimation between consecutive point clouds."""
import logging

import numpy as np
from scipy.spatial import cKDTree


logger = logging.getLogger(__name__)

KNN_K = 1
CUTOFF_FACTOR = 3.0


def point_spacing(points):
    """Median distance from each point to its nearest neighbour in the same cloud; 0 below two points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] < 2:
        return 0.0
    distances, _ = cKDTree(points).query(points, k=2)
    return float(np.median(distances[:, 1]))


def knn_velocity(points_t, points_next, dt, k=KNN_K, cutoff_factor=CUTOFF_FACTOR):
    """Velocity of each point from its nearest neighbours in the next frame.

    Args:
        points_t: (N, 3) cloud at time t.
        points_next: (M, 3) cloud at time t + dt.
        dt: Positive normalized time step.
        k: Neighbours averaged per point.
        cutoff_factor: Matches farther than this times the cloud's point
            spacing (or the median match distance, when larger) are treated
            as mismatches and get zero velocity.

    Returns:
        np.ndarray: (N, 3) velocities.
    """
    if dt <= 0:
        raise ValueError(f"Time step must be positive, got {dt}.")
    if k < 1:
        raise ValueError(f"Neighbour count must be at least 1, got {k}.")
    points_t = np.asarray(points_t, dtype=np.float64).reshape(-1, 3)
    points_next = np.asarray(points_next, dtype=np.float64).reshape(-1, 3)
    velocities = np.zeros_like(points_t)
    if points_t.shape[0] == 0:
        return velocities
    if points_next.shape[0] == 0:
        logger.warning("Next point cloud is empty; %d velocities set to zero.", points_t.shape[0])
        return velocities

    k = min(k, points_next.shape[0])
    distances, indices = cKDTree(points_next).query(points_t, k=k)
    if k == 1:
        distances, indices = distances[:, None], indices[:, None]
    targets = points_next[indices].mean(axis=1)
    match = distances.mean(axis=1)
    # Match distances alone collapse to the noise floor when most points are static.
    cutoff = cutoff_factor * max(point_spacing(points_t), float(np.median(match)))
    keep = match <= cutoff
    velocities[keep] = (targets[keep] - points_t[keep]) / dt
    return velocities
