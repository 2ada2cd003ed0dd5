"""EWA projection of 3D Gaussians into screen-space Gaussians.

The perspective map is linearised at each primitive's camera-space centre,
giving ``cov2d = J W cov3d W^T J^T + dilation * I``. The dilation is a
low-pass filter that bounds the smallest screen-space eigenvalue.
"""
from typing import NamedTuple

import numpy as np

from gaussians.primitives import covariance, covariance_vjp, motion_position


DEFAULT_NEAR = 0.01
DEFAULT_DILATION = 0.3


class ProjectedPoint(NamedTuple):
    pixel: np.ndarray
    depth: float
    valid: bool


class SplatProjection(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    valid: bool


def project_point(cam, p_world, near=DEFAULT_NEAR):
    """Projects a world point to pixel coordinates.

    Points at or behind the near plane are returned with ``valid=False``.

    Args:
        cam: `Camera`.
        p_world: (3,) world point.
        near: Near-plane depth.

    Returns:
        ProjectedPoint: Pixel coordinates, camera-space depth and validity.
    """
    x, y, z = cam.rotation @ np.asarray(p_world, dtype=float) + cam.translation
    if z <= near:
        return ProjectedPoint(np.array([np.nan, np.nan]), float(z), False)
    pixel = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return ProjectedPoint(pixel, float(z), True)


def projection_jacobian(cam, p_cam, near=DEFAULT_NEAR):
    """Jacobian of the pixel coordinates w.r.t. a camera-space point.

    Returns:
        np.ndarray or None: The (2, 3) Jacobian, or None when the point is at
        or behind the near plane.
    """
    x, y, z = p_cam
    if z <= near:
        return None
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def project_covariance(cam, g, t, near=DEFAULT_NEAR, dilation=DEFAULT_DILATION):
    """Projects one activated primitive at time ``t`` to screen space.

    Returns:
        SplatProjection: Screen mean, dilated 2D covariance, depth, validity.
    """
    moved = motion_position(g, t)
    p_cam = cam.rotation @ moved + cam.translation
    jac = projection_jacobian(cam, p_cam, near)
    if jac is None:
        return SplatProjection(np.array([np.nan, np.nan]), np.full((2, 2), np.nan), float(p_cam[2]), False)
    t_mat = jac @ cam.rotation
    cov2d = t_mat @ covariance(g) @ t_mat.T + dilation * np.eye(2)
    mean2d = np.array([
        cam.fx * p_cam[0] / p_cam[2] + cam.cx,
        cam.fy * p_cam[1] / p_cam[2] + cam.cy,
    ])
    return SplatProjection(mean2d, cov2d, float(p_cam[2]), True)


class ProjectedSplats(NamedTuple):
    """Batched projection of a whole set, with what the VJP needs.

    Invalid (behind-camera) rows hold finite placeholder values.
    """
    moved: np.ndarray      # (N, 3) mu_x(t)
    p_cam: np.ndarray      # (N, 3)
    depth: np.ndarray      # (N,)
    valid: np.ndarray      # (N,) bool
    mean2d: np.ndarray     # (N, 2)
    cov3d: np.ndarray      # (N, 3, 3)
    t_mat: np.ndarray      # (N, 2, 3) J W
    cov2d: np.ndarray      # (N, 2, 2)
    conic: np.ndarray      # (N, 3) inverse cov2d as (a, b, c)
    radius: np.ndarray     # (N,) 3-sigma bound in pixels
    scales: np.ndarray     # (N, 3)


def project_gaussians(gaussians, cam, t, near=DEFAULT_NEAR, dilation=DEFAULT_DILATION):
    """Projects every primitive of a `GaussianSet` at time ``t``.

    Returns:
        ProjectedSplats: Screen-space splats and intermediates.
    """
    dtype = gaussians.dtype
    rot = cam.rotation.astype(dtype)
    moved = gaussians.positions_at(t)
    p_cam = moved @ rot.T + cam.translation.astype(dtype)
    depth = p_cam[:, 2]
    valid = depth > near
    z = np.where(valid, depth, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    count = gaussians.count

    jac = np.zeros((count, 2, 3), dtype=dtype)
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    t_mat = jac @ rot

    scales = gaussians.scales()
    cov3d = gaussians.covariances()
    cov2d = t_mat @ cov3d @ np.swapaxes(t_mat, 1, 2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1], -cov2d[:, 0, 1], cov2d[:, 0, 0]], axis=1) / det[:, None]

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.where(valid, np.ceil(3.0 * np.sqrt(lambda_max)), 0.0)

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    return ProjectedSplats(moved, p_cam, depth, valid, mean2d, cov3d, t_mat, cov2d, conic, radius, scales)


def projection_vjp(gaussians, cam, proj, d_mean2d, d_conic):
    """Pulls screen-space gradients back through the projection.

    Args:
        gaussians: The `GaussianSet` that was projected.
        cam: `Camera`.
        proj: `ProjectedSplats` from the forward pass.
        d_mean2d: (N, 2) gradient w.r.t. the screen means.
        d_conic: (N, 3) gradient w.r.t. the conic entries (a, b, c), where b
            is the off-diagonal value that appears twice in the quadratic form.

    Returns:
        tuple: ``(d_moved, d_scale_raw, d_orientation_raw)``.
    """
    dtype = gaussians.dtype
    rot = cam.rotation.astype(dtype)
    z = np.where(proj.valid, proj.p_cam[:, 2], 1.0)
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    fx, fy = cam.fx, cam.fy

    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic = np.stack([np.stack([a, b], 1), np.stack([b, c], 1)], 1)
    g_conic = np.stack([
        np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], 1),
        np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], 1),
    ], 1)
    d_cov2d = -conic @ g_conic @ conic

    t_mat = proj.t_mat
    d_cov3d = np.swapaxes(t_mat, 1, 2) @ d_cov2d @ t_mat
    d_t = 2.0 * d_cov2d @ t_mat @ proj.cov3d
    d_jac = d_t @ rot.T

    z2, z3 = z * z, z * z * z
    d_pcam = np.zeros_like(proj.p_cam)
    d_pcam[:, 0] = d_jac[:, 0, 2] * (-fx / z2)
    d_pcam[:, 1] = d_jac[:, 1, 2] * (-fy / z2)
    d_pcam[:, 2] = (d_jac[:, 0, 0] * (-fx / z2) + d_jac[:, 0, 2] * (2 * fx * x / z3)
                    + d_jac[:, 1, 1] * (-fy / z2) + d_jac[:, 1, 2] * (2 * fy * y / z3))

    d_pcam[:, 0] += d_mean2d[:, 0] * fx / z
    d_pcam[:, 1] += d_mean2d[:, 1] * fy / z
    d_pcam[:, 2] += -d_mean2d[:, 0] * fx * x / z2 - d_mean2d[:, 1] * fy * y / z2

    mask = proj.valid[:, None]
    d_moved = np.where(mask, d_pcam @ rot, 0.0)
    d_scale, d_orient = covariance_vjp(proj.scales, gaussians.orientation_raw, d_cov3d)
    return d_moved, np.where(mask, d_scale, 0.0), np.where(mask, d_orient, 0.0)
