"""View-dependent colour from real spherical harmonics.

Colour is ``sum_lm c_lm * Y_lm(d)`` per channel, with ``d`` the unit direction
from the camera centre to the primitive's moved centre, clamped at zero from
below only. The basis uses the hard-coded real SH polynomials (degree <= 3)
with the Condon-Shortley sign convention.
"""
import warnings
from typing import NamedTuple

import numpy as np
from django.core.exceptions import ValidationError


MAX_SH_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

FALLBACK_DIRECTION = np.array([0.0, 0.0, 1.0])


class DegenerateDirectionWarning(RuntimeWarning):
    """The camera centre coincides with the primitive; a fixed direction is used."""


class ShBasis(NamedTuple):
    degree: int
    values: np.ndarray


def check_sh_degree(degree):
    """Raises ValidationError unless ``degree`` is an integer in [0, 3]."""
    if int(degree) != degree or not 0 <= degree <= MAX_SH_DEGREE:
        raise ValidationError(f"SH degree must be an integer in [0, {MAX_SH_DEGREE}], got {degree}.")


def sh_coefficient_count(degree):
    check_sh_degree(degree)
    return (int(degree) + 1) ** 2


def sh_basis_values(dirs, degree):
    """Evaluates the real SH basis at unit directions.

    Args:
        dirs: (N, 3) unit directions.
        degree: SH degree L in [0, 3].

    Returns:
        np.ndarray: (N, (L + 1)^2) basis values in (l, m) order.
    """
    count = sh_coefficient_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], count), dtype=dirs.dtype)
    out[:, 0] = C0
    if degree > 0:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree > 2:
        out[:, 9] = C3[0] * y * (3 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(dirs, degree):
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z).

    Returns:
        np.ndarray: (N, (L + 1)^2, 3).
    """
    count = sh_coefficient_count(degree)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac = np.zeros((dirs.shape[0], count, 3), dtype=dirs.dtype)
    if degree > 0:
        jac[:, 1, 1] = -C1
        jac[:, 2, 2] = C1
        jac[:, 3, 0] = -C1
    if degree > 1:
        jac[:, 4] = C2[0] * np.stack([y, x, 0 * x], axis=1)
        jac[:, 5] = C2[1] * np.stack([0 * x, z, y], axis=1)
        jac[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
        jac[:, 7] = C2[3] * np.stack([z, 0 * x, x], axis=1)
        jac[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], axis=1)
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        jac[:, 9] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * x], axis=1)
        jac[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        jac[:, 11] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1)
        jac[:, 12] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1)
        jac[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1)
        jac[:, 14] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
        jac[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * x], axis=1)
    return jac


def unit_direction(offset):
    """Normalises one direction; a zero vector warns and falls back to (0, 0, 1)."""
    offset = np.asarray(offset, dtype=float)
    norm = np.linalg.norm(offset)
    if norm == 0:
        warnings.warn(
            "Zero-length view direction (camera centre on the primitive); using direction (0, 0, 1).",
            DegenerateDirectionWarning,
        )
        return FALLBACK_DIRECTION
    return offset / norm


def sh_basis(d, degree):
    """Real SH basis at one direction.

    Non-unit directions are normalised before evaluation; a zero vector uses
    the fallback direction with a `DegenerateDirectionWarning`.

    Args:
        d: 3-vector direction.
        degree: SH degree L in [0, 3].

    Returns:
        ShBasis: The degree and its (L + 1)^2 values.
    """
    return ShBasis(int(degree), sh_basis_values(unit_direction(d)[None], degree)[0])


def eval_color(g, camera_center, t, degree):
    """Colour of one activated primitive seen from ``camera_center`` at ``t``.

    Args:
        g: `ActivatedGaussianView`.
        camera_center: 3-vector camera centre in world space.
        t: Normalized time.
        degree: SH degree used for evaluation.

    Returns:
        np.ndarray: RGB 3-vector, clamped at zero from below.
    """
    moved = g.position + g.velocity * (t - g.time)
    direction = unit_direction(moved - np.asarray(camera_center, dtype=float))
    basis = sh_basis_values(direction[None], degree)[0]
    coeffs = g.sh_coeffs[:, :basis.shape[0]]
    return np.maximum(coeffs @ basis, 0.0)


class ColorEval(NamedTuple):
    """Batched colour evaluation and the intermediates its VJP needs."""
    colors: np.ndarray     # (N, 3) clamped
    raw: np.ndarray        # (N, 3) before the clamp
    dirs: np.ndarray       # (N, 3)
    distances: np.ndarray  # (N,)
    basis: np.ndarray      # (N, K)


def eval_colors(positions, camera_center, sh_coeffs, degree):
    """Colours of every primitive seen from one camera centre.

    Args:
        positions: (N, 3) moved centres.
        camera_center: (3,) camera centre.
        sh_coeffs: (N, 3, K) coefficients; only the first (degree + 1)^2 are used.
        degree: Evaluation degree.

    Returns:
        ColorEval: Colours and intermediates.
    """
    offset = positions - camera_center
    distances = np.linalg.norm(offset, axis=1)
    degenerate = distances == 0
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} primitive(s) coincide with the camera centre.",
            DegenerateDirectionWarning,
        )
        distances = np.where(degenerate, 1.0, distances)
        offset = np.where(degenerate[:, None], FALLBACK_DIRECTION, offset)
    dirs = offset / distances[:, None]
    basis = sh_basis_values(dirs, degree)
    raw = np.einsum('nck,nk->nc', sh_coeffs[:, :, :basis.shape[1]], basis)
    return ColorEval(np.maximum(raw, 0.0), raw, dirs, distances, basis)


def colors_vjp(evaluation, sh_coeffs, degree, d_colors):
    """Pulls colour gradients back to the SH coefficients and moved centres.

    Args:
        evaluation: The `ColorEval` from the forward pass.
        sh_coeffs: (N, 3, K) coefficients.
        degree: Evaluation degree.
        d_colors: (N, 3) gradient w.r.t. the clamped colours.

    Returns:
        tuple: ``(d_sh_coeffs (N, 3, K), d_positions (N, 3))``.
    """
    d_raw = d_colors * (evaluation.raw > 0)
    k = evaluation.basis.shape[1]
    d_sh = np.zeros_like(sh_coeffs)
    d_sh[:, :, :k] = d_raw[:, :, None] * evaluation.basis[:, None, :]
    if degree == 0:
        return d_sh, np.zeros_like(evaluation.dirs)
    d_basis = np.einsum('nc,nck->nk', d_raw, sh_coeffs[:, :, :k])
    d_dirs = np.einsum('nk,nkj->nj', d_basis, sh_basis_jacobian(evaluation.dirs, degree))
    radial = np.sum(d_dirs * evaluation.dirs, axis=1, keepdims=True)
    d_positions = (d_dirs - evaluation.dirs * radial) / evaluation.distances[:, None]
    return d_sh, d_positions
