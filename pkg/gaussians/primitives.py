"""Space-time Gaussian primitives.

A primitive owns a position, a centre time, a duration, a linear velocity, an
anisotropic scale, an orientation, an opacity and SH colour coefficients. The
set stores the raw (pre-activation) values as a structure of arrays:

* scale and duration live in the log domain (``exp`` activation);
* opacity is a logit (``sigmoid`` activation);
* orientation is an unnormalised ``(w, x, y, z)`` quaternion.

The batched helpers at the bottom of the module are what the rasterizer uses;
the per-primitive operations (`activate`, `motion_position`, ...) evaluate a
single primitive and are the reference the batched code is tested against.
"""
from dataclasses import dataclass, field

import numpy as np

from splatsystem.exceptions import DegenerateQuaternionError

from .appearance import sh_coefficient_count


FIELDS = (
    'position_raw',
    'time_raw',
    'duration_raw',
    'velocity',
    'scale_raw',
    'orientation_raw',
    'opacity_raw',
    'sh_coeffs',
)


def field_shape(name, count, sh_degree):
    """Returns the array shape of a raw field for ``count`` primitives.

    Args:
        name: One of `FIELDS`.
        count: Number of primitives.
        sh_degree: Spherical-harmonics degree L.

    Returns:
        tuple: The shape of the field's array.
    """
    trailing = {
        'position_raw': (3,),
        'time_raw': (1,),
        'duration_raw': (1,),
        'velocity': (3,),
        'scale_raw': (3,),
        'orientation_raw': (4,),
        'opacity_raw': (1,),
        'sh_coeffs': (3, sh_coefficient_count(sh_degree)),
    }
    return (count,) + trailing[name]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for N space-time Gaussian primitives.

    Attributes:
        position_raw: (N, 3) centre position at the primitive's own time.
        time_raw: (N, 1) centre time, nominally in [0, 1].
        duration_raw: (N, 1) log of the temporal standard deviation.
        velocity: (N, 3) scene units per unit normalized time.
        scale_raw: (N, 3) log of the per-axis scale.
        orientation_raw: (N, 4) unnormalised (w, x, y, z) quaternion.
        opacity_raw: (N, 1) opacity logit.
        sh_coeffs: (N, 3, (L + 1)^2) SH coefficients per colour channel.
        version: Mutation counter; bumped by the optimizer and relocation so
            a render output can tell whether it still matches the set.
    """
    position_raw: np.ndarray
    time_raw: np.ndarray
    duration_raw: np.ndarray
    velocity: np.ndarray
    scale_raw: np.ndarray
    orientation_raw: np.ndarray
    opacity_raw: np.ndarray
    sh_coeffs: np.ndarray
    version: int = field(default=0, compare=False)

    @classmethod
    def empty(cls, count=0, sh_degree=0, dtype=np.float32):
        """Creates a set of ``count`` primitives with all raw values zero
        except an identity orientation."""
        arrays = {
            name: np.zeros(field_shape(name, count, sh_degree), dtype=dtype)
            for name in FIELDS
        }
        arrays['orientation_raw'][:, 0] = 1.0
        return cls(**arrays)

    @property
    def count(self):
        return self.position_raw.shape[0]

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh_coeffs.shape[2]))) - 1

    @property
    def dtype(self):
        return self.position_raw.dtype

    def arrays(self):
        """Yields ``(name, array)`` for every raw field in `FIELDS` order."""
        for name in FIELDS:
            yield name, getattr(self, name)

    def check(self):
        """Validates that every field has the shape implied by the count.

        Raises:
            ValueError: If a field's shape disagrees with the set's count or
                SH degree.
        """
        count, degree = self.count, self.sh_degree
        for name, array in self.arrays():
            expected = field_shape(name, count, degree)
            if array.shape != expected:
                raise ValueError(
                    f"Field '{name}' has shape {array.shape}, expected {expected}."
                )

    def copy(self):
        return GaussianSet(
            **{name: array.copy() for name, array in self.arrays()},
            version=self.version,
        )

    def astype(self, dtype):
        return GaussianSet(
            **{name: array.astype(dtype) for name, array in self.arrays()},
            version=self.version,
        )

    def touch(self):
        """Marks the set as mutated."""
        self.version += 1

    # Activated views over the whole set.

    def times(self):
        return self.time_raw[:, 0]

    def durations(self):
        return np.exp(self.duration_raw[:, 0])

    def scales(self):
        return np.exp(self.scale_raw)

    def opacities(self):
        return sigmoid(self.opacity_raw[:, 0])

    def unit_quaternions(self):
        """Returns the normalised orientation quaternions.

        Raises:
            DegenerateQuaternionError: For the first zero-norm quaternion.
        """
        norms = np.linalg.norm(self.orientation_raw, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise DegenerateQuaternionError(int(bad[0]))
        return self.orientation_raw / norms[:, None]

    def rotations(self):
        return quaternion_to_rotation(self.unit_quaternions())

    def positions_at(self, t):
        """Moved centres mu_x(t) = mu_x + v * (t - mu_t) for every primitive."""
        return self.position_raw + self.velocity * (t - self.time_raw)

    def temporal_opacities(self, t):
        z = (t - self.times()) / self.durations()
        return np.exp(-0.5 * z * z)

    def covariances(self):
        m = self.rotations() * self.scales()[:, None, :]
        return m @ np.swapaxes(m, 1, 2)


@dataclass(frozen=True)
class ActivatedGaussianView:
    """Post-activation values of one primitive.

    Attributes:
        position: (3,) centre position.
        time: Centre time.
        duration: Temporal standard deviation, > 0.
        velocity: (3,) linear velocity.
        scale: (3,) per-axis scale, > 0.
        quaternion: (4,) unit quaternion (w, x, y, z).
        rotation: (3, 3) rotation matrix of ``quaternion``.
        opacity: Opacity in (0, 1).
        sh_coeffs: (3, (L + 1)^2) SH coefficients.
    """
    position: np.ndarray
    time: float
    duration: float
    velocity: np.ndarray
    scale: np.ndarray
    quaternion: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray


def activate(gaussians, index):
    """Activates the raw parameters of one primitive.

    Args:
        gaussians: The `GaussianSet`.
        index: Primitive index in ``[0, count)``.

    Returns:
        ActivatedGaussianView: The activated primitive.

    Raises:
        IndexError: If ``index`` is out of range.
        DegenerateQuaternionError: If the orientation has zero norm.
    """
    if not 0 <= index < gaussians.count:
        raise IndexError(f"Primitive index {index} out of range [0, {gaussians.count}).")
    raw_q = gaussians.orientation_raw[index]
    norm = np.linalg.norm(raw_q)
    if norm == 0:
        raise DegenerateQuaternionError(index)
    quaternion = raw_q / norm
    return ActivatedGaussianView(
        position=gaussians.position_raw[index].copy(),
        time=float(gaussians.time_raw[index, 0]),
        duration=float(np.exp(gaussians.duration_raw[index, 0])),
        velocity=gaussians.velocity[index].copy(),
        scale=np.exp(gaussians.scale_raw[index]),
        quaternion=quaternion,
        rotation=quaternion_to_rotation(quaternion[None])[0],
        opacity=float(sigmoid(gaussians.opacity_raw[index, 0])),
        sh_coeffs=gaussians.sh_coeffs[index].copy(),
    )


def motion_position(g, t):
    """Moved centre mu_x(t) = mu_x + v * (t - mu_t)."""
    return g.position + g.velocity * (t - g.time)


def temporal_opacity(g, t):
    """Gaussian-in-time weight exp(-0.5 * ((t - mu_t) / s)^2), in (0, 1]."""
    z = (t - g.time) / g.duration
    return float(np.exp(-0.5 * z * z))


def covariance(g):
    """Spatial covariance R S S^T R^T."""
    m = g.rotation * g.scale[None, :]
    return m @ m.T


def spacetime_opacity(g, x, t):
    """Opacity contributed at point ``x`` and time ``t``.

    Product of the temporal opacity, the base opacity and the spatial
    Gaussian falloff around the moved centre.
    """
    delta = np.asarray(x, dtype=float) - motion_position(g, t)
    mahalanobis = delta @ np.linalg.solve(covariance(g), delta)
    return temporal_opacity(g, t) * g.opacity * float(np.exp(-0.5 * mahalanobis))


def spacetime_opacity_and_grad(gaussians, index, x, t):
    """Evaluates `spacetime_opacity` and its gradient w.r.t. the raw fields.

    Args:
        gaussians: The `GaussianSet`.
        index: Primitive index.
        x: (3,) query point.
        t: Query time.

    Returns:
        tuple: ``(value, grads)`` where ``grads`` maps every name in `FIELDS`
        to an array shaped like that field's row.
    """
    g = activate(gaussians, index)
    moved = motion_position(g, t)
    cov = covariance(g)
    precision = np.linalg.inv(cov)
    delta = np.asarray(x, dtype=float) - moved
    pd = precision @ delta
    falloff = float(np.exp(-0.5 * delta @ pd))
    temporal = temporal_opacity(g, t)
    value = temporal * g.opacity * falloff

    d_moved = value * pd
    d_cov = 0.5 * value * np.outer(pd, pd)
    d_temporal = g.opacity * falloff

    d_time, d_duration = temporal_opacity_vjp(
        np.array([g.time]), np.array([g.duration]), t,
        np.array([temporal]), np.array([d_temporal]),
    )
    d_scale, d_orient = covariance_vjp(
        g.scale[None], gaussians.orientation_raw[index][None], d_cov[None],
    )
    grads = {
        'position_raw': d_moved,
        'time_raw': np.array([d_time[0] - g.velocity @ d_moved]),
        'duration_raw': d_duration,
        'velocity': d_moved * (t - g.time),
        'scale_raw': d_scale[0],
        'orientation_raw': d_orient[0],
        'opacity_raw': np.array([value * (1.0 - g.opacity)]),
        'sh_coeffs': np.zeros_like(g.sh_coeffs),
    }
    return value, grads


# Batched rotation algebra and vector-Jacobian products.

def quaternion_to_rotation(q):
    """Converts unit (w, x, y, z) quaternions of shape (N, 4) to (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty(q.shape[:1] + (3, 3), dtype=q.dtype)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotation_vjp(q, d_rot):
    """Pulls a (N, 3, 3) gradient on the rotation back to the unit quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    d_w = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
               - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    d_x = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
               - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    d_y = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
               + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    d_z = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
               - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([d_w, d_x, d_y, d_z], axis=1)


def normalize_vjp(raw, d_unit):
    """Pulls a gradient on ``raw / |raw|`` back to ``raw`` (rows of (N, k))."""
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norm
    radial = np.sum(unit * d_unit, axis=1, keepdims=True)
    return (d_unit - unit * radial) / norm


def covariance_vjp(scales, orientation_raw, d_cov):
    """Pulls a (N, 3, 3) covariance gradient back to the raw scale and
    orientation fields.

    Args:
        scales: (N, 3) activated scales.
        orientation_raw: (N, 4) raw quaternions.
        d_cov: (N, 3, 3) gradient w.r.t. the covariance.

    Returns:
        tuple: ``(d_scale_raw, d_orientation_raw)``.
    """
    unit = orientation_raw / np.linalg.norm(orientation_raw, axis=1, keepdims=True)
    rot = quaternion_to_rotation(unit)
    m = rot * scales[:, None, :]
    d_m = (d_cov + np.swapaxes(d_cov, 1, 2)) @ m
    d_scale = np.sum(d_m * rot, axis=1)
    d_rot = d_m * scales[:, None, :]
    d_unit = rotation_vjp(unit, d_rot)
    return d_scale * scales, normalize_vjp(orientation_raw, d_unit)


def temporal_opacity_vjp(times, durations, t, values, d_values):
    """Pulls a gradient on the temporal opacity back to ``time_raw`` and
    ``duration_raw``.

    Returns:
        tuple: ``(d_time_raw, d_duration_raw)``, each of shape (N,).
    """
    offset = t - times
    inv_var = 1.0 / (durations * durations)
    common = d_values * values * inv_var
    return common * offset, common * offset * offset
