"""Pinhole camera model."""
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError


@dataclass
class Camera:
    """A calibrated pinhole camera with a rigid world-to-camera pose.

    Camera space follows the x-right, y-down, z-forward convention. Pixel
    (row i, column j) sits at image coordinate (j, i).

    Attributes:
        id: Camera identifier as declared in the scene manifest.
        fx: Focal length along x, in pixels.
        fy: Focal length along y, in pixels.
        cx: Principal point x, in pixels.
        cy: Principal point y, in pixels.
        width: Image width in pixels.
        height: Image height in pixels.
        rotation: (3, 3) world-to-camera rotation.
        translation: (3,) world-to-camera translation.
    """
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @classmethod
    def look_at(cls, camera_id, eye, target, up, fx, fy, width, height):
        """Builds a camera at ``eye`` looking at ``target``.

        Args:
            camera_id: Identifier.
            eye: (3,) camera centre.
            target: (3,) point on the optical axis.
            up: (3,) world up direction; maps to image "up" (negative y).
            fx: Focal length x.
            fy: Focal length y.
            width: Image width.
            height: Image height.

        Returns:
            Camera: The camera, with the principal point at the image centre.
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls(
            id=camera_id, fx=float(fx), fy=float(fy),
            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=int(width), height=int(height),
            rotation=rotation, translation=-rotation @ eye,
        )

    @property
    def center(self):
        """Camera centre in world space."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def projection_matrix(self):
        """Returns the (3, 4) matrix K [R | t]."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def world_to_camera(self, points):
        """Transforms (N, 3) world points to camera space."""
        return points @ self.rotation.T + self.translation

    def check(self):
        """Validates intrinsics, image size and pose.

        Raises:
            ValidationError: If focal lengths or image size are not positive,
                or the rotation is not orthonormal within 1e-6.
        """
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"Camera '{self.id}': focal lengths must be positive.")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"Camera '{self.id}': image size must be positive.")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError(f"Camera '{self.id}': pose must be a 3x3 rotation and a 3-vector.")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValidationError(f"Camera '{self.id}': rotation is not orthonormal.")

    def to_dict(self):
        return {
            'id': self.id,
            'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
            'width': self.width, 'height': self.height,
            'rotation': self.rotation.tolist(),
            'translation': self.translation.tolist(),
        }
