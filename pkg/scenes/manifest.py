"""Scene manifests.

A scene is a directory holding ``scene.json`` and the frame images. The
manifest is JSON::

    {
      "format_version": 1,
      "name": "moving-blobs",
      "frame_count": 10, "fps": 30.0,
      "background": [0, 0, 0],
      "bounds": [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]],       (optional)
      "cameras": [{"id": "cam0", "fx": .., "fy": .., "cx": .., "cy": ..,
                   "width": .., "height": .., "rotation": [[..]x3],
                   "translation": [..]}],
      "frames": [{"camera": "cam0", "time": 0.0,
                  "image": "images/cam0_0000.png", "mask": null}],
      "correspondences": "tracks.txt",                          (optional)
      "split": {"train": ["cam0", ..], "test": ["cam5"]}         (optional)
    }

Paths are relative to the manifest's directory. Images are decoded on first
use and cached.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from rendering.cameras import Camera

from .forms import CameraForm, FrameForm, form_errors
from .images import read_image, read_mask


logger = logging.getLogger(__name__)

MANIFEST_NAME = 'scene.json'
FORMAT_VERSION = 1


class FrameObservation(NamedTuple):
    camera_id: str
    time: float
    image: str
    mask: Optional[str] = None


@dataclass
class SceneManifest:
    """A validated scene.

    Attributes:
        name: Scene name.
        root: Directory the relative paths resolve against.
        frame_count: Number of distinct frame times.
        fps: Capture rate.
        background: (3,) background colour.
        cameras: Camera id -> `Camera`, in declaration order.
        frames: Every `FrameObservation`.
        correspondences: Relative path of the track file, if any.
        split: ``{'train': [ids], 'test': [ids]}``.
        bounds: Optional (2, 3) scene box.
    """
    name: str
    root: Path
    frame_count: int
    fps: float
    background: tuple
    cameras: dict
    frames: list
    correspondences: Optional[str] = None
    split: dict = field(default_factory=dict)
    bounds: Optional[list] = None
    _images: dict = field(default_factory=dict, repr=False, compare=False)

    def camera(self, camera_id):
        """Returns a declared camera.

        Raises:
            ValidationError: If the id is not declared in the manifest.
        """
        try:
            return self.cameras[camera_id]
        except KeyError:
            raise ValidationError(f"Scene '{self.name}' has no camera '{camera_id}'.")

    @property
    def frame_times(self):
        return sorted({frame.time for frame in self.frames})

    def split_cameras(self, split):
        if split == 'train':
            return self.split.get('train') or [cid for cid in self.cameras if cid not in self.split.get('test', [])]
        if split == 'test':
            return self.split.get('test', [])
        raise ValidationError(f"Unknown split '{split}'; expected 'train' or 'test'.")

    def frames_for(self, split):
        cameras = set(self.split_cameras(split))
        return [frame for frame in self.frames if frame.camera_id in cameras]

    def train_frames(self):
        return self.frames_for('train')

    def test_frames(self):
        return self.frames_for('test')

    def path(self, relative):
        return self.root / relative

    def image(self, frame, dtype=np.float32):
        """Decoded float RGB image of a frame, cached per path and dtype."""
        key = (frame.image, np.dtype(dtype).str)
        if key not in self._images:
            self._images[key] = read_image(self.path(frame.image), dtype)
        return self._images[key]

    def mask(self, frame):
        return read_mask(self.path(frame.mask)) if frame.mask else None

    def preload(self, threads=None, dtype=np.float32):
        """Decodes every image up front on a thread pool."""
        threads = threads or settings.SPLAT_THREADS
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            list(pool.map(lambda frame: self.image(frame, dtype), self.frames))

    def image_lookup(self, dtype=np.float32):
        """Returns ``lookup(camera_id, time)`` giving the frame's image or None."""
        index = {(frame.camera_id, frame.time): frame for frame in self.frames}

        def lookup(camera_id, time):
            frame = index.get((camera_id, time))
            return self.image(frame, dtype) if frame is not None else None
        return lookup

    def camera_centers(self):
        return np.array([cam.center for cam in self.cameras.values()])

    def camera_extent(self):
        """1.1 times the largest camera distance from the mean camera centre."""
        centers = self.camera_centers()
        radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        return 1.1 * radius if radius > 0 else 1.0

    def scene_bounds(self):
        """The declared box, or a cube of the camera extent around the camera centroid."""
        if self.bounds is not None:
            return np.asarray(self.bounds[0], dtype=float), np.asarray(self.bounds[1], dtype=float)
        centre = self.camera_centers().mean(axis=0)
        half = 0.5 * self.camera_extent()
        return centre - half, centre + half

    def to_dict(self):
        return {
            'format_version': FORMAT_VERSION,
            'name': self.name,
            'frame_count': self.frame_count,
            'fps': self.fps,
            'background': list(self.background),
            'bounds': self.bounds,
            'cameras': [cam.to_dict() for cam in self.cameras.values()],
            'frames': [
                {'camera': f.camera_id, 'time': f.time, 'image': f.image, 'mask': f.mask}
                for f in self.frames
            ],
            'correspondences': self.correspondences,
            'split': self.split,
        }


def _validated(form_class, data, location):
    if not isinstance(data, dict):
        raise ValidationError(f"{location}: expected an object.")
    form = form_class(data)
    if not form.is_valid():
        raise ValidationError(form_errors(form, location))
    return form.cleaned_data


def parse_scene(data, root, check_files=True):
    """Validates a decoded manifest.

    Args:
        data: The JSON object.
        root: Directory relative paths resolve against.
        check_files: Require the image and mask files to exist.

    Returns:
        SceneManifest: The validated scene.

    Raises:
        ValidationError: Naming the offending entry.
    """
    root = Path(root)
    if not isinstance(data, dict):
        raise ValidationError("Manifest must be a JSON object.")
    version = data.get('format_version', FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValidationError(f"Manifest format version {version} is not supported.")

    cameras = {}
    for i, entry in enumerate(data.get('cameras') or []):
        cleaned = _validated(CameraForm, entry, f"cameras[{i}]")
        if cleaned['id'] in cameras:
            raise ValidationError(f"cameras[{i}].id: duplicate camera id '{cleaned['id']}'.")
        cam = Camera(**cleaned)
        try:
            cam.check()
        except ValidationError as exc:
            raise ValidationError(f"cameras[{i}]: {exc.message}")
        cameras[cam.id] = cam
    if not cameras:
        raise ValidationError("Manifest declares no cameras.")

    frames = []
    for i, entry in enumerate(data.get('frames') or []):
        cleaned = _validated(FrameForm, entry, f"frames[{i}]")
        if cleaned['camera'] not in cameras:
            raise ValidationError(f"frames[{i}].camera: unknown camera id '{cleaned['camera']}'.")
        frame = FrameObservation(cleaned['camera'], cleaned['time'], cleaned['image'], cleaned['mask'] or None)
        if check_files:
            for key in ('image', 'mask'):
                relative = getattr(frame, key)
                if relative and not (root / relative).is_file():
                    raise ValidationError(f"frames[{i}].{key}: file not found: {relative}")
        frames.append(frame)
    if not frames:
        raise ValidationError("Manifest declares no frames.")

    split = data.get('split') or {}
    for name, ids in split.items():
        if name not in ('train', 'test'):
            raise ValidationError(f"split.{name}: unknown split.")
        for cid in ids:
            if cid not in cameras:
                raise ValidationError(f"split.{name}: unknown camera id '{cid}'.")

    background = data.get('background', [0.0, 0.0, 0.0])
    if not (isinstance(background, list) and len(background) == 3):
        raise ValidationError("background: must be an RGB triple.")

    return SceneManifest(
        name=str(data.get('name', root.name)),
        root=root,
        frame_count=int(data.get('frame_count') or len({f.time for f in frames})),
        fps=float(data.get('fps', 30.0)),
        background=tuple(float(x) for x in background),
        cameras=cameras,
        frames=frames,
        correspondences=data.get('correspondences'),
        split={name: list(ids) for name, ids in split.items()},
        bounds=data.get('bounds'),
    )


def load_scene(path):
    """Loads a scene from its directory or its manifest file.

    Raises:
        ValidationError: For an unparseable or invalid manifest.
        OSError: If the manifest cannot be read.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}")
    scene = parse_scene(data, path.parent)
    logger.info("Loaded scene '%s': %d cameras, %d frames.", scene.name, len(scene.cameras), len(scene.frames))
    return scene


def write_scene(scene, path=None):
    """Writes the manifest to ``path`` (default ``<root>/scene.json``)."""
    path = Path(path) if path else scene.root / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene.to_dict(), indent=2))
    return path
