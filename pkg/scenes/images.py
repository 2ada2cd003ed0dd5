"""8-bit image IO with Pillow."""
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from PIL import Image, UnidentifiedImageError


def read_image(path, dtype=np.float32):
    """Decodes an image file to float RGB in [0, 1].

    Raises:
        ValidationError: If the file is missing or cannot be decoded.
    """
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert('RGB'))
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"Cannot read image {path}: {exc}")
    return pixels.astype(dtype) / 255.0


def read_mask(path):
    """Decodes a mask image to a boolean (H, W) array (pixels above half range)."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert('L'))
    except (OSError, UnidentifiedImageError) as exc:
        raise ValidationError(f"Cannot read mask {path}: {exc}")
    return pixels > 127


def to_uint8(rgb):
    return np.rint(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, rgb):
    """Writes a float RGB image in [0, 1] as a lossless 8-bit PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(rgb)).save(path, format='PNG')


def write_mask(path, mask):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format='PNG')


def quantize(rgb):
    """Rounds an image to the 8-bit levels it would have on disk."""
    return to_uint8(rgb).astype(np.asarray(rgb).dtype) / 255.0
