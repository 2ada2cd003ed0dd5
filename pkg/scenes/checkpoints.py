"""Checkpoint files.

Layout::

    SPLATCKPT <format version> <header byte length>\\n
    <JSON header, sorted keys>
    <little-endian float32 blobs, one per field in FIELDS order>

The header lists, for every raw field, its name, shape, byte offset (from the
start of the blob section) and byte length, plus the primitive count, SH
degree, configuration snapshot, iteration count and sampler state. Sets held
in float64 are stored as float32.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError

from gaussians.primitives import FIELDS, GaussianSet, field_shape


MAGIC = b'SPLATCKPT'
FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype('<f4')


class CheckpointFormatError(ValidationError):
    """A checkpoint file that does not follow the declared layout."""


@dataclass
class Checkpoint:
    """Everything needed to resume or render a run.

    Attributes:
        gaussians: The `GaussianSet`.
        config: Nested configuration snapshot.
        iteration: Completed training iterations.
        rng_state: ``bit_generator.state`` of the frame sampler, or None.
    """
    gaussians: GaussianSet
    config: dict = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict = None
    version: int = FORMAT_VERSION


def encode_checkpoint(ckpt):
    """Serializes a checkpoint to bytes."""
    gaussians = ckpt.gaussians
    blobs, fields, offset = [], [], 0
    for name, array in gaussians.arrays():
        blob = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        fields.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        'format_version': FORMAT_VERSION,
        'count': gaussians.count,
        'sh_degree': gaussians.sh_degree,
        'fields': fields,
        'config': ckpt.config,
        'iteration': int(ckpt.iteration),
        'rng_state': ckpt.rng_state,
    }, sort_keys=True).encode('utf-8')
    preamble = MAGIC + f" {FORMAT_VERSION} {len(header)}\n".encode('ascii')
    return preamble + header + b''.join(blobs)


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))


def _parse_preamble(data, source):
    line, newline, _ = data.partition(b'\n')
    parts = line.split(b' ')
    if not newline or len(parts) != 3 or parts[0] != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint file.")
    try:
        version, header_bytes = int(parts[1]), int(parts[2])
    except ValueError:
        raise CheckpointFormatError(f"{source}: malformed checkpoint preamble.")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{source}: checkpoint format version {version}, expected {FORMAT_VERSION}."
        )
    return len(line) + 1, header_bytes


def decode_checkpoint(data, source='checkpoint'):
    """Parses checkpoint bytes.

    Raises:
        CheckpointFormatError: For a version mismatch, a header that
            disagrees with the field layout, or a truncated blob.
    """
    start, header_bytes = _parse_preamble(data, source)
    try:
        header = json.loads(data[start:start + header_bytes].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: unreadable header ({exc}).")
    blob_start = start + header_bytes
    try:
        count, degree = int(header['count']), int(header['sh_degree'])
        entries = {entry['name']: entry for entry in header['fields']}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: incomplete header ({exc}).")
    missing = [name for name in FIELDS if name not in entries]
    if missing:
        raise CheckpointFormatError(f"{source}: field '{missing[0]}' missing from header.")

    arrays = {}
    for name in FIELDS:
        entry = entries[name]
        shape = tuple(entry['shape'])
        expected = field_shape(name, count, degree)
        if shape != expected:
            raise CheckpointFormatError(
                f"{source}: field '{name}' has shape {shape}, expected {expected}."
            )
        nbytes = int(np.prod(shape)) * BLOB_DTYPE.itemsize
        if entry['nbytes'] != nbytes:
            raise CheckpointFormatError(f"{source}: field '{name}' declares {entry['nbytes']} bytes, expected {nbytes}.")
        begin = blob_start + entry['offset']
        if begin + nbytes > len(data):
            raise CheckpointFormatError(f"{source}: field '{name}' is truncated.")
        if nbytes == 0:
            arrays[name] = np.zeros(shape, dtype=BLOB_DTYPE)
            continue
        arrays[name] = np.frombuffer(data, dtype=BLOB_DTYPE, count=nbytes // 4, offset=begin).reshape(shape).copy()

    return Checkpoint(
        gaussians=GaussianSet(**arrays),
        config=header.get('config') or {},
        iteration=header.get('iteration', 0),
        rng_state=header.get('rng_state'),
        version=header['format_version'],
    )


def load_checkpoint(path, dtype=None):
    """Reads a checkpoint, optionally casting the set to ``dtype``."""
    ckpt = decode_checkpoint(Path(path).read_bytes(), source=str(path))
    if dtype is not None:
        ckpt.gaussians = ckpt.gaussians.astype(dtype)
    return ckpt
