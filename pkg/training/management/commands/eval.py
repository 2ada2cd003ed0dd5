import json
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError

from rendering.rasterizer import render_forward
from scenes.checkpoints import load_checkpoint
from scenes.images import quantize
from scenes.management.base import SplatCommand
from scenes.manifest import load_scene
from training.objective import apply_mask, evaluate_pair


METRICS = ('psnr', 'dssim1', 'dssim2')


def mean_metrics(records):
    if not records:
        return None
    return {key: float(np.mean([record[key] for record in records])) for key in METRICS}


def evaluate_checkpoint(gaussians, scene, split, raster):
    """Renders every frame of a split and scores it against the dataset.

    Renders are rounded to 8-bit levels first, like the dataset images.

    Returns:
        dict: Report with per-frame records, the mean metrics and, when the
        frames carry masks, masked per-frame and mean metrics.
    """
    frames = scene.frames_for(split)
    if not frames:
        raise ValidationError(f"Split '{split}' of scene '{scene.name}' has no frames.")
    per_frame, masked = [], []
    for frame in frames:
        cam = scene.camera(frame.camera_id)
        gt = scene.image(frame, gaussians.dtype)
        pred = quantize(render_forward(gaussians, cam, frame.time, scene.background, raster).rgb)
        record = {'camera': frame.camera_id, 'time': frame.time, **evaluate_pair(pred, gt)}
        mask = scene.mask(frame)
        if mask is not None:
            cropped = apply_mask(pred, gt, mask)
            if cropped is not None:
                record['masked'] = evaluate_pair(*cropped)
                masked.append(record['masked'])
        per_frame.append(record)
    return {
        'scene': scene.name,
        'split': split,
        'frames': per_frame,
        'mean': mean_metrics(per_frame),
        'masked_mean': mean_metrics(masked),
    }


class Command(SplatCommand):
    """Score a checkpoint on a scene split with PSNR and both DSSIM variants."""
    help = 'Evaluate a checkpoint on a scene split; writes a JSON report'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--scene', required=True)
        parser.add_argument('--split', choices=('train', 'test'), default='test')
        parser.add_argument('--out', required=True, help='Output JSON report path.')

    def handle(self, *args, **options):
        """Writes the report and prints the mean metrics."""
        scene = load_scene(options['scene'])
        ckpt = load_checkpoint(options['checkpoint'], self.dtype)
        report = evaluate_checkpoint(ckpt.gaussians, scene, options['split'], self.raster_settings(options))
        report['checkpoint'] = str(options['checkpoint'])
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True))
        mean = report['mean']
        self.stdout.write(
            f"{len(report['frames'])} frames: PSNR {mean['psnr']:.2f} dB, "
            f"DSSIM1 {mean['dssim1']:.4f}, DSSIM2 {mean['dssim2']:.4f}"
        )
        self.stdout.write(self.style.SUCCESS(f"Report written to {out}"))
