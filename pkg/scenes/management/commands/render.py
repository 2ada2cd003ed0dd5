import json

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from rendering.cameras import Camera
from rendering.rasterizer import render_forward
from scenes.checkpoints import load_checkpoint
from scenes.forms import CameraForm, form_errors
from scenes.images import write_image
from scenes.management.base import SplatCommand
from scenes.manifest import load_scene


def inline_camera(text):
    """Parses and validates a camera given as a JSON object."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--camera-json: {exc}")
    form = CameraForm(data if isinstance(data, dict) else {})
    if not form.is_valid():
        raise ValidationError(form_errors(form, 'camera-json'))
    cam = Camera(**form.cleaned_data)
    cam.check()
    return cam


class Command(SplatCommand):
    """Render one image from a checkpoint at any camera and continuous time."""
    help = 'Render a checkpoint from a scene camera (or an inline JSON camera) at time T'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--scene', help='Scene directory or manifest; required with --camera.')
        parser.add_argument('--camera', help='Camera id declared in the scene.')
        parser.add_argument('--camera-json', help='Inline camera as a JSON object.')
        parser.add_argument('--time', type=float, required=True, help='Normalized time in [0, 1].')
        parser.add_argument('--out', required=True, help='Output PNG path.')

    def handle(self, *args, **options):
        """Renders the requested view and writes it as a PNG."""
        if bool(options['camera']) == bool(options['camera_json']):
            raise CommandError("Give exactly one of --camera or --camera-json.")
        if not 0.0 <= options['time'] <= 1.0:
            raise ValidationError(f"--time must lie in [0, 1], got {options['time']}.")

        scene = load_scene(options['scene']) if options['scene'] else None
        if options['camera']:
            if scene is None:
                raise CommandError("--camera needs --scene.")
            cam = scene.camera(options['camera'])
        else:
            cam = inline_camera(options['camera_json'])

        ckpt = load_checkpoint(options['checkpoint'], self.dtype)
        if scene is not None:
            background = scene.background
        else:
            background = ckpt.config.get('train', {}).get('background', (0.0, 0.0, 0.0))
        out = render_forward(ckpt.gaussians, cam, options['time'], background, self.raster_settings(options))
        write_image(options['out'], out.rgb)
        self.stdout.write(self.style.SUCCESS(
            f"Rendered camera {cam.id} at t={options['time']:.4f} to {options['out']}"
        ))
