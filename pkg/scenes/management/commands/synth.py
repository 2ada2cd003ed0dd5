from scenes.management.base import SplatCommand
from scenes.synthetic import PRESETS, generate_synthetic_scene


class Command(SplatCommand):
    """Write a synthetic dynamic scene with its ground-truth checkpoint."""
    help = 'Generate a synthetic scene directory (images, masks, tracks, ground truth)'

    def add_arguments(self, parser):
        parser.add_argument('--preset', required=True, choices=PRESETS)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True, help='Output scene directory.')
        parser.add_argument('--blobs', type=int, default=32)
        parser.add_argument('--cameras', type=int, default=6)
        parser.add_argument('--frames', type=int, default=10)
        parser.add_argument('--size', type=int, default=64, help='Square image size in pixels.')
        parser.add_argument('--track-noise', type=float, default=0.0, help='Pixel noise of tracks.txt.')

    def handle(self, *args, **options):
        """Generates the scene and reports what was written."""
        self.stdout.write(f"Generating '{options['preset']}' (seed {options['seed']})...")
        result = generate_synthetic_scene(
            options['preset'], options['seed'], options['out'],
            blobs=options['blobs'], cameras=options['cameras'], frames=options['frames'],
            size=options['size'], track_noise=options['track_noise'],
            raster=self.raster_settings(options),
        )
        scene = result.scene
        self.stdout.write(
            f" - {len(scene.cameras)} cameras, {len(scene.frames)} frames, "
            f"{len(result.tracks)} tracks, {result.ground_truth.count} blobs"
        )
        self.stdout.write(self.style.SUCCESS(f"Scene written to {scene.root}"))
