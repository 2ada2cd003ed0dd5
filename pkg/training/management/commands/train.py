import json
import logging
from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from initfit.correspondences import read_tracks
from initfit.seeding import build_seed_cloud, random_primitives, seed_primitives
from scenes.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from scenes.management.base import SplatCommand
from scenes.manifest import load_scene
from splatsystem.exceptions import EmptySeedCloudError
from training.config import CliConfig, describe_keys
from training.optimizer import Trainer


LOG_FORMAT = '%(asctime)s %(name)s %(message)s'


def initial_set(scene, config, init, random_count, dtype):
    """Seeds the starting set from the scene's tracks or at random."""
    train = config.section('train')
    fit = config.section('initfit')
    if fit['knn_k'] < 1 or fit['max_seed_points'] < 1 or fit['knn_cutoff'] <= 0:
        raise ValidationError(
            "initfit.knn_k and initfit.max_seed_points must be at least 1 and initfit.knn_cutoff positive."
        )
    if init == 'auto':
        init = 'tracks' if scene.correspondences else 'random'
    if init == 'tracks':
        if not scene.correspondences:
            raise CommandError("Scene has no correspondence file; use --init random.")
        tracks = read_tracks(scene.path(scene.correspondences))
        cloud = build_seed_cloud(
            tracks, scene.cameras, image_lookup=scene.image_lookup(dtype), max_points=fit['max_seed_points'],
            k=fit['knn_k'], cutoff_factor=fit['knn_cutoff'],
        )
        try:
            return seed_primitives(cloud, scene.frame_times, config.sh_degree, dtype, fit['zero_velocity'])
        except EmptySeedCloudError as exc:
            raise EmptySeedCloudError(f"{exc} Rerun with --init random.")
    low, high = scene.scene_bounds()
    return random_primitives(random_count, low, high, scene.frame_times, config.sh_degree, train['seed'], dtype)


class Command(SplatCommand):
    """Train a space-time Gaussian set on a scene."""
    help = 'Train on a scene; writes periodic checkpoints, final.ckpt, loss_trace.json and train.log'
    epilog = 'config keys (section.key=default  description [source]):\n  ' + '\n  '.join(describe_keys())

    def add_arguments(self, parser):
        parser.add_argument('--scene', required=True, help='Scene directory or manifest.')
        parser.add_argument('--config', help='JSON config file.')
        parser.add_argument('--out', required=True, help='Output directory.')
        parser.add_argument(
            '--set', action='append', default=[], metavar='KEY=VALUE',
            help='Override one config key, e.g. --set train.seed=3 (repeatable).',
        )
        parser.add_argument('--resume', help='Checkpoint to continue from.')
        parser.add_argument('--init', choices=('auto', 'tracks', 'random'), default='auto')
        parser.add_argument('--random-count', type=int, default=2000)

    def handle(self, *args, **options):
        """Runs training and writes its artifacts."""
        config = CliConfig.load(options['config'], options['set'])
        train_config = config.build_train_config(options['threads'])
        train_config.check()
        scene = load_scene(options['scene'])
        out_dir = Path(options['out'])
        out_dir.mkdir(parents=True, exist_ok=True)

        iteration, rng_state = 0, None
        if options['resume']:
            ckpt = load_checkpoint(options['resume'], self.dtype)
            gaussians, iteration, rng_state = ckpt.gaussians, ckpt.iteration, ckpt.rng_state
            self.stdout.write(f"Resuming from {options['resume']} at iteration {iteration}")
        else:
            gaussians = initial_set(scene, config, options['init'], options['random_count'], self.dtype)
        self.stdout.write(f"Training {gaussians.count} primitives on '{scene.name}'...")

        handler = logging.FileHandler(out_dir / 'train.log')
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        progress = logging.getLogger('training.progress')
        progress.addHandler(handler)
        try:
            trainer = Trainer(scene, gaussians, train_config, iteration, rng_state)

            def save(name):
                save_checkpoint(
                    Checkpoint(trainer.gaussians, config.to_dict(), trainer.iteration,
                               trainer.rng.bit_generator.state),
                    out_dir / name,
                )

            def on_step(trainer, report):
                every = train_config.checkpoint_every
                if every and trainer.iteration % every == 0 and trainer.iteration < trainer.total_iters:
                    save(f"iter_{trainer.iteration:06d}.ckpt")

            reports = trainer.run(callback=on_step)
            save('final.ckpt')
        finally:
            progress.removeHandler(handler)
            handler.close()

        (out_dir / 'loss_trace.json').write_text(json.dumps(trainer.loss_trace))
        last = f" final loss {reports[-1].loss:.6f}" if reports else ''
        self.stdout.write(self.style.SUCCESS(
            f"Finished at iteration {trainer.iteration}:{last}; checkpoints in {out_dir}"
        ))
