"""Layered run configuration.

Values come from ``settings.SPLAT_DEFAULTS``, then an optional JSON config
file, then dotted command-line overrides such as ``train.seed=3``. Every key
must already exist in the defaults and keeps the type of its default.
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError

from rendering.rasterizer import RasterSettings

from .objective import LossWeights
from .optimizer import LearningRates, TrainConfig
from .relocation import RelocationConfig


KEY_DOCS = {
    'model.sh_degree': ("Spherical-harmonics degree of the colour model.", "3DGS setting, degree in [0, 3]"),
    'train.iters_per_frame': ("Iterations per frame when total_iters is 0.", "30k iterations for 300 frames"),
    'train.total_iters': ("Iteration budget; 0 scales it with the frame count.", "30k iterations"),
    'train.seed': ("Seed of the frame sampler and relocation noise.", "implementation choice"),
    'train.log_every': ("Progress-log period in iterations.", "implementation choice"),
    'train.checkpoint_every': ("Periodic checkpoint period in iterations.", "implementation choice"),
    'train.velocity_lambda0': ("Velocity learning-rate multiplier at the start.", "velocity annealing"),
    'train.velocity_lambda1': ("Velocity learning-rate multiplier at the end.", "velocity annealing"),
    'train.velocity_schedule': ("'geometric' interpolation or the literal 'sum' form.", "velocity annealing"),
    'train.background': ("RGB background colour.", "implementation choice"),
    'loss.lambda_img': ("L1 image-loss weight.", "training loss, 0.8"),
    'loss.lambda_ssim': ("SSIM-loss weight.", "training loss, 0.2"),
    'loss.lambda_perc': ("Perceptual-loss weight; must stay 0.", "perceptual loss not available"),
    'loss.lambda_reg': ("Opacity-regularization weight.", "4D regularization, 1e-2"),
    'loss.reg_end_fraction': ("Training fraction with the full regularization weight.", "first stage of training"),
    'loss.reg_decay_fraction': ("Fraction over which the weight then decays to zero.", "implementation choice"),
    'initfit.knn_k': ("Next-frame neighbours averaged per velocity estimate.", "k-NN velocity initialization"),
    'initfit.knn_cutoff': ("Reject matches farther than this times the point spacing.", "implementation choice"),
    'initfit.max_seed_points': ("Per-frame cap on seed points, by stride subsampling.", "implementation choice"),
    'initfit.zero_velocity': ("Seed from tracks but at rest.", "ablation without 4D initialization"),
    'relocation.enabled': ("Run periodic relocation.", "periodic relocation"),
    'relocation.period': ("Iterations between relocation events.", "N=100"),
    'relocation.lambda_grad': ("Sampling-score weight of the gradient statistic.", "0.5"),
    'relocation.lambda_opacity': ("Sampling-score weight of the opacity.", "0.5"),
    'relocation.dead_threshold': ("Opacity below which a primitive is relocated.", "splatting prune level"),
    'relocation.position_jitter': ("Position jitter as a fraction of the target scale.", "implementation choice"),
    'relocation.time_jitter': ("Time jitter as a fraction of the target duration.", "implementation choice"),
    'relocation.reset_opacity': ("Opacity given to relocated primitives.", "implementation choice"),
    'lr.position_init': ("Initial position rate, times the scene extent.", "3DGS setting"),
    'lr.position_final': ("Final position rate, times the scene extent.", "3DGS setting"),
    'lr.opacity': ("Opacity-logit learning rate.", "3DGS setting"),
    'lr.scale': ("Log-scale learning rate.", "3DGS setting"),
    'lr.rotation': ("Quaternion learning rate.", "3DGS setting"),
    'lr.sh': ("SH-coefficient learning rate.", "3DGS setting"),
    'lr.time': ("Centre-time learning rate.", "extension of 3DGS settings"),
    'lr.duration': ("Log-duration learning rate.", "extension of 3DGS settings"),
    'lr.velocity': ("Base velocity rate, times the annealing schedule.", "extension of 3DGS settings"),
    'raster.tile_size': ("Screen tile edge in pixels.", "3DGS rasterizer"),
    'raster.temporal_threshold': ("Cull primitives with lower temporal opacity.", "implementation choice"),
    'raster.alpha_floor': ("Skip splat alphas below this.", "3DGS rasterizer, 1/255"),
    'raster.alpha_ceiling': ("Clamp splat alphas to this.", "3DGS rasterizer, 0.999"),
    'raster.transmittance_stop': ("Stop compositing below this transmittance.", "3DGS rasterizer, 1e-4"),
    'raster.near': ("Near-plane depth.", "3DGS rasterizer"),
    'raster.dilation': ("Screen-space covariance dilation in px^2.", "3DGS rasterizer"),
    'raster.deterministic': ("Process tiles sequentially.", "implementation choice"),
}


def flatten(values, prefix=''):
    """Flattens a nested dict into ``{'section.key': value}``."""
    flat = {}
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key, value, default):
    """Coerces ``value`` to the type of ``default`` or raises ValidationError."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list) and len(value) == len(default):
            return [_coerce(key, item, item_default) for item, item_default in zip(value, default)]
    raise ValidationError(
        f"Config key '{key}' expects a value like {default!r}, got {value!r}."
    )


def parse_override(text):
    """Splits ``'a.b=value'``; the value is JSON when it parses, else a string."""
    key, sep, raw = text.partition('=')
    if not sep or not key:
        raise ValidationError(f"Override '{text}' is not of the form section.key=value.")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class CliConfig:
    """A flat, validated view of every configuration key.

    Args:
        defaults: Nested defaults; ``settings.SPLAT_DEFAULTS`` when omitted.
    """

    def __init__(self, defaults=None):
        self.defaults = flatten(defaults if defaults is not None else settings.SPLAT_DEFAULTS)
        self.values = dict(self.defaults)

    @classmethod
    def load(cls, path=None, overrides=()):
        """Builds a config from the defaults, a JSON file and overrides.

        Args:
            path: Optional JSON file with nested sections.
            overrides: Iterable of ``'section.key=value'`` strings.

        Raises:
            ValidationError: For unknown keys, badly typed values or an
                unparseable file.
            OSError: If the file cannot be read.
        """
        config = cls()
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ValidationError(f"Config file {path}: {exc}")
            if not isinstance(data, dict):
                raise ValidationError(f"Config file {path}: top level must be an object.")
            config.update(data)
        for text in overrides:
            config.set(*parse_override(text))
        return config

    def update(self, nested):
        for key, value in flatten(nested).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in self.defaults:
            raise ValidationError(f"Unknown config key '{key}'.")
        self.values[key] = _coerce(key, value, self.defaults[key])

    def section(self, name):
        prefix = f"{name}."
        return {key[len(prefix):]: value for key, value in self.values.items() if key.startswith(prefix)}

    def to_dict(self):
        nested = {}
        for key, value in self.values.items():
            section, _, name = key.partition('.')
            nested.setdefault(section, {})[name] = value
        return nested

    @property
    def sh_degree(self):
        return self.values['model.sh_degree']

    def build_train_config(self, threads=None):
        """Assembles the `TrainConfig` these values describe."""
        train = self.section('train')
        raster = self.section('raster')
        raster['threads'] = threads or settings.SPLAT_THREADS
        return TrainConfig(
            total_iters=train['total_iters'],
            iters_per_frame=train['iters_per_frame'],
            seed=train['seed'],
            sh_degree=self.sh_degree,
            log_every=train['log_every'],
            checkpoint_every=train['checkpoint_every'],
            velocity_lambda0=train['velocity_lambda0'],
            velocity_lambda1=train['velocity_lambda1'],
            velocity_schedule=train['velocity_schedule'],
            background=tuple(train['background']),
            loss=LossWeights(**self.section('loss')),
            relocation=RelocationConfig(**self.section('relocation')),
            lr=LearningRates(**self.section('lr')),
            raster=RasterSettings(**raster),
        )


def describe_keys():
    """One help line per config key with its default and source."""
    defaults = flatten(settings.SPLAT_DEFAULTS)
    lines = []
    for key, default in defaults.items():
        doc, source = KEY_DOCS.get(key, ('', ''))
        lines.append(f"{key}={json.dumps(default)}  {doc} [{source}]")
    return lines
