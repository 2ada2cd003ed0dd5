"""Periodic relocation of dead primitives.

Every ``period`` iterations, primitives whose opacity fell under the dead
threshold are moved onto live primitives drawn with probability proportional
to the sampling score ``lambda_grad * grad + lambda_opacity * opacity``. A
moved primitive copies its target's position, time, duration, velocity,
scale, orientation and SH colour, gets a small position/time jitter and a
fresh opacity, and its Adam moments are cleared. The primitive count never
changes.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from django.core.exceptions import ValidationError

from gaussians.primitives import logit


logger = logging.getLogger(__name__)

COPIED_FIELDS = (
    'position_raw', 'time_raw', 'duration_raw', 'velocity',
    'scale_raw', 'orientation_raw', 'sh_coeffs',
)


@dataclass(frozen=True)
class RelocationConfig:
    """Relocation hyperparameters.

    Attributes:
        enabled: Run relocation at all.
        period: Iterations between relocation events.
        lambda_grad: Weight of the normalized screen-space gradient statistic.
        lambda_opacity: Weight of the activated opacity.
        dead_threshold: Opacity under which a primitive is relocated.
        position_jitter: Position noise std as a fraction of the target's scale.
        time_jitter: Time noise std as a fraction of the target's duration.
        reset_opacity: Opacity given to relocated primitives.
    """
    enabled: bool = True
    period: int = 100
    lambda_grad: float = 0.5
    lambda_opacity: float = 0.5
    dead_threshold: float = 0.005
    position_jitter: float = 0.1
    time_jitter: float = 0.1
    reset_opacity: float = 0.1

    def check(self):
        """Raises ValidationError when the configuration is unusable."""
        if self.period <= 0:
            raise ValidationError("Relocation period must be positive.")
        if self.lambda_grad < 0 or self.lambda_opacity < 0 or self.lambda_grad + self.lambda_opacity <= 0:
            raise ValidationError("Sampling-score weights must be non-negative with a positive sum.")
        if not 0 < self.dead_threshold < 1:
            raise ValidationError("Dead threshold must lie in (0, 1).")
        if not 0 < self.reset_opacity < 1:
            raise ValidationError("Reset opacity must lie in (0, 1).")


class RelocationReport(NamedTuple):
    moved: int
    dead: int
    mean_target_score: float


def normalize_grad_stat(accum_grad2d):
    """Scales the gradient statistic into [0, 1] by its maximum."""
    stat = np.asarray(accum_grad2d, dtype=np.float64).reshape(-1)
    peak = stat.max() if stat.size else 0.0
    return stat / peak if peak > 0 else np.zeros_like(stat)


def sampling_score(grad_stat, opacity, cfg):
    """Per-primitive sampling score ``lambda_grad * grad + lambda_opacity * opacity``."""
    return cfg.lambda_grad * np.asarray(grad_stat) + cfg.lambda_opacity * np.asarray(opacity)


def draw_targets(scores, count, rng):
    """Draws ``count`` indices into ``scores`` with score-proportional probability.

    All-zero scores fall back to uniform sampling.
    """
    scores = np.asarray(scores, dtype=np.float64)
    total = scores.sum()
    probs = scores / total if total > 0 else np.full(scores.size, 1.0 / scores.size)
    return rng.choice(scores.size, size=count, p=probs)


def relocate(gaussians, adam, scores, cfg, rng):
    """Moves dead primitives onto high-score live ones, in place.

    Args:
        gaussians: The `GaussianSet`; mutated.
        adam: The `AdamState`; moments of moved primitives are zeroed.
        scores: (N,) sampling scores.
        cfg: `RelocationConfig`.
        rng: ``numpy.random.Generator``.

    Returns:
        RelocationReport: How many primitives moved and the mean target score.
    """
    opacity = gaussians.opacities()
    dead = np.flatnonzero(opacity < cfg.dead_threshold)
    alive = np.flatnonzero(opacity >= cfg.dead_threshold)
    if dead.size == 0:
        return RelocationReport(0, 0, 0.0)
    if alive.size == 0:
        logger.warning("All %d primitives are below the dead threshold; relocation skipped.", dead.size)
        return RelocationReport(0, int(dead.size), 0.0)

    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    targets = alive[draw_targets(scores[alive], dead.size, rng)]

    for name in COPIED_FIELDS:
        array = getattr(gaussians, name)
        array[dead] = array[targets]

    dtype = gaussians.dtype
    target_scales = np.exp(gaussians.scale_raw[targets])
    target_durations = np.exp(gaussians.duration_raw[targets])
    gaussians.position_raw[dead] += (rng.normal(size=(dead.size, 3)) * cfg.position_jitter * target_scales).astype(dtype)
    gaussians.time_raw[dead] += (rng.normal(size=(dead.size, 1)) * cfg.time_jitter * target_durations).astype(dtype)
    gaussians.opacity_raw[dead] = logit(cfg.reset_opacity)
    adam.zero_rows(dead)
    gaussians.touch()
    return RelocationReport(int(dead.size), int(dead.size), float(np.mean(scores[targets])))
