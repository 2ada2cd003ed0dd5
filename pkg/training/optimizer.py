"""Adam updates, learning-rate schedules and the training loop.

One training step renders one (camera, time) frame, evaluates the rendering
loss plus the scheduled opacity penalty, backpropagates, applies Adam with
per-field learning rates, folds the screen-space gradient statistic and, every
``relocation.period`` steps, relocates dead primitives.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from django.core.exceptions import ValidationError

from gaussians.primitives import FIELDS
from rendering.rasterizer import GradientSet, RasterSettings, render_backward, render_forward
from splatsystem.exceptions import NumericError

from .objective import LossWeights, loss_reg, loss_render
from .relocation import RelocationConfig, normalize_grad_stat, relocate, sampling_score


logger = logging.getLogger(__name__)
progress_logger = logging.getLogger('training.progress')


class TrainingStepError(NumericError):
    """A numerical failure inside a training step, with iteration context."""


@dataclass(frozen=True)
class LearningRates:
    """Base learning rates per raw field.

    The position rate decays exponentially from ``position_init`` to
    ``position_final``; both are multiplied by the scene extent. The velocity
    rate is multiplied by the annealing schedule.
    """
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    sh: float = 2.5e-3
    time: float = 1e-4
    duration: float = 2e-3
    velocity: float = 1e-3


@dataclass
class AdamState:
    """Adam moments mirroring every raw field of a `GaussianSet`.

    Attributes:
        m: Field name -> first moment.
        v: Field name -> second moment.
        step_count: Number of steps taken.
        skipped: Non-finite gradient entries skipped so far.
    """
    m: dict
    v: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_set(cls, gaussians):
        return cls(
            m={name: np.zeros_like(array) for name, array in gaussians.arrays()},
            v={name: np.zeros_like(array) for name, array in gaussians.arrays()},
        )

    def zero_rows(self, indices):
        """Clears the moments of the given primitives."""
        for name in FIELDS:
            self.m[name][indices] = 0
            self.v[name][indices] = 0


def adam_step(state, params, grads, learning_rates):
    """Applies one bias-corrected Adam update to every raw field, in place.

    Non-finite gradient entries leave their parameter and moments untouched
    and are counted in ``state.skipped``.

    Args:
        state: `AdamState`.
        params: `GaussianSet`; mutated.
        grads: `GradientSet` (or mapping of field name to gradient).
        learning_rates: Field name -> effective learning rate for this step.

    Returns:
        int: Non-finite entries skipped in this step.
    """
    state.step_count += 1
    k = state.step_count
    correction1 = 1.0 - state.beta1 ** k
    correction2 = 1.0 - state.beta2 ** k
    skipped = 0
    for name in FIELDS:
        g = grads[name]
        finite = np.isfinite(g)
        skipped += int(finite.size - np.count_nonzero(finite))
        g = np.where(finite, g, 0)
        m = np.where(finite, state.beta1 * state.m[name] + (1 - state.beta1) * g, state.m[name])
        v = np.where(finite, state.beta2 * state.v[name] + (1 - state.beta2) * g * g, state.v[name])
        state.m[name][...] = m
        state.v[name][...] = v
        lr = learning_rates.get(name, 0.0)
        if lr == 0:
            continue
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param = getattr(params, name)
        param -= np.where(finite, update, 0).astype(param.dtype)
    params.touch()
    state.skipped += skipped
    if skipped:
        logger.warning("Adam step %d skipped %d non-finite gradient entries.", k, skipped)
    return skipped


def velocity_lr_schedule(progress, lambda0, lambda1, mode='geometric'):
    """Velocity learning-rate multiplier at a training fraction.

    Args:
        progress: Fraction of training done, in [0, 1].
        lambda0: Multiplier at the start.
        lambda1: Multiplier at the end.
        mode: ``'geometric'`` for ``lambda0^(1-p) * lambda1^p`` or ``'sum'``
            for the literal ``lambda0^(1-p) + lambda1^p``.

    Returns:
        float: The multiplier. Zero endpoints disable velocity learning.
    """
    if mode == 'geometric':
        if lambda0 == 0 or lambda1 == 0:
            return 0.0
        return float(lambda0 ** (1.0 - progress) * lambda1 ** progress)
    if mode == 'sum':
        return float(lambda0 ** (1.0 - progress) + lambda1 ** progress)
    raise ValidationError(f"Unknown velocity schedule '{mode}'.")


def exponential_lr(progress, lr_init, lr_final):
    """Log-linear interpolation from ``lr_init`` to ``lr_final``."""
    if lr_init == 0 or lr_final == 0:
        return 0.0
    return float(np.exp((1.0 - progress) * np.log(lr_init) + progress * np.log(lr_final)))


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the scene and initial set.

    Attributes:
        total_iters: Iteration budget; 0 derives it from ``iters_per_frame``.
        iters_per_frame: Iterations per distinct frame time.
        seed: Seed of the frame sampler and relocation noise.
        sh_degree: SH degree of the model.
        log_every: Progress-log period in iterations.
        checkpoint_every: Periodic checkpoint period in iterations.
        velocity_lambda0: Velocity-rate multiplier at the start.
        velocity_lambda1: Velocity-rate multiplier at the end.
        velocity_schedule: ``'geometric'`` or ``'sum'``.
        background: RGB background colour.
        loss: `LossWeights`.
        relocation: `RelocationConfig`.
        lr: `LearningRates`.
        raster: `RasterSettings`.
    """
    total_iters: int = 0
    iters_per_frame: int = 100
    seed: int = 0
    sh_degree: int = 2
    log_every: int = 100
    checkpoint_every: int = 1000
    velocity_lambda0: float = 1.0
    velocity_lambda1: float = 0.01
    velocity_schedule: str = 'geometric'
    background: tuple = (0.0, 0.0, 0.0)
    loss: LossWeights = field(default_factory=LossWeights)
    relocation: RelocationConfig = field(default_factory=RelocationConfig)
    lr: LearningRates = field(default_factory=LearningRates)
    raster: RasterSettings = field(default_factory=RasterSettings)

    def check(self):
        """Raises ValidationError when the configuration is unusable."""
        if self.total_iters < 0 or self.iters_per_frame <= 0:
            raise ValidationError("Iteration budget must be positive.")
        if self.velocity_lambda0 < 0 or self.velocity_lambda1 < 0:
            raise ValidationError("Velocity schedule endpoints must be non-negative.")
        if self.velocity_schedule not in ('geometric', 'sum'):
            raise ValidationError(f"Unknown velocity schedule '{self.velocity_schedule}'.")
        self.loss.check()
        self.relocation.check()

    def iterations_for(self, frame_count):
        return self.total_iters or self.iters_per_frame * frame_count


class StepReport(NamedTuple):
    iteration: int
    loss: float
    l1: float
    dssim: float
    reg: float
    count: int
    mean_opacity: float
    relocation: Optional[object] = None


class Trainer:
    """Owns the mutable training state and runs training steps.

    Args:
        scene: `SceneManifest` with loaded cameras and frames.
        gaussians: Initial `GaussianSet`; mutated in place.
        config: `TrainConfig`.
        iteration: Starting iteration (non-zero when resuming).
        rng_state: Saved ``bit_generator.state`` to resume the sampler.
    """

    def __init__(self, scene, gaussians, config, iteration=0, rng_state=None):
        config.check()
        self.scene = scene
        self.gaussians = gaussians
        self.config = config
        self.adam = AdamState.for_set(gaussians)
        self.grads = GradientSet.zeros_for(gaussians)
        self.rng = np.random.default_rng(config.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.iteration = iteration
        self.total_iters = config.iterations_for(scene.frame_count)
        self.frames = scene.train_frames()
        if not self.frames:
            raise ValidationError("Scene has no training frames.")
        self.extent = scene.camera_extent()
        self.background = np.asarray(config.background, dtype=gaussians.dtype)
        self.loss_trace = []

    @property
    def progress(self):
        return min(1.0, self.iteration / self.total_iters)

    def sample_frame(self):
        """Draws a training frame uniformly with the trainer's generator."""
        return self.frames[int(self.rng.integers(len(self.frames)))]

    def learning_rates(self):
        """Effective learning rate of every raw field at the current progress."""
        lr, cfg, p = self.config.lr, self.config, self.progress
        return {
            'position_raw': exponential_lr(p, lr.position_init * self.extent, lr.position_final * self.extent),
            'time_raw': lr.time,
            'duration_raw': lr.duration,
            'velocity': lr.velocity * velocity_lr_schedule(
                p, cfg.velocity_lambda0, cfg.velocity_lambda1, cfg.velocity_schedule),
            'scale_raw': lr.scale,
            'orientation_raw': lr.rotation,
            'opacity_raw': lr.opacity,
            'sh_coeffs': lr.sh,
        }

    def mean_opacity(self):
        return float(np.mean(self.gaussians.opacities())) if self.gaussians.count else 0.0

    def train_step(self, frame):
        """Runs one optimization step on one frame.

        Args:
            frame: `FrameObservation` whose camera is in the scene.

        Returns:
            StepReport: Loss terms and set statistics after the step.

        Raises:
            TrainingStepError: On a numerical failure, with iteration context.
        """
        cfg = self.config
        gaussians = self.gaussians
        cam = self.scene.camera(frame.camera_id)
        try:
            gt = self.scene.image(frame, dtype=gaussians.dtype)
            out = render_forward(gaussians, cam, frame.time, self.background, cfg.raster)
            loss, d_rgb, terms = loss_render(out.rgb, gt, cfg.loss)

            reg_weight = cfg.loss.lambda_reg * cfg.loss.reg_scale(self.progress)
            reg = 0.0
            if reg_weight > 0:
                reg, d_opacity = loss_reg(gaussians, frame.time)
                loss += reg_weight * reg

            self.grads.clear_gradients()
            render_backward(gaussians, cam, frame.time, out, d_rgb, self.grads)
            if reg_weight > 0:
                self.grads.grads['opacity_raw'] += reg_weight * d_opacity
            adam_step(self.adam, gaussians, self.grads, self.learning_rates())
        except NumericError as exc:
            raise TrainingStepError(
                f"Iteration {self.iteration} (camera {frame.camera_id}, t={frame.time:.4f}): {exc}"
            ) from exc

        self.iteration += 1
        relocation = None
        period = cfg.relocation.period
        if cfg.relocation.enabled and self.iteration % period == 0:
            relocation = self.relocate()

        report = StepReport(
            iteration=self.iteration, loss=float(loss), l1=terms['l1'], dssim=terms['dssim'],
            reg=float(reg), count=gaussians.count, mean_opacity=self.mean_opacity(),
            relocation=relocation,
        )
        self.loss_trace.append(report.loss)
        if cfg.log_every and self.iteration % cfg.log_every == 0:
            progress_logger.info(
                "iter=%d loss=%.6f l1=%.6f dssim=%.6f reg=%.6f count=%d mean_opacity=%.4f",
                report.iteration, report.loss, report.l1, report.dssim, report.reg,
                report.count, report.mean_opacity,
            )
        return report

    def relocate(self):
        """Runs one relocation event and starts a fresh statistics window."""
        scores = sampling_score(
            normalize_grad_stat(self.grads.accum_grad2d),
            self.gaussians.opacities(),
            self.config.relocation,
        )
        report = relocate(self.gaussians, self.adam, scores, self.config.relocation, self.rng)
        self.grads.reset_statistics()
        progress_logger.info(
            "iter=%d relocated=%d dead=%d mean_target_score=%.4f",
            self.iteration, report.moved, report.dead, report.mean_target_score,
        )
        return report

    def run(self, iterations=None, callback=None):
        """Trains until ``iterations`` more steps or the budget is reached.

        Args:
            iterations: Step count; defaults to the remaining budget.
            callback: Optional ``callback(trainer, report)`` after every step.

        Returns:
            list: The `StepReport` of every step taken.
        """
        remaining = self.total_iters - self.iteration if iterations is None else iterations
        reports = []
        for _ in range(max(0, remaining)):
            report = self.train_step(self.sample_frame())
            reports.append(report)
            if callback is not None:
                callback(self, report)
        return reports
