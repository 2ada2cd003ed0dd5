"""Training losses and image-quality metrics.

The rendering loss is ``lambda_img * L1 + lambda_ssim * (1 - SSIM) / 2``; the
perceptual term is not available and its weight must stay zero. SSIM uses an
11x11 Gaussian window (sigma 1.5) over the valid region only, so no padding
convention is involved. Images smaller than the window use the largest odd
window that fits.
"""
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy import signal

from splatsystem.exceptions import NonFiniteLossError, ShapeMismatchError


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the training objective.

    Attributes:
        lambda_img: L1 image-loss weight.
        lambda_ssim: SSIM-loss weight.
        lambda_perc: Perceptual-loss weight; pinned to zero.
        lambda_reg: Weight of the temporal-opacity-weighted opacity penalty.
        reg_end_fraction: Training fraction during which the penalty is fully on.
        reg_decay_fraction: Fraction over which it then decays linearly to zero.
    """
    lambda_img: float = 0.8
    lambda_ssim: float = 0.2
    lambda_perc: float = 0.0
    lambda_reg: float = 1e-2
    reg_end_fraction: float = 0.5
    reg_decay_fraction: float = 0.1

    def check(self):
        """Raises ValidationError for negative weights or a nonzero perceptual weight."""
        for name, value in vars(self).items():
            if value < 0:
                raise ValidationError(f"Loss weight '{name}' must be non-negative, got {value}.")
        if self.lambda_perc != 0:
            raise ValidationError("The perceptual loss is not available; lambda_perc must be 0.")

    def reg_scale(self, progress):
        """Regularization weight multiplier at a training fraction in [0, 1]."""
        if progress < self.reg_end_fraction:
            return 1.0
        if self.reg_decay_fraction <= 0:
            return 0.0
        return float(max(0.0, 1.0 - (progress - self.reg_end_fraction) / self.reg_decay_fraction))


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeMismatchError(pred.shape, gt.shape)


def _as_channels(image):
    return image[:, :, None] if image.ndim == 2 else image


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalised 2D Gaussian window."""
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_for(shape):
    size = min(SSIM_WINDOW, shape[0], shape[1])
    if size % 2 == 0:
        size -= 1
    return gaussian_window(size)[:, :, None]


def _filter(image, window):
    return signal.convolve(image, window, mode='valid', method='direct')


def _filter_adjoint(grad, window):
    return signal.convolve(grad, window, mode='full', method='direct')


def _ssim_terms(pred, gt, data_range):
    window = _window_for(pred.shape)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter(pred, window), _filter(gt, window)
    e_xx, e_yy, e_xy = _filter(pred * pred, window), _filter(gt * gt, window), _filter(pred * gt, window)
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * (e_xy - mu_x * mu_y) + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = (e_xx - mu_x * mu_x) + (e_yy - mu_y * mu_y) + c2
    ssim_map = (a1 * a2) / (b1 * b2)
    return window, ssim_map, mu_x, mu_y, a1, a2, b1, b2


def ssim(pred, gt, data_range=1.0):
    """Mean SSIM over the valid region and all channels.

    Raises:
        ShapeMismatchError: If the images differ in shape.
    """
    _check_pair(pred, gt)
    pred, gt = _as_channels(np.asarray(pred, dtype=np.float64)), _as_channels(np.asarray(gt, dtype=np.float64))
    return float(np.mean(_ssim_terms(pred, gt, data_range)[1]))


def ssim_and_grad(pred, gt, data_range=1.0):
    """Mean SSIM and its gradient w.r.t. ``pred``, both computed in float64.

    Returns:
        tuple: ``(ssim value, gradient shaped like pred)``; the gradient has
        ``pred``'s dtype.
    """
    _check_pair(pred, gt)
    shape, dtype = pred.shape, np.result_type(pred, np.float32)
    x = _as_channels(np.asarray(pred, dtype=np.float64))
    y = _as_channels(np.asarray(gt, dtype=np.float64))
    window, ssim_map, mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, data_range)
    scale = 1.0 / ssim_map.size
    # The contrast term a2 crosses zero for anti-correlated windows; never divide by it.
    inv = 1.0 / (b1 * b2)
    g_mu = scale * (2 * mu_y * (a2 - a1) * inv - 2 * mu_x * ssim_map / b1 + 2 * mu_x * ssim_map / b2)
    g_xx = scale * (-ssim_map / b2)
    g_xy = scale * (2 * a1 * inv)
    grad = (_filter_adjoint(g_mu, window)
            + 2 * x * _filter_adjoint(g_xx, window)
            + y * _filter_adjoint(g_xy, window))
    return float(np.mean(ssim_map)), grad.reshape(shape).astype(dtype)


def loss_render(pred, gt, weights):
    """Rendering loss and its gradient image.

    Args:
        pred: (H, W, 3) rendered image.
        gt: (H, W, 3) reference image in [0, 1].
        weights: `LossWeights`.

    Returns:
        tuple: ``(loss, dL/dpred, terms)`` where ``terms`` holds the
        unweighted ``l1`` and ``dssim`` values.

    Raises:
        ShapeMismatchError: If the images differ in shape.
        NonFiniteLossError: If the loss or its gradient is not finite.
    """
    _check_pair(pred, gt)
    diff = pred - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = weights.lambda_img * np.sign(diff) / diff.size
    dssim = 0.0
    if weights.lambda_ssim:
        value, d_ssim = ssim_and_grad(pred, gt)
        dssim = (1.0 - value) / 2.0
        grad = grad - 0.5 * weights.lambda_ssim * d_ssim
    loss = weights.lambda_img * l1 + weights.lambda_ssim * dssim
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteLossError("Rendering loss or its image gradient is not finite.")
    return loss, grad.astype(pred.dtype), {'l1': l1, 'dssim': dssim}


def loss_reg(gaussians, t):
    """Mean of opacity times temporal opacity, the latter held constant.

    Args:
        gaussians: The `GaussianSet`.
        t: Time of the observed frame.

    Returns:
        tuple: ``(loss, d_opacity_raw)``; the gradient is (N, 1) and flows
        only into the opacity logits.
    """
    count = gaussians.count
    if count == 0:
        return 0.0, np.zeros((0, 1), dtype=gaussians.dtype)
    opacity = gaussians.opacities()
    weight = gaussians.temporal_opacities(t)
    loss = float(np.sum(opacity * weight) / count)
    d_raw = weight * opacity * (1.0 - opacity) / count
    return loss, d_raw[:, None].astype(gaussians.dtype)


def metric_psnr(pred, gt, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical images."""
    _check_pair(pred, gt)
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def metric_dssim(pred, gt, variant=1):
    """Structural dissimilarity ``(1 - SSIM) / 2``.

    Args:
        pred: Image.
        gt: Reference image.
        variant: 1 for data range 1.0, 2 for data range 2.0.

    Returns:
        float: DSSIM; lower is better.
    """
    if variant not in (1, 2):
        raise ValidationError(f"DSSIM variant must be 1 or 2, got {variant}.")
    return (1.0 - ssim(pred, gt, data_range=float(variant))) / 2.0


def apply_mask(pred, gt, mask):
    """Crops both images to the mask's bounding box and zeroes outside the mask.

    Returns:
        tuple: ``(pred, gt)`` cropped and masked, or None for an empty mask.
    """
    _check_pair(pred[..., 0], mask)
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    box = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    inside = mask[box][:, :, None] > 0
    return np.where(inside, pred[box], 0.0), np.where(inside, gt[box], 0.0)


def evaluate_pair(pred, gt):
    """Flat metric record for one image pair."""
    return {
        'psnr': metric_psnr(pred, gt),
        'dssim1': metric_dssim(pred, gt, 1),
        'dssim2': metric_dssim(pred, gt, 2),
    }
