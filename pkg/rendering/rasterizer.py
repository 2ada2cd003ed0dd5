"""Tile-based differentiable rasterizer for space-time Gaussians.

Forward: primitives are moved to time ``t``, projected, culled by temporal
opacity, base opacity and validity, binned into screen tiles by their 3-sigma
bound and depth-sorted per tile. Each tile is composited front to back as a
(pixels x splats) matrix: a splat's alpha is
``min(ceiling, opacity * temporal * exp(power))``, contributions under the
alpha floor are skipped, and a pixel stops at the first splat that would take
its transmittance under the stop threshold.

Backward: the per-tile contributor prefix (``n_contrib``) and the final
transmittance are kept as the compact per-pixel record; the backward pass
replays the alphas of that prefix and applies the chain rule through the
compositing, the screen-space Gaussian, the projection, the motion function,
the temporal opacity and the SH colour.

Tile partial buffers are merged into per-primitive buffers in tile order, so
results do not depend on the worker count.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from django.conf import settings

from gaussians.appearance import colors_vjp, eval_colors
from gaussians.primitives import FIELDS, temporal_opacity_vjp
from splatsystem.exceptions import NonFiniteParameterError, RenderMismatchError

from .projection import project_gaussians, projection_vjp


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RasterSettings:
    """Rasterizer constants.

    Attributes:
        tile_size: Square tile edge in pixels.
        temporal_threshold: Primitives with temporal opacity below this are culled.
        alpha_floor: Per-splat alphas below this are skipped; primitives whose
            base opacity is below it are culled.
        alpha_ceiling: Upper clamp on a splat's alpha.
        transmittance_stop: Compositing stops before transmittance drops below this.
        near: Near-plane depth.
        dilation: Screen-space low-pass dilation in px^2.
        deterministic: Process tiles sequentially.
        threads: Worker count when not deterministic.
    """
    tile_size: int = 16
    temporal_threshold: float = 0.05
    alpha_floor: float = 1.0 / 255.0
    alpha_ceiling: float = 0.999
    transmittance_stop: float = 1e-4
    near: float = 0.01
    dilation: float = 0.3
    deterministic: bool = True
    threads: int = 1

    @classmethod
    def from_settings(cls, **overrides):
        """Builds settings from ``SPLAT_DEFAULTS['raster']`` and ``SPLAT_THREADS``."""
        values = dict(settings.SPLAT_DEFAULTS['raster'])
        values['threads'] = settings.SPLAT_THREADS
        values.update(overrides)
        return cls(**values)

    def with_overrides(self, **overrides):
        return replace(self, **overrides)


class Tile(NamedTuple):
    index: int
    x0: int
    y0: int
    x1: int
    y1: int
    ids: np.ndarray  # primitive ids, ascending depth


class BinnedSplats(NamedTuple):
    """Result of `cull_and_bin`."""
    projection: object       # ProjectedSplats
    temporal: np.ndarray     # (N,) temporal opacity at t
    opacity: np.ndarray      # (N,) activated base opacity
    visible: np.ndarray      # (N,) bool, survived culling and hit a tile
    tiles: list
    tiles_x: int
    tiles_y: int
    tile_size: int


class TileRecord(NamedTuple):
    """Compact per-pixel record of one tile, row-major over the tile's pixels."""
    n_contrib: np.ndarray          # (P,) length of the contributing prefix
    final_transmittance: np.ndarray  # (P,)


@dataclass
class RenderOutput:
    """A rendered frame plus what the backward pass needs.

    Attributes:
        rgb: (H, W, 3) image.
        alpha: (H, W) accumulated opacity, ``1 - final transmittance``.
        records: One `TileRecord` per tile, in tile order.
        background: (3,) background colour.
        checksum: ``(set version, camera id, t)`` of the producing inputs.
        binned: The `BinnedSplats` used for compositing.
        colors: The `ColorEval` of every primitive.
    """
    rgb: np.ndarray
    alpha: np.ndarray
    records: list
    background: np.ndarray
    checksum: tuple
    binned: BinnedSplats
    colors: object
    raster: RasterSettings = field(default_factory=RasterSettings)

    def pixel_records(self, x, y):
        """Replays the compositing of one pixel.

        Args:
            x: Pixel column.
            y: Pixel row.

        Returns:
            list: ``(primitive id, compositing weight)`` in front-to-back order.
        """
        ts = self.binned.tile_size
        tile = self.binned.tiles[(y // ts) * self.binned.tiles_x + x // ts]
        if tile.ids.size == 0:
            return []
        width = tile.x1 - tile.x0
        pixel = (y - tile.y0) * width + (x - tile.x0)
        pix = np.array([[x, y]], dtype=self.rgb.dtype)
        record = self.records[tile.index]
        state = _tile_alphas(pix, tile.ids, self.binned, self.raster, record.n_contrib[pixel:pixel + 1])
        weights = state.alpha * state.t_before
        count = int(record.n_contrib[pixel])
        return [(int(i), float(w)) for i, w in zip(tile.ids[:count], weights[0, :count]) if w > 0]


@dataclass
class GradientSet:
    """Per-field gradients mirroring a `GaussianSet`, plus relocation statistics.

    Attributes:
        grads: Field name -> gradient array shaped like the field.
        accum_grad2d: (N, 1) running mean of the screen-space mean-gradient norm
            over the views that touched each primitive.
        accum_count: (N, 1) number of such views since the last reset.
    """
    grads: dict
    accum_grad2d: np.ndarray
    accum_count: np.ndarray

    @classmethod
    def zeros_for(cls, gaussians):
        count, dtype = gaussians.count, gaussians.dtype
        return cls(
            grads={name: np.zeros_like(array) for name, array in gaussians.arrays()},
            accum_grad2d=np.zeros((count, 1), dtype=dtype),
            accum_count=np.zeros((count, 1), dtype=dtype),
        )

    def __getitem__(self, name):
        return self.grads[name]

    def items(self):
        return ((name, self.grads[name]) for name in FIELDS)

    def clear_gradients(self):
        for array in self.grads.values():
            array.fill(0)

    def reset_statistics(self):
        self.accum_grad2d.fill(0)
        self.accum_count.fill(0)

    def record_screen_gradients(self, touched, norms):
        """Folds one view's screen-space gradient norms into the running mean."""
        self.accum_count[touched, 0] += 1
        count = self.accum_count[touched, 0]
        mean = self.accum_grad2d[touched, 0]
        self.accum_grad2d[touched, 0] = mean + (norms - mean) / count


def check_finite(gaussians):
    """Raises NonFiniteParameterError for the first NaN or infinite raw value."""
    for name, array in gaussians.arrays():
        bad = ~np.isfinite(array.reshape(array.shape[0], -1)).all(axis=1)
        if bad.any():
            raise NonFiniteParameterError(name, int(np.flatnonzero(bad)[0]))


def cull_and_bin(gaussians, cam, t, raster=None):
    """Culls primitives and assigns the survivors to screen tiles.

    A primitive is skipped when its temporal opacity at ``t`` is under the
    temporal threshold, its base opacity is under the alpha floor, or it is
    behind the near plane. Survivors go to every tile their 3-sigma screen
    bound touches, sorted by ascending depth within each tile.

    Args:
        gaussians: The `GaussianSet`.
        cam: `Camera`.
        t: Normalized time.
        raster: `RasterSettings`; the project defaults when omitted.

    Returns:
        BinnedSplats: Projection, activations and per-tile id lists.
    """
    raster = raster or RasterSettings.from_settings()
    ts = raster.tile_size
    tiles_x = -(-cam.width // ts)
    tiles_y = -(-cam.height // ts)

    proj = project_gaussians(gaussians, cam, t, raster.near, raster.dilation)
    temporal = gaussians.temporal_opacities(t) if gaussians.count else np.zeros(0, gaussians.dtype)
    opacity = gaussians.opacities()
    keep = (
        proj.valid
        & (temporal >= raster.temporal_threshold)
        & (opacity >= raster.alpha_floor)
        & (proj.radius > 0)
    )

    mx, my, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    with np.errstate(invalid='ignore'):
        rect_x0 = np.clip(np.floor((mx - r) / ts), 0, tiles_x).astype(np.int64)
        rect_x1 = np.clip(np.floor((mx + r) / ts) + 1, 0, tiles_x).astype(np.int64)
        rect_y0 = np.clip(np.floor((my - r) / ts), 0, tiles_y).astype(np.int64)
        rect_y1 = np.clip(np.floor((my + r) / ts) + 1, 0, tiles_y).astype(np.int64)
    keep &= (rect_x1 > rect_x0) & (rect_y1 > rect_y0)
    candidates = np.flatnonzero(keep)

    tiles = []
    visible = np.zeros(gaussians.count, dtype=bool)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            c = candidates
            hit = c[(rect_x0[c] <= tx) & (tx < rect_x1[c]) & (rect_y0[c] <= ty) & (ty < rect_y1[c])]
            ids = hit[np.argsort(proj.depth[hit], kind='stable')]
            visible[ids] = True
            tiles.append(Tile(
                index=ty * tiles_x + tx,
                x0=tx * ts, y0=ty * ts,
                x1=min((tx + 1) * ts, cam.width), y1=min((ty + 1) * ts, cam.height),
                ids=ids,
            ))
    return BinnedSplats(proj, temporal, opacity, visible, tiles, tiles_x, tiles_y, ts)


def _tile_pixels(tile, dtype):
    ys, xs = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)


class _TileState(NamedTuple):
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    active: np.ndarray   # alpha passes the floor and is not clamped
    alpha: np.ndarray    # alphas actually composited (zero outside the prefix)
    t_before: np.ndarray
    t_final: np.ndarray
    include: np.ndarray


def _tile_alphas(pix, ids, binned, raster, n_contrib=None):
    """Alpha matrix of one tile; replays a stored prefix when ``n_contrib`` is given."""
    proj = binned.projection
    base = binned.opacity[ids] * binned.temporal[ids]
    mean = proj.mean2d[ids]
    a, b, c = proj.conic[ids, 0], proj.conic[ids, 1], proj.conic[ids, 2]
    dx = pix[:, 0:1] - mean[None, :, 0]
    dy = pix[:, 1:2] - mean[None, :, 1]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(np.minimum(power, 0.0))
    raw = base * gauss
    alpha = np.minimum(raw, raster.alpha_ceiling)
    passes = (alpha >= raster.alpha_floor) & (power <= 0)
    alpha = np.where(passes, alpha, 0.0)
    if n_contrib is None:
        include = np.cumprod(1.0 - alpha, axis=1) >= raster.transmittance_stop
    else:
        include = np.arange(ids.size)[None, :] < n_contrib[:, None]
    alpha = alpha * include
    t_after = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones_like(t_after[:, :1]), t_after[:, :-1]], axis=1)
    active = passes & include & (raw < raster.alpha_ceiling)
    return _TileState(dx, dy, gauss, active, alpha, t_before, t_after[:, -1], include)


def _forward_tile(tile, binned, colors, background, raster, dtype):
    pix = _tile_pixels(tile, dtype)
    if tile.ids.size == 0:
        count = pix.shape[0]
        rgb = np.broadcast_to(background, (count, 3)).astype(dtype)
        return rgb, np.ones(count, dtype=dtype), np.zeros(count, dtype=np.int64)
    state = _tile_alphas(pix, tile.ids, binned, raster)
    weights = state.alpha * state.t_before
    rgb = weights @ colors[tile.ids] + state.t_final[:, None] * background
    return rgb, state.t_final, state.include.sum(axis=1)


def _map_tiles(fn, tiles, raster):
    if raster.deterministic or raster.threads <= 1:
        return [fn(tile) for tile in tiles]
    with ThreadPoolExecutor(max_workers=raster.threads) as pool:
        return list(pool.map(fn, tiles))


def render_forward(gaussians, cam, t, background, raster=None):
    """Renders the set from ``cam`` at time ``t``.

    Args:
        gaussians: The `GaussianSet`; read-only during the pass.
        cam: `Camera`.
        t: Normalized time; any real value is accepted.
        background: RGB 3-vector.
        raster: `RasterSettings`; the project defaults when omitted.

    Returns:
        RenderOutput: Image, alpha map and replay records.

    Raises:
        NonFiniteParameterError: If any raw parameter is NaN or infinite.
    """
    raster = raster or RasterSettings.from_settings()
    check_finite(gaussians)
    dtype = gaussians.dtype
    background = np.asarray(background, dtype=dtype)
    t = float(t)

    binned = cull_and_bin(gaussians, cam, t, raster)
    colors = eval_colors(binned.projection.moved, cam.center.astype(dtype), gaussians.sh_coeffs, gaussians.sh_degree)

    rgb = np.empty((cam.height, cam.width, 3), dtype=dtype)
    alpha = np.empty((cam.height, cam.width), dtype=dtype)
    results = _map_tiles(
        lambda tile: _forward_tile(tile, binned, colors.colors, background, raster, dtype),
        binned.tiles, raster,
    )
    records = []
    for tile, (tile_rgb, t_final, n_contrib) in zip(binned.tiles, results):
        h, w = tile.y1 - tile.y0, tile.x1 - tile.x0
        rgb[tile.y0:tile.y1, tile.x0:tile.x1] = tile_rgb.reshape(h, w, 3)
        alpha[tile.y0:tile.y1, tile.x0:tile.x1] = (1.0 - t_final).reshape(h, w)
        records.append(TileRecord(n_contrib, t_final))
    logger.debug("Rendered camera %s at t=%.4f: %d of %d primitives visible.",
                 cam.id, t, int(binned.visible.sum()), gaussians.count)

    return RenderOutput(
        rgb=rgb, alpha=alpha, records=records, background=background,
        checksum=(gaussians.version, cam.id, t),
        binned=binned, colors=colors, raster=raster,
    )


def _backward_tile(tile, record, d_rgb, binned, colors, background, raster, dtype):
    ids = tile.ids
    if ids.size == 0:
        return None
    h, w = tile.y1 - tile.y0, tile.x1 - tile.x0
    pix = _tile_pixels(tile, dtype)
    d_pix = d_rgb[tile.y0:tile.y1, tile.x0:tile.x1].reshape(h * w, 3)
    state = _tile_alphas(pix, ids, binned, raster, record.n_contrib)
    col = colors[ids]

    weights = state.alpha * state.t_before
    d_col = weights.T @ d_pix

    contrib = weights[:, :, None] * col[None, :, :]
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    behind = suffix + state.t_final[:, None, None] * background
    d_alpha = (
        state.t_before * (col[None] @ d_pix[:, :, None])[:, :, 0]
        - np.einsum('pkc,pc->pk', behind, d_pix) / (1.0 - state.alpha)
    )
    d_raw = np.where(state.active, d_alpha, 0.0)

    base = binned.opacity[ids] * binned.temporal[ids]
    d_base = np.sum(d_raw * state.gauss, axis=0)
    d_power = d_raw * base * state.gauss

    a, b, c = (binned.projection.conic[ids, k] for k in range(3))
    dx, dy = state.dx, state.dy
    d_mean = np.stack([
        np.sum(d_power * (a * dx + b * dy), axis=0),
        np.sum(d_power * (b * dx + c * dy), axis=0),
    ], axis=1)
    d_conic = np.stack([
        np.sum(-0.5 * dx * dx * d_power, axis=0),
        np.sum(-dx * dy * d_power, axis=0),
        np.sum(-0.5 * dy * dy * d_power, axis=0),
    ], axis=1)
    return ids, d_col, d_base, d_mean, d_conic


def render_backward(gaussians, cam, t, out, dL_drgb, grads=None):
    """Backpropagates an image gradient to every raw parameter.

    Args:
        gaussians: The `GaussianSet` passed to `render_forward`.
        cam: The same `Camera`.
        t: The same time.
        out: The `RenderOutput` of that forward pass.
        dL_drgb: (H, W, 3) gradient of the loss w.r.t. ``out.rgb``.
        grads: Optional `GradientSet` to accumulate into.

    Returns:
        GradientSet: Accumulated gradients and screen-gradient statistics.

    Raises:
        RenderMismatchError: If ``out`` was produced from different inputs.
    """
    if out.checksum != (gaussians.version, cam.id, float(t)):
        raise RenderMismatchError(
            f"Render output {out.checksum} does not match inputs "
            f"{(gaussians.version, cam.id, float(t))}."
        )
    t = float(t)
    raster = out.raster
    dtype = gaussians.dtype
    count = gaussians.count
    grads = grads if grads is not None else GradientSet.zeros_for(gaussians)
    binned, colors = out.binned, out.colors
    d_rgb = np.asarray(dL_drgb, dtype=dtype)

    d_col = np.zeros((count, 3), dtype=dtype)
    d_base = np.zeros(count, dtype=dtype)
    d_mean = np.zeros((count, 2), dtype=dtype)
    d_conic = np.zeros((count, 3), dtype=dtype)
    partials = _map_tiles(
        lambda pair: _backward_tile(pair[0], pair[1], d_rgb, binned, colors.colors, out.background, raster, dtype),
        list(zip(binned.tiles, out.records)), raster,
    )
    for partial in partials:
        if partial is None:
            continue
        ids, p_col, p_base, p_mean, p_conic = partial
        np.add.at(d_col, ids, p_col)
        np.add.at(d_base, ids, p_base)
        np.add.at(d_mean, ids, p_mean)
        np.add.at(d_conic, ids, p_conic)

    opacity, temporal = binned.opacity, binned.temporal
    d_sh, d_moved_color = colors_vjp(colors, gaussians.sh_coeffs, gaussians.sh_degree, d_col)
    d_moved_proj, d_scale, d_orient = projection_vjp(gaussians, cam, binned.projection, d_mean, d_conic)
    d_moved = d_moved_color + d_moved_proj
    d_time_temporal, d_duration = temporal_opacity_vjp(
        gaussians.times(), gaussians.durations(), t, temporal, d_base * opacity,
    )

    offset = t - gaussians.time_raw
    g = grads.grads
    g['position_raw'] += d_moved
    g['velocity'] += d_moved * offset
    g['time_raw'][:, 0] += d_time_temporal - np.sum(gaussians.velocity * d_moved, axis=1)
    g['duration_raw'][:, 0] += d_duration
    g['scale_raw'] += d_scale
    g['orientation_raw'] += d_orient
    g['opacity_raw'][:, 0] += d_base * temporal * opacity * (1.0 - opacity)
    g['sh_coeffs'] += d_sh

    touched = np.flatnonzero(binned.visible)
    grads.record_screen_gradients(touched, np.linalg.norm(d_mean[touched], axis=1))
    return grads
