"""Per-actor appearance features: backbone, RoIAlign, mask filtering, projection.

Coordinate conventions
----------------------
Image coordinates are continuous with the origin at the top-left corner, so
pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)`` and has its center at
``(c + 0.5, r + 0.5)``. A box is mapped to feature-map coordinates by
multiplying with ``spatial_scale`` (no rounding), and a point ``u`` in those
coordinates is interpolated at index position ``u - 0.5`` so that feature
pixel centers sit at integer index positions.

Mask filtering multiplies each RoI bin by the fraction of that bin covered
by the actor mask. This is how "convolving" the binary mask with the RoI
feature map is realised here: it suppresses background inside the box,
whereas an actual convolution with a 0/1 raster would not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .scene import BinaryMask, BoundingBox, SceneSample
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureConfig:
    channels: tuple = (8, 16, 16)
    P: int = 5
    samples: int = 2
    pool: str = "avg"
    d: int = 64
    use_masks: bool = True
    in_channels: int = 3
    # test-only: multiply the gradient flowing out of X by this factor
    grad_fault: float = 1.0

    def validate(self) -> None:
        if not self.channels or any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"backbone.channels must be positive integers, got {self.channels}")
        if self.P < 1 or self.samples < 1:
            raise ConfigError(f"roi.P and roi.samples must be >= 1, got {self.P}, {self.samples}")
        if self.pool not in ("avg", "max"):
            raise ConfigError(f"roi.pool must be 'avg' or 'max', got {self.pool!r}")
        if self.d < 1:
            raise ConfigError(f"embed.d must be >= 1, got {self.d}")

    @property
    def spatial_scale(self) -> float:
        return 1.0 / (2 ** len(self.channels))

    @property
    def roi_dim(self) -> int:
        return int(self.channels[-1]) * self.P * self.P


@dataclass
class FeatureMap:
    tensor: Tensor
    spatial_scale: float

    def __post_init__(self):
        if not self.spatial_scale > 0:
            raise ConfigError(f"spatial_scale must be > 0, got {self.spatial_scale}")


@dataclass
class ActorFeatureMatrix:
    """Rows are actors ordered by (frame, annotation order)."""

    X: Tensor
    positions: np.ndarray
    frame_index: np.ndarray
    actor_ids: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return int(self.X.shape[0])

    def permuted(self, perm: Sequence[int]) -> "ActorFeatureMatrix":
        perm = np.asarray(perm)
        x = Tensor._from_op(self.X.data[perm], (), None, "permute")
        return ActorFeatureMatrix(
            x, self.positions[perm], self.frame_index[perm], [self.actor_ids[i] for i in perm]
        )


# ------------------------------------------------------------------ params


def init_feature_params(cfg: FeatureConfig, rng: np.random.Generator) -> dict:
    params = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels):
        fan_in = cin * 9
        bound = np.sqrt(6.0 / fan_in)
        params[f"backbone.conv{i}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)), requires_grad=True)
        params[f"backbone.conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    bound = 1.0 / np.sqrt(cfg.roi_dim)
    params["embed.weight"] = Tensor(rng.uniform(-bound, bound, (cfg.roi_dim, cfg.d)), requires_grad=True)
    params["embed.bias"] = Tensor(np.zeros(cfg.d), requires_grad=True)
    return params


# ---------------------------------------------------------------- backbone


def backbone_forward(image, params: Mapping[str, Tensor], cfg: FeatureConfig) -> FeatureMap:
    """Stack of 3x3 stride-2 convolutions (padding 1) with ReLU between them.

    ``image`` is C x H x W or B x C x H x W (array or Tensor). The output
    has spatial scale ``1 / 2**layers``.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    h, w = x.shape[-2:]
    need = 2 ** len(cfg.channels)
    if h < need or w < need:
        raise ConfigError(f"image {h}x{w} too small for a {len(cfg.channels)}-layer backbone (need >= {need})")
    n = len(cfg.channels)
    for i in range(n):
        wgt = params[f"backbone.conv{i}.weight"]
        b = params[f"backbone.conv{i}.bias"]
        x = T.conv2d(x, wgt, stride=2, padding=1)
        x = x + T.reshape(b, (-1, 1, 1))
        if i < n - 1:
            x = T.relu(x)
    return FeatureMap(x, cfg.spatial_scale)


# ---------------------------------------------------------------- sampling


def _axis_taps(u: np.ndarray, n: int):
    """Lower index, upper index, and their weights for 1-D linear interpolation.

    ``u`` is in index coordinates (pixel centers at integers); it is clamped to
    the border centers first.
    """
    u = np.clip(u, 0.0, n - 1.0)
    if n == 1:
        lo = np.zeros(u.shape, dtype=np.int64)
        return lo, lo, np.ones_like(u), np.zeros_like(u)
    lo = np.minimum(np.floor(u).astype(np.int64), n - 2)
    frac = u - lo
    return lo, lo + 1, 1.0 - frac, frac


def bilinear_taps(x: float, y: float, height: int, width: int):
    """The four (row, col) neighbours of a point and their weights."""
    x0, x1, wx0, wx1 = _axis_taps(np.asarray(float(x)), width)
    y0, y1, wy0, wy1 = _axis_taps(np.asarray(float(y)), height)
    rows = (int(y0), int(y0), int(y1), int(y1))
    cols = (int(x0), int(x1), int(x0), int(x1))
    weights = (float(wy0 * wx0), float(wy0 * wx1), float(wy1 * wx0), float(wy1 * wx1))
    return rows, cols, weights


def bilinear(featmap: FeatureMap, channel: int, x: float, y: float) -> float:
    """Interpolated value at index position (x, y); pixel centers are at integers.

    Points outside the map are clamped to the nearest border center.
    """
    data = featmap.tensor.data
    if data.ndim == 4:
        data = data[0]
    rows, cols, weights = bilinear_taps(x, y, data.shape[1], data.shape[2])
    return float(sum(w * data[channel, r, c] for r, c, w in zip(rows, cols, weights)))


def sample_grid(box: BoundingBox, scale: float, P: int, s: int):
    """Index-space x and y coordinates of the P*s regular sample points per axis."""
    fx1, fx2 = box.x1 * scale, box.x2 * scale
    fy1, fy2 = box.y1 * scale, box.y2 * scale
    if fx2 - fx1 < 1e-6 or fy2 - fy1 < 1e-6:
        raise DataError(f"degenerate box {box.as_list()} at spatial scale {scale}")
    t = (np.arange(P * s) + 0.5) / s
    xs = fx1 + (fx2 - fx1) / P * t - 0.5
    ys = fy1 + (fy2 - fy1) / P * t - 0.5
    return xs, ys


def _sampling_matrix(boxes, frame_index, scale, P, s, n_frames, H, W) -> sp.csr_matrix:
    """Sparse (N*(P*s)**2) x (n_frames*H*W) matrix of bilinear weights."""
    m = P * s
    rows_idx, cols_idx, vals = [], [], []
    base = np.arange(m * m).reshape(m, m)
    for n, (box, f) in enumerate(zip(boxes, frame_index)):
        xs, ys = sample_grid(box, scale, P, s)
        x0, x1, wx0, wx1 = _axis_taps(xs, W)
        y0, y1, wy0, wy1 = _axis_taps(ys, H)
        off = int(f) * H * W
        row = (n * m * m + base)[:, :, None]
        cols = np.stack(
            [
                y0[:, None] * W + x0[None, :],
                y0[:, None] * W + x1[None, :],
                y1[:, None] * W + x0[None, :],
                y1[:, None] * W + x1[None, :],
            ],
            axis=-1,
        ) + off
        w = np.stack(
            [
                wy0[:, None] * wx0[None, :],
                wy0[:, None] * wx1[None, :],
                wy1[:, None] * wx0[None, :],
                wy1[:, None] * wx1[None, :],
            ],
            axis=-1,
        )
        rows_idx.append(np.broadcast_to(row, cols.shape).reshape(-1))
        cols_idx.append(cols.reshape(-1))
        vals.append(w.reshape(-1))
    shape = (len(boxes) * m * m, n_frames * H * W)
    # coo -> csr sums duplicate entries (clamped taps), keeping row order fixed
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows_idx), np.concatenate(cols_idx))), shape=shape)
    return mat.tocsr()


def roi_align_many(
    featmap: FeatureMap,
    boxes: Sequence[BoundingBox],
    frame_index: Sequence[int] | None = None,
    P: int = 5,
    s: int = 2,
    pool: str = "avg",
) -> Tensor:
    """RoIAlign for several boxes over a (B x) C x H x W map -> N x C x P x P."""
    if P < 1 or s < 1:
        raise ConfigError(f"RoIAlign needs P >= 1 and s >= 1, got P={P}, s={s}")
    if pool not in ("avg", "max"):
        raise ConfigError(f"pool must be 'avg' or 'max', got {pool!r}")
    x = featmap.tensor
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    B, C, H, W = data.shape
    if frame_index is None:
        frame_index = [0] * len(boxes)
    if len(frame_index) != len(boxes):
        raise DimensionError(f"{len(boxes)} boxes but {len(frame_index)} frame indices")
    if any(not 0 <= int(f) < B for f in frame_index):
        raise DimensionError(f"frame index out of range for a map with {B} frames")
    S = _sampling_matrix(boxes, frame_index, featmap.spatial_scale, P, s, B, H, W)
    N, m = len(boxes), P * s
    flat = data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    samples = (S @ flat).reshape(N, P, s, P, s, C)
    if pool == "avg":
        out = samples.mean(axis=(2, 4))
    else:
        blocks = samples.transpose(0, 1, 3, 5, 2, 4).reshape(N, P, P, C, s * s)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0].transpose(0, 1, 2, 3)
    y = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gp = g.transpose(0, 2, 3, 1)  # N, P, P, C
        if pool == "avg":
            gs = np.broadcast_to((gp / (s * s))[:, :, None, :, None, :], (N, P, s, P, s, C))
        else:
            gb = np.zeros((N, P, P, C, s * s))
            np.put_along_axis(gb, arg[..., None], gp[..., None], axis=-1)
            gs = gb.reshape(N, P, P, C, s, s).transpose(0, 1, 4, 2, 5, 3)
        gflat = S.T @ np.ascontiguousarray(gs).reshape(N * m * m, C)
        gx = gflat.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        return (gx[0] if single else gx,)

    return Tensor._from_op(y, (x,), backward, "roi_align")


def roi_align(featmap: FeatureMap, box: BoundingBox, P: int = 5, s: int = 2, pool: str = "avg") -> Tensor:
    """RoIAlign of one box over a C x H x W map -> C x P x P."""
    if featmap.tensor.ndim != 3:
        raise DimensionError("roi_align expects a C x H x W map; use roi_align_many for stacks")
    return T.reshape(roi_align_many(featmap, [box], None, P, s, pool), (-1, P, P))


# -------------------------------------------------------------------- masks


def mask_to_grid(mask: BinaryMask, box: BoundingBox, P: int = 5, s: int = 2) -> np.ndarray:
    """Fractional mask coverage per RoI bin (P x P, values in [0, 1]).

    The 0/1 raster is sampled bilinearly at the same points RoIAlign uses,
    expressed in image pixels, and averaged per bin.
    """
    bits = mask.bits.astype(np.float64)
    xs, ys = sample_grid(box, 1.0, P, s)
    x0, x1, wx0, wx1 = _axis_taps(xs, mask.width)
    y0, y1, wy0, wy1 = _axis_taps(ys, mask.height)
    vals = (
        wy0[:, None] * wx0[None, :] * bits[y0[:, None], x0[None, :]]
        + wy0[:, None] * wx1[None, :] * bits[y0[:, None], x1[None, :]]
        + wy1[:, None] * wx0[None, :] * bits[y1[:, None], x0[None, :]]
        + wy1[:, None] * wx1[None, :] * bits[y1[:, None], x1[None, :]]
    )
    grid = vals.reshape(P, s, P, s).mean(axis=(1, 3))
    return np.clip(grid, 0.0, 1.0)


def mask_filter(roi_feat: Tensor, mask_grid) -> Tensor:
    """Scale every channel of each RoI bin by the mask coverage of that bin."""
    g = np.asarray(mask_grid.data if isinstance(mask_grid, Tensor) else mask_grid, dtype=np.float64)
    if roi_feat.ndim == 3:
        if g.shape != roi_feat.shape[1:]:
            raise DimensionError(f"mask grid {g.shape} does not match RoI features {roi_feat.shape}")
        g = g[None]
    elif roi_feat.ndim == 4:
        if g.shape != (roi_feat.shape[0],) + roi_feat.shape[2:]:
            raise DimensionError(f"mask grids {g.shape} do not match RoI features {roi_feat.shape}")
        g = g[:, None]
    else:
        raise DimensionError(f"mask_filter expects C x P x P or N x C x P x P, got {roi_feat.shape}")
    return T.mul(roi_feat, Tensor._from_op(g, (), None, "const"))


# ----------------------------------------------------------------- assembly


def build_actor_matrix(sample: SceneSample, params: Mapping[str, Tensor], cfg: FeatureConfig) -> ActorFeatureMatrix:
    """X (N x d) for every actor of every frame of ``sample``."""
    images = np.stack([fr.image for fr in sample.frames])
    fmap = backbone_forward(images, params, cfg)
    boxes, frames, ids, grids = [], [], [], []
    for fi, fr in enumerate(sample.frames):
        for a in fr.actors:
            boxes.append(a.bbox)
            frames.append(fi)
            ids.append(a.actor_id)
            if cfg.use_masks and a.mask is not None:
                grids.append(mask_to_grid(a.mask, a.bbox, cfg.P, cfg.samples))
            else:
                grids.append(None)
    roi = roi_align_many(fmap, boxes, frames, cfg.P, cfg.samples, cfg.pool)
    if any(g is not None for g in grids):
        ones = np.ones((cfg.P, cfg.P))
        roi = mask_filter(roi, np.stack([ones if g is None else g for g in grids]))
    flat = T.reshape(roi, (len(boxes), -1))
    X = T.matmul(flat, params["embed.weight"]) + params["embed.bias"]
    if cfg.grad_fault != 1.0:
        X = T.scale_grad(X, cfg.grad_fault)
    positions = np.array([b.center for b in boxes], dtype=np.float64)
    return ActorFeatureMatrix(X, positions, np.asarray(frames, dtype=np.int64), ids)
