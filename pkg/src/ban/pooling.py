"""RoI pooling over feature maps, in plain and position-sensitive modes.

Both modes scale an RoI given in image coordinates by `spatial_scale`
(feature cells per image pixel), split it into a k x k grid, and derive
each bin's integer cell window by flooring the start and ceiling the
end of the bin, clamped to the feature extent.  Bins may overlap when
the scaled RoI spans fewer than k cells, and a bin clamped to nothing
outputs 0 with zero gradient.  Feature content strictly outside the
clamped RoI never influences the output.

Plain mode takes the max of every channel inside each bin (ties go to
the first cell in row-major scan order).  Position-sensitive mode
averages one dedicated channel per (group, bin) slot: channel
g*k*k + i*k + j feeds bin (i, j) of group g.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .geometry import Box
from .tensor import Op, Tensor


class PoolMode(Enum):
    ROI = "roi"
    PSROI = "psroi"


@dataclass(frozen=True)
class PoolSpec:
    """Bin resolution k (1..7), feature cells per image pixel, and mode."""

    k: int
    spatial_scale: float
    mode: PoolMode

    def __post_init__(self):
        if not 1 <= self.k <= 7:
            raise ConfigError(f"pool resolution k={self.k} outside [1, 7]")
        if not self.spatial_scale > 0:
            raise ConfigError(f"spatial_scale must be positive, got {self.spatial_scale}")
        if not isinstance(self.mode, PoolMode):
            raise ConfigError(f"bad pool mode {self.mode!r}")


def _bin_windows(corners: np.ndarray, k: int, scale: float, h: int, w: int):
    """Integer bin windows for scaled RoIs: ([R,k] starts/ends per axis)."""
    if corners.ndim != 2 or corners.shape[1] != 4:
        raise DimensionError(f"RoI array must be [R, 4], got {corners.shape}")
    x1 = corners[:, 0] * scale
    y1 = corners[:, 1] * scale
    x2 = corners[:, 2] * scale
    y2 = corners[:, 3] * scale
    if np.any(corners[:, 2] <= corners[:, 0]) or np.any(corners[:, 3] <= corners[:, 1]):
        raise GeometryError("RoI with non-positive extent")
    steps = np.arange(k + 1, dtype=np.float64)
    # edge e of the grid sits at start + e*(extent/k)
    xe = x1[:, None] + steps[None, :] * ((x2 - x1) / k)[:, None]
    ye = y1[:, None] + steps[None, :] * ((y2 - y1) / k)[:, None]
    x0 = np.clip(np.floor(xe[:, :-1]), 0, w).astype(np.int64)
    xL = np.clip(np.ceil(xe[:, 1:]), 0, w).astype(np.int64)
    y0 = np.clip(np.floor(ye[:, :-1]), 0, h).astype(np.int64)
    yL = np.clip(np.ceil(ye[:, 1:]), 0, h).astype(np.int64)
    return y0, yL, x0, xL


class _PsRoiPool(Op):
    name = "psroi_pool"

    def __init__(self, features, state):
        super().__init__(features)
        self.state = state

    def backward(self, grad):
        feats = self.inputs[0]
        if not feats.requires_grad:
            return [None]
        c, h, w, ch_idx, y0, y1, x0, x1, counts = self.state
        r = grad.shape[0]
        g = grad / np.maximum(counts, 1)
        g = np.where(counts > 0, g, 0.0)
        k = ch_idx.shape[1]
        groups = ch_idx.shape[0]
        # adjoint of the integral-image gather: scatter signed corner
        # weights, then suffix-sum both spatial axes
        chn = np.broadcast_to(ch_idx[None], (r, groups, k, k))
        ya = np.broadcast_to(y0[:, None, :, None], chn.shape)
        yb = np.broadcast_to(y1[:, None, :, None], chn.shape)
        xa = np.broadcast_to(x0[:, None, None, :], chn.shape)
        xb = np.broadcast_to(x1[:, None, None, :], chn.shape)
        plane = (h + 1) * (w + 1)
        base = chn.ravel() * plane
        idx = np.concatenate(
            [
                base + yb.ravel() * (w + 1) + xb.ravel(),
                base + ya.ravel() * (w + 1) + xb.ravel(),
                base + yb.ravel() * (w + 1) + xa.ravel(),
                base + ya.ravel() * (w + 1) + xa.ravel(),
            ]
        )
        gv = g.ravel()
        weights = np.concatenate([gv, -gv, -gv, gv])
        # bincount accumulates in index order, keeping runs bit-reproducible
        d = np.bincount(idx, weights=weights, minlength=c * plane)
        d = d.reshape(c, h + 1, w + 1)
        s = np.flip(np.cumsum(np.flip(d, 1), axis=1), 1)
        s = np.flip(np.cumsum(np.flip(s, 2), axis=2), 2)
        return [s[:, 1:, 1:]]


def psroi_pool_rois(features: Tensor, corners: np.ndarray, spec: PoolSpec) -> Tensor:
    """Position-sensitive pooling of many RoIs: [C,H,W] -> [R, C/k^2, k, k]."""
    if spec.mode is not PoolMode.PSROI:
        raise ConfigError("psroi_pool called with a non-PSROI spec")
    if features.ndim != 3:
        raise DimensionError(f"features must be [C,H,W], got {features.shape}")
    c, h, w = features.shape
    k = spec.k
    if c % (k * k) != 0:
        raise DimensionError(
            f"{c} channels cannot be split into groups of k*k={k * k}"
        )
    groups = c // (k * k)
    corners = np.asarray(corners, dtype=np.float64)
    y0, y1, x0, x1 = _bin_windows(corners, k, spec.spatial_scale, h, w)
    integral = np.zeros((c, h + 1, w + 1), dtype=features.data.dtype)
    integral[:, 1:, 1:] = features.data.cumsum(axis=1).cumsum(axis=2)
    ij = np.arange(k)
    ch_idx = (
        np.arange(groups)[:, None, None] * (k * k)
        + ij[None, :, None] * k
        + ij[None, None, :]
    )
    ya = y0[:, None, :, None]
    yb = y1[:, None, :, None]
    xa = x0[:, None, None, :]
    xb = x1[:, None, None, :]
    chn = ch_idx[None]
    sums = (
        integral[chn, yb, xb]
        - integral[chn, ya, xb]
        - integral[chn, yb, xa]
        + integral[chn, ya, xa]
    )
    counts = np.maximum(y1 - y0, 0)[:, None, :, None] * np.maximum(x1 - x0, 0)[
        :, None, None, :
    ]
    out = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    state = (c, h, w, ch_idx, y0, y1, x0, x1, counts)
    op = _PsRoiPool(features, state)
    return op._out(out)


class _RoiPool(Op):
    name = "roi_pool"

    def __init__(self, features, argmax, shape):
        super().__init__(features)
        self.argmax = argmax  # [R,C,k,k] linear cell index or -1 for empty
        self.shape = shape

    def backward(self, grad):
        feats = self.inputs[0]
        if not feats.requires_grad:
            return [None]
        c, h, w = self.shape
        keep = self.argmax >= 0
        chan = np.broadcast_to(
            np.arange(c)[None, :, None, None], self.argmax.shape
        )
        idx = chan[keep] * (h * w) + self.argmax[keep]
        d = np.bincount(idx, weights=grad[keep], minlength=c * h * w)
        return [d.reshape(c, h, w)]


def roi_pool_rois(features: Tensor, corners: np.ndarray, spec: PoolSpec) -> Tensor:
    """Max pooling of many RoIs: [C,H,W] -> [R, C, k, k]."""
    if spec.mode is not PoolMode.ROI:
        raise ConfigError("roi_pool called with a non-ROI spec")
    if features.ndim != 3:
        raise DimensionError(f"features must be [C,H,W], got {features.shape}")
    c, h, w = features.shape
    k = spec.k
    corners = np.asarray(corners, dtype=np.float64)
    y0, y1, x0, x1 = _bin_windows(corners, k, spec.spatial_scale, h, w)
    r = corners.shape[0]
    out = np.zeros((r, c, k, k), dtype=features.data.dtype)
    argmax = np.full((r, c, k, k), -1, dtype=np.int64)
    fd = features.data
    for ri in range(r):
        for i in range(k):
            ys, ye = y0[ri, i], y1[ri, i]
            if ye <= ys:
                continue
            for j in range(k):
                xs, xe = x0[ri, j], x1[ri, j]
                if xe <= xs:
                    continue
                window = fd[:, ys:ye, xs:xe].reshape(c, -1)
                flat = window.argmax(axis=1)  # first max in scan order
                out[ri, :, i, j] = window[np.arange(c), flat]
                cell_y = ys + flat // (xe - xs)
                cell_x = xs + flat % (xe - xs)
                argmax[ri, :, i, j] = cell_y * w + cell_x
    op = _RoiPool(features, argmax, (c, h, w))
    return op._out(out)


def roi_pool(features: Tensor, roi: Box, spec: PoolSpec) -> Tensor:
    """Max-pool a single RoI into [C, k, k]."""
    from .tensor import reshape

    batched = roi_pool_rois(features, np.array([roi.corners()]), spec)
    return reshape(batched, batched.shape[1:])


def psroi_pool(features: Tensor, roi: Box, spec: PoolSpec) -> Tensor:
    """Position-sensitively pool a single RoI into [C/k^2, k, k]."""
    from .tensor import reshape

    batched = psroi_pool_rois(features, np.array([roi.corners()]), spec)
    return reshape(batched, batched.shape[1:])


class _Vote(Op):
    name = "vote"

    def __init__(self, pooled):
        super().__init__(pooled)
        self.k2 = pooled.shape[-1] * pooled.shape[-2]
        self.in_shape = pooled.shape

    def backward(self, grad):
        g = grad[..., None, None] / self.k2
        return [np.broadcast_to(g, self.in_shape).copy()]


def vote(pooled: Tensor) -> Tensor:
    """Average the k x k bins: [..., G, k, k] -> [..., G]."""
    if pooled.ndim < 3:
        raise DimensionError(f"vote expects [..., G, k, k], got {pooled.shape}")
    op = _Vote(pooled)
    return op._out(pooled.data.mean(axis=(-2, -1)))
