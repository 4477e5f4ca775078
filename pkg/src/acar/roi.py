"""Actor feature extraction: temporal pooling, aligned bilinear RoI pooling,
and per-channel spatial max pooling down to one vector per actor.

Boxes are normalized to [0,1] over the key frame. Continuous feature
coordinates use the half-pixel convention (pixel centers at integers,
``x_feat = x_norm * W - 0.5``), so a full-frame box on a same-sized output
grid puts bin centers exactly on pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("box score must be in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class ActorFeature:
    """Pooled per-actor vector; length equals the context channel count."""

    values: np.ndarray
    actor_id: int = 0


def temporal_pool(volume: Tensor) -> Tensor:
    """Mean over the temporal axis: [T,C,H,W] -> [C,H,W] (or batched
    [B,T,C,H,W] -> [B,C,H,W])."""
    volume = T.as_tensor(volume)
    if volume.ndim == 4:
        return T.mean_over_axis(volume, 0)
    if volume.ndim == 5:
        return T.mean_over_axis(volume, 1)
    raise ValueError("temporal_pool expects a 4-D or 5-D volume")


def _axis_weights(lo: float, hi: float, n_pix: int, out: int, ratio: int) -> np.ndarray:
    """Per-axis bin-average bilinear weights as a dense [out, n_pix] matrix."""
    bin_w = (hi - lo) / out
    pts = lo + (np.arange(out * ratio) + 0.5) * bin_w / ratio
    pc = np.clip(pts, 0.0, n_pix - 1.0)
    low = np.minimum(np.floor(pc), max(n_pix - 2, 0)).astype(np.int64)
    high = np.minimum(low + 1, n_pix - 1)
    frac = pc - low
    samp = np.zeros((out * ratio, n_pix), dtype=np.float64)
    rows = np.arange(out * ratio)
    np.add.at(samp, (rows, low), 1.0 - frac)
    np.add.at(samp, (rows, high), frac)
    pool = np.zeros((out, out * ratio), dtype=np.float64)
    for p in range(out):
        pool[p, p * ratio:(p + 1) * ratio] = 1.0 / ratio
    return pool @ samp


def bilinear_matrix(box: BoundingBox, h: int, w: int, out: int = 7,
                    sampling_ratio: int = 2) -> np.ndarray:
    """Dense linear map [out*out, h*w] so that pooling is a matrix product.

    Separable: the 2-D bin-average of the bilinear surface factors into
    per-axis weight matrices.
    """
    if box.area() <= 0.0:
        raise ValueError("zero-area box")
    y_lo, y_hi = box.y1 * h - 0.5, box.y2 * h - 0.5
    x_lo, x_hi = box.x1 * w - 0.5, box.x2 * w - 0.5
    wy = _axis_weights(y_lo, y_hi, h, out, sampling_ratio)
    wx = _axis_weights(x_lo, x_hi, w, out, sampling_ratio)
    return np.einsum("ay,bx->abyx", wy, wx).reshape(out * out, h * w)


def roi_align(x: Tensor, box: BoundingBox, out: int = 7,
              sampling_ratio: int = 2) -> Tensor:
    """RoI-align one box against a [C,H,W] map -> [C,out,out].

    Each output cell averages sampling_ratio^2 regularly spaced bilinear
    samples. Differentiable in the map values.
    """
    x = T.as_tensor(x)
    if x.ndim != 3:
        raise ValueError("roi_align expects a [C,H,W] map")
    c, h, w = x.shape
    mat = Tensor(bilinear_matrix(box, h, w, out, sampling_ratio))
    flat = T.reshape(x, (c, h * w))
    pooled = T.matmul(flat, T.transpose(mat, (1, 0)))
    return T.reshape(pooled, (c, out, out))


def roi_align_multi(x: Tensor, mats: np.ndarray, out: int = 7) -> Tensor:
    """Batched RoI-align: [B,C,H,W] with per-scene box matrices
    [B,N,out*out,H*W] -> [B,N,C,out,out]."""
    x = T.as_tensor(x)
    b, c, h, w = x.shape
    bb, n, pp, ll = mats.shape
    if bb != b or ll != h * w or pp != out * out:
        raise ValueError("roi matrix shape mismatch")
    flat = T.reshape(x, (b, c, h * w))
    mt = Tensor(np.ascontiguousarray(mats.reshape(b, n * pp, ll).transpose(0, 2, 1)))
    mixed = T.matmul(flat, mt)                      # [B, C, N*out*out]
    maps = T.reshape(mixed, (b, c, n, pp))
    return T.reshape(T.transpose(maps, (0, 2, 1, 3)), (b, n, c, out, out))


def extract_actor_features(x: Tensor, boxes: list[BoundingBox], out: int = 7,
                           sampling_ratio: int = 2) -> list[ActorFeature]:
    """RoI-align then per-channel spatial max -> one length-C vector per box."""
    if not boxes:
        raise ValueError("extract_actor_features requires at least one box")
    feats = []
    for i, box in enumerate(boxes):
        grid = roi_align(x, box, out=out, sampling_ratio=sampling_ratio)
        vec = T.max_over_axes(grid, (1, 2))
        feats.append(ActorFeature(values=vec.data.copy(), actor_id=i))
    return feats


def actor_vectors(x: Tensor, mats: np.ndarray, out: int = 7) -> Tensor:
    """Differentiable batched variant of extract_actor_features:
    [B,C,H,W] -> [B,N,C]."""
    grids = roi_align_multi(x, mats, out=out)
    b, n, c = grids.shape[:3]
    flat = T.reshape(grids, (b, n, c, out * out))
    return T.max_over_axes(flat, (3,))
