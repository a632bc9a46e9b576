"""Sparse 3-D backbone producing multi-scale features and the BEV heatmap.

Four stages at strides (1, 2, 4, 8): a submanifold conv per stage, with a
stride-2 conv appended for stages 2-4, ReLU after every conv. The final
stage is collapsed to a bird's-eye-view grid by a per-column max over z,
projected by a 1x1 map, and scored by a single-channel sigmoid head.

The two late-fusion variants combine per-modality BEV maps: a per-cell
linear map over concatenated channels, or a learned sigmoid gate mixing
the two maps channelwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .sparse import ConvParams, SparseTensor3D, VoxelGrid, strided_conv, submanifold_conv

BEV_STRIDE = 8
POINT_FEATURE_DIM = 8


@dataclass
class BackboneConfig:
    voxel_size: float = 0.05
    point_range: tuple = (0.0, -20.0, -3.0, 40.0, 20.0, 1.0)
    channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if len(self.point_range) != 6:
            raise ValueError("point_range must be (xmin, ymin, zmin, xmax, ymax, zmax)")
        lo, hi = np.array(self.point_range[:3]), np.array(self.point_range[3:])
        if not (hi > lo).all():
            raise ValueError("point_range maxima must exceed minima")
        if len(self.channels) != 4:
            raise ValueError("backbone has exactly 4 stages")

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.point_range[:3], dtype=np.float64)

    @property
    def voxel_shape(self) -> tuple:
        lo, hi = np.array(self.point_range[:3]), np.array(self.point_range[3:])
        return tuple(int(math.ceil(d / self.voxel_size)) for d in hi - lo)

    @property
    def cell_size(self) -> float:
        return self.voxel_size * BEV_STRIDE

    @property
    def bev_shape(self) -> tuple:
        nx, ny, _ = self.voxel_shape
        return (int(math.ceil(nx / BEV_STRIDE)), int(math.ceil(ny / BEV_STRIDE)))


@dataclass
class BEVHeatmap:
    """Dense stride-8 BEV feature grid with a [0, 1] score channel.

    data is (width, height, channels) indexed by (x cell, y cell); origin
    is the min (x, y) corner of cell (0, 0) in meters.
    """

    data: object
    score: object
    cell_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d, s = self.data_value, self.score_value
        if d.ndim != 3:
            raise ValueError("data must be (width, height, channels)")
        if s.shape != d.shape[:2]:
            raise ValueError("score must match data's spatial shape")
        if not np.isfinite(d).all():
            raise ValueError("heatmap features must be finite")
        if s.size and (s.min() < 0 or s.max() > 1):
            raise ValueError("score must lie in [0, 1]")

    @property
    def data_value(self) -> np.ndarray:
        return ad.value_of(self.data)

    @property
    def score_value(self) -> np.ndarray:
        return ad.value_of(self.score)

    @property
    def width(self) -> int:
        return self.data_value.shape[0]

    @property
    def height(self) -> int:
        return self.data_value.shape[1]

    @property
    def channels(self) -> int:
        return self.data_value.shape[2]

    def cell_center(self, u: int, v: int) -> np.ndarray:
        """(x, y) meters of the center of cell (u, v)."""
        return self.origin + (np.array([u, v], dtype=np.float64) + 0.5) * self.cell_size


@dataclass
class BackboneOutput:
    x_conv1: SparseTensor3D
    x_conv2: SparseTensor3D
    x_conv3: SparseTensor3D
    x_conv4: SparseTensor3D
    heat: BEVHeatmap


def backbone_weight_shapes(config: BackboneConfig) -> dict:
    c1, c2, c3, c4 = config.channels
    shapes = {
        "bb.s1.subm.k": (3, 3, 3, POINT_FEATURE_DIM, c1),
        "bb.s1.subm.b": (c1,),
        "bb.s2.subm.k": (3, 3, 3, c1, c2),
        "bb.s2.subm.b": (c2,),
        "bb.s2.down.k": (3, 3, 3, c2, c2),
        "bb.s2.down.b": (c2,),
        "bb.s3.subm.k": (3, 3, 3, c2, c3),
        "bb.s3.subm.b": (c3,),
        "bb.s3.down.k": (3, 3, 3, c3, c3),
        "bb.s3.down.b": (c3,),
        "bb.s4.subm.k": (3, 3, 3, c3, c4),
        "bb.s4.subm.b": (c4,),
        "bb.s4.down.k": (3, 3, 3, c4, c4),
        "bb.s4.down.b": (c4,),
        "bb.bev.w": (c4, c4),
        "bb.bev.b": (c4,),
        "bb.score.w": (c4, 1),
        "bb.score.b": (1,),
    }
    return shapes


def _relu_tensor(t: SparseTensor3D) -> SparseTensor3D:
    return SparseTensor3D(
        coords=t.coords, feats=ad.relu(ad.as_tensor(t.feats)), stride=t.stride,
        voxel_size=t.voxel_size, origin=t.origin,
    )


def grid_to_sparse(grid: VoxelGrid, config: BackboneConfig) -> SparseTensor3D:
    """Stage-1 input: one 8-D feature row per voxel, range-clipped.

    Voxels outside the configured extent are dropped.
    """
    shape = config.voxel_shape
    coords, feats = [], []
    for key in sorted(grid.voxels):
        if all(0 <= key[a] < shape[a] for a in range(3)):
            coords.append(key)
            feats.append(grid.voxels[key].representative.as_vector())
    if not coords:
        return SparseTensor3D(
            coords=np.zeros((0, 3), dtype=np.int64),
            feats=np.zeros((0, POINT_FEATURE_DIM)),
            stride=1, voxel_size=grid.voxel_size, origin=config.origin,
        )
    return SparseTensor3D(
        coords=np.array(coords, dtype=np.int64), feats=np.array(feats),
        stride=1, voxel_size=grid.voxel_size, origin=config.origin,
    )


def backbone_forward(grid: VoxelGrid, weights: dict, config: BackboneConfig) -> BackboneOutput:
    """Run the 4-stage stack and collapse stage 4 into the BEV heatmap.

    An empty grid short-circuits to empty features and an all-zero heatmap.
    """
    x = grid_to_sparse(grid, config)
    c4 = config.channels[3]
    nx, ny = config.bev_shape

    def conv(name):
        return ConvParams(weights[name + ".k"], weights[name + ".b"])

    x1 = _relu_tensor(submanifold_conv(x, conv("bb.s1.subm")))
    x2 = _relu_tensor(strided_conv(_relu_tensor(submanifold_conv(x1, conv("bb.s2.subm"))), conv("bb.s2.down")))
    x3 = _relu_tensor(strided_conv(_relu_tensor(submanifold_conv(x2, conv("bb.s3.subm"))), conv("bb.s3.down")))
    x4 = _relu_tensor(strided_conv(_relu_tensor(submanifold_conv(x3, conv("bb.s4.subm"))), conv("bb.s4.down")))

    if len(x4) == 0:
        heat = BEVHeatmap(
            data=np.zeros((nx, ny, c4)), score=np.zeros((nx, ny)),
            cell_size=config.cell_size, origin=config.origin[:2],
        )
        return BackboneOutput(x1, x2, x3, x4, heat)

    columns, seg_ids = np.unique(x4.coords[:, :2], axis=0, return_inverse=True)
    collapsed = ad.segment_max(ad.as_tensor(x4.feats), seg_ids, len(columns))
    projected = collapsed @ ad.as_tensor(weights["bb.bev.w"]) + ad.as_tensor(weights["bb.bev.b"])
    flat_idx = columns[:, 0] * ny + columns[:, 1]
    dense = ad.scatter_rows(projected, flat_idx, nx * ny)
    data = dense.reshape(nx, ny, c4)
    score = score_from_features(data, weights["bb.score.w"], weights["bb.score.b"])
    heat = BEVHeatmap(
        data=data, score=score, cell_size=config.cell_size, origin=config.origin[:2],
    )
    return BackboneOutput(x1, x2, x3, x4, heat)


def score_from_features(data, score_w, score_b):
    """Single-channel sigmoid head over a (W, H, C) BEV feature grid."""
    data = ad.as_tensor(data)
    w, h, c = data.shape
    logits = data.reshape(w * h, c) @ ad.as_tensor(score_w) + ad.as_tensor(score_b)
    return ad.sigmoid(logits).reshape(w, h)


def conv2d(x, kernel, bias):
    """Dense 2-D conv with 'same' zero padding over a (H, W, Ci) tensor."""
    x = ad.as_tensor(x)
    kernel = ad.as_tensor(kernel)
    bias = ad.as_tensor(bias)
    h, w, ci = x.shape
    kh, kw, kci, co = kernel.shape
    if kci != ci:
        raise ValueError(f"kernel input channels {kci} != feature channels {ci}")
    xp = ad.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    out = None
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[dy : dy + h, dx : dx + w, :].reshape(h * w, ci)
            term = patch @ kernel[dy, dx]
            out = term if out is None else out + term
    return (out + bias).reshape(h, w, co)


def _check_same_bev(a: BEVHeatmap, b: BEVHeatmap) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"BEV maps differ spatially: {(a.width, a.height)} vs {(b.width, b.height)}"
        )


def late_fuse_1x1(real_bev: BEVHeatmap, virt_bev: BEVHeatmap, params: ConvParams) -> BEVHeatmap:
    """Channel-concatenate the two maps and apply a per-cell linear map.

    The fused map's score channel is zeroed; rescore it with
    score_from_features before peak extraction.
    """
    _check_same_bev(real_bev, virt_bev)
    kernel = ad.as_tensor(params.kernel)
    if kernel.ndim != 2 or kernel.shape[0] != real_bev.channels + virt_bev.channels:
        raise ValueError(
            f"1x1 kernel must be ({real_bev.channels + virt_bev.channels}, c_out), got {kernel.shape}"
        )
    w, h = real_bev.width, real_bev.height
    both = ad.concatenate([ad.as_tensor(real_bev.data), ad.as_tensor(virt_bev.data)], axis=2)
    fused = both.reshape(w * h, kernel.shape[0]) @ kernel + ad.as_tensor(params.bias)
    return BEVHeatmap(
        data=fused.reshape(w, h, kernel.shape[1]), score=np.zeros((w, h)),
        cell_size=real_bev.cell_size, origin=real_bev.origin,
    )


def gated_fuse(real_bev: BEVHeatmap, virt_bev: BEVHeatmap, gate_params: ConvParams) -> BEVHeatmap:
    """Mix the two maps with a learned per-cell, per-channel sigmoid gate:
    out = g * real + (1 - g) * virt."""
    _check_same_bev(real_bev, virt_bev)
    if real_bev.channels != virt_bev.channels:
        raise ValueError("gated fusion requires equal channel widths")
    kernel = ad.as_tensor(gate_params.kernel)
    if kernel.ndim != 2 or kernel.shape != (2 * real_bev.channels, real_bev.channels):
        raise ValueError(
            f"gate kernel must be ({2 * real_bev.channels}, {real_bev.channels}), got {kernel.shape}"
        )
    w, h, c = real_bev.width, real_bev.height, real_bev.channels
    real = ad.as_tensor(real_bev.data)
    virt = ad.as_tensor(virt_bev.data)
    both = ad.concatenate([real, virt], axis=2)
    logits = both.reshape(w * h, 2 * c) @ kernel + ad.as_tensor(gate_params.bias)
    g = ad.sigmoid(logits).reshape(w, h, c)
    fused = g * real + (1.0 - g) * virt
    return BEVHeatmap(
        data=fused, score=np.zeros((w, h)),
        cell_size=real_bev.cell_size, origin=real_bev.origin,
    )
