"""Voxelization and sparse 3-D convolutions over active-site lists.

A sparse tensor is a list of integer voxel coordinates with one feature
row per site. Submanifold convolution keeps the active set fixed;
strided convolution maps sites to their stride-divided parents. Both are
cross-correlations: out[p] = sum_delta in[p*stride + delta] @ K[delta+1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fusion import FusedCloud, Point8D


@dataclass
class VoxelCell:
    representative: Point8D
    count: int


@dataclass
class VoxelGrid:
    """Map from integer voxel coordinate to its representative point."""

    voxel_size: float
    origin: np.ndarray
    voxels: dict

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    def __len__(self):
        return len(self.voxels)


def voxelize(cloud: FusedCloud, voxel_size: float, origin, seed: int) -> VoxelGrid:
    """Discretize a cloud; one representative per voxel, uniform at random.

    The draw is order-independent: voxels and their members are sorted
    canonically before the seeded choice, so permuting the input cloud
    cannot change the result.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    groups: dict = {}
    for p in cloud.points:
        key = tuple(int(v) for v in np.floor((p.position - origin) / voxel_size))
        groups.setdefault(key, []).append(p)
    rng = np.random.default_rng(seed)
    voxels = {}
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda p: tuple(p.as_vector()))
        pick = int(rng.integers(len(members)))
        voxels[key] = VoxelCell(representative=members[pick], count=len(members))
    return VoxelGrid(voxel_size=voxel_size, origin=origin, voxels=voxels)


@dataclass
class SparseTensor3D:
    """Active voxel coordinates plus per-site features at a given stride."""

    coords: np.ndarray
    feats: object  # (N, C) ndarray or autodiff.Tensor
    stride: int
    voxel_size: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if len({tuple(c) for c in self.coords}) != len(self.coords):
            raise ValueError("coords must be unique")
        if self.feats_value.ndim != 2 or len(self.feats_value) != len(self.coords):
            raise ValueError("feats must be (n_sites, channels)")

    @property
    def feats_value(self) -> np.ndarray:
        return ad.value_of(self.feats)

    @property
    def channels(self) -> int:
        return self.feats_value.shape[1]

    def __len__(self):
        return len(self.coords)

    def site_positions(self) -> np.ndarray:
        """Voxel-center positions in meters, honoring the stride."""
        step = self.voxel_size * self.stride
        return self.origin + (self.coords.astype(np.float64) + 0.5) * step


@dataclass
class ConvParams:
    """Kernel + bias. 3-D kernels are (3, 3, 3, c_in, c_out); per-cell
    linear (1x1) maps are stored (c_in, c_out); 2-D kernels (kh, kw, c_in, c_out)."""

    kernel: object
    bias: object

    def __post_init__(self):
        kv, bv = ad.value_of(self.kernel), ad.value_of(self.bias)
        if not (np.isfinite(kv).all() and np.isfinite(bv).all()):
            raise ValueError("conv parameters must be finite")
        if kv.shape[-1] != bv.shape[-1]:
            raise ValueError("bias width must equal kernel output channels")


_OFFSETS = [
    (di, dj, dk)
    for di in (-1, 0, 1)
    for dj in (-1, 0, 1)
    for dk in (-1, 0, 1)
]


def _coord_index(coords: np.ndarray) -> dict:
    return {tuple(c): i for i, c in enumerate(coords)}


def submanifold_conv(inp: SparseTensor3D, params: ConvParams) -> SparseTensor3D:
    """3x3x3 sparse conv whose output active set equals the input's."""
    kernel = ad.as_tensor(params.kernel)
    bias = ad.as_tensor(params.bias)
    if kernel.shape[:3] != (3, 3, 3):
        raise ValueError(f"expected a 3x3x3 kernel, got {kernel.shape}")
    if kernel.shape[3] != inp.channels:
        raise ValueError(
            f"kernel input channels {kernel.shape[3]} != feature channels {inp.channels}"
        )
    feats = ad.as_tensor(inp.feats)
    n = len(inp)
    index = _coord_index(inp.coords)
    out = None
    for di, dj, dk in _OFFSETS:
        out_rows, in_rows = [], []
        for j, c in enumerate(inp.coords):
            neighbor = (c[0] + di, c[1] + dj, c[2] + dk)
            i = index.get(neighbor)
            if i is not None:
                out_rows.append(j)
                in_rows.append(i)
        if not out_rows:
            continue
        gathered = ad.take_rows(feats, np.array(in_rows))
        term = ad.scatter_rows(gathered @ kernel[di + 1, dj + 1, dk + 1], np.array(out_rows), n)
        out = term if out is None else out + term
    out = bias if out is None else out + bias
    if n == 0:
        out = ad.Tensor(np.zeros((0, kernel.shape[4])))
    return SparseTensor3D(
        coords=inp.coords.copy(), feats=out, stride=inp.stride,
        voxel_size=inp.voxel_size, origin=inp.origin,
    )


def strided_conv(inp: SparseTensor3D, params: ConvParams, stride: int = 2) -> SparseTensor3D:
    """3x3x3 sparse conv to the stride-divided coordinate grid.

    Output sites are the distinct floor(coord / stride); each gathers every
    input within its 3x3x3 window at the finer resolution.
    """
    kernel = ad.as_tensor(params.kernel)
    bias = ad.as_tensor(params.bias)
    if kernel.shape[:3] != (3, 3, 3):
        raise ValueError(f"expected a 3x3x3 kernel, got {kernel.shape}")
    if kernel.shape[3] != inp.channels:
        raise ValueError(
            f"kernel input channels {kernel.shape[3]} != feature channels {inp.channels}"
        )
    feats = ad.as_tensor(inp.feats)
    if len(inp) == 0:
        return SparseTensor3D(
            coords=np.zeros((0, 3), dtype=np.int64),
            feats=ad.Tensor(np.zeros((0, kernel.shape[4]))),
            stride=inp.stride * stride, voxel_size=inp.voxel_size, origin=inp.origin,
        )
    parents = np.floor_divide(inp.coords, stride)
    out_coords = np.unique(parents, axis=0)
    out_index = _coord_index(out_coords)
    in_index = _coord_index(inp.coords)
    n_out = len(out_coords)
    out = None
    for di, dj, dk in _OFFSETS:
        out_rows, in_rows = [], []
        for q_row, q in enumerate(out_coords):
            c = (q[0] * stride + di, q[1] * stride + dj, q[2] * stride + dk)
            i = in_index.get(c)
            if i is not None:
                out_rows.append(q_row)
                in_rows.append(i)
        if not out_rows:
            continue
        gathered = ad.take_rows(feats, np.array(in_rows))
        term = ad.scatter_rows(gathered @ kernel[di + 1, dj + 1, dk + 1], np.array(out_rows), n_out)
        out = term if out is None else out + term
    out = out + bias
    return SparseTensor3D(
        coords=out_coords, feats=out, stride=inp.stride * stride,
        voxel_size=inp.voxel_size, origin=inp.origin,
    )
