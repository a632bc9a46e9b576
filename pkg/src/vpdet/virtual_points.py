"""Virtual points from completed depth maps, plus range-aware subsampling.

A dense depth map and its RGB image are back-projected pixel by pixel into
the LiDAR frame; every valid pixel becomes a virtual point carrying the
pixel color, zero intensity and modality tag 1. Because completed maps
produce orders of magnitude more points than the sensor, near-range points
are thinned by radial binning while far bins are kept in full.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import CalibrationSet, DepthMap, back_project_pixels, cam_to_lidar_points
from .fusion import Point8D

DEPTH_PNG_SCALE = 256.0  # stored uint16 = meters * 256, 0 marks invalid


@dataclass
class RgbImage:
    """RGB image with channels normalized to [0, 1], stored (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (height, width, 3)")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("channel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_png(cls, path) -> "RgbImage":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)

    def to_png(self, path) -> None:
        from PIL import Image

        arr = np.floor(self.pixels * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path)


@dataclass(frozen=True)
class RangeSampleConfig:
    """Radial thinning policy for virtual points.

    Bins are equal-width in horizontal range over [0, max_range]; a bin is
    "near" when its upper edge is <= near_threshold. Near bins keep
    floor(retain_fraction * n) points, far bins are kept whole.
    """

    n_bins: int
    retain_fraction: float = 0.2
    near_threshold: float = 60.0
    max_range: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if not 0 < self.retain_fraction <= 1:
            raise ValueError("retain_fraction must be in (0, 1]")
        if not 0 < self.near_threshold <= self.max_range:
            raise ValueError("need 0 < near_threshold <= max_range")

    @classmethod
    def for_training(cls, **kwargs) -> "RangeSampleConfig":
        return cls(n_bins=kwargs.pop("n_bins", 2), **kwargs)

    @classmethod
    def for_inference(cls, **kwargs) -> "RangeSampleConfig":
        return cls(n_bins=kwargs.pop("n_bins", 10), **kwargs)


def generate_virtual_points(
    dense_depth: DepthMap,
    image: RgbImage,
    calib: CalibrationSet,
    max_range: float = 100.0,
) -> list[Point8D]:
    """One virtual point per valid pixel with depth in (0, max_range].

    Position = cam_to_lidar(back_project(pixel)); intensity 0, color from
    the image, modality tag 1. Pixels scan row-major.
    """
    if (dense_depth.height, dense_depth.width) != (image.height, image.width):
        raise ValueError(
            f"depth map {dense_depth.width}x{dense_depth.height} does not match "
            f"image {image.width}x{image.height}"
        )
    mask = dense_depth.valid & (dense_depth.values <= max_range)
    if not mask.any():
        return []
    vv, uu = np.nonzero(mask)  # row-major scan order
    depths = dense_depth.values[vv, uu]
    cam = back_project_pixels(uu.astype(np.float64), vv.astype(np.float64), depths, calib)
    lidar = cam_to_lidar_points(cam, calib)
    colors = image.pixels[vv, uu]
    return [
        Point8D(x, y, z, 0.0, r, g, b, 1)
        for (x, y, z), (r, g, b) in zip(lidar, colors)
    ]


def range_aware_sample(points: list[Point8D], config: RangeSampleConfig) -> list[Point8D]:
    """Thin near-range bins, keep far bins whole; deterministic given seed.

    Output preserves input order. Points beyond max_range fall into the
    last bin.
    """
    if not points:
        return []
    ranges = np.array([np.hypot(p.x, p.y) for p in points])
    width = config.max_range / config.n_bins
    bins = np.clip((ranges / width).astype(np.int64), 0, config.n_bins - 1)
    rng = np.random.default_rng(config.seed)
    keep = np.zeros(len(points), dtype=bool)
    for b in range(config.n_bins):
        members = np.nonzero(bins == b)[0]
        if members.size == 0:
            continue
        upper_edge = (b + 1) * width
        if upper_edge <= config.near_threshold:
            n_keep = int(np.floor(config.retain_fraction * members.size))
            chosen = rng.choice(members, size=n_keep, replace=False)
            keep[chosen] = True
        else:
            keep[members] = True
    return [p for p, k in zip(points, keep) if k]


def load_depth_file(path) -> DepthMap:
    """Read a dense depth map; format chosen by extension.

    .png  -> 16-bit grayscale PNG, meters = value / 256, 0 means invalid.
    other -> raw little-endian: uint32 width, uint32 height, then
             width*height float32 row-major; values <= 0 or non-finite
             are invalid.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im, dtype=np.uint16)
        if raw.ndim != 2:
            raise ValueError(f"{path}: depth PNG must be single-channel")
        values = raw.astype(np.float64) / DEPTH_PNG_SCALE
        return DepthMap(values, raw > 0)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: missing width/height header")
    width, height = struct.unpack("<II", blob[:8])
    expected = 8 + 4 * width * height
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=8).reshape(height, width).astype(np.float64)
    valid = np.isfinite(values) & (values > 0)
    return DepthMap(np.where(valid, values, 0.0), valid)


def save_depth_file(depth: DepthMap, path) -> None:
    """Write a depth map in the format matching the file extension."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        raw = np.zeros((depth.height, depth.width), dtype=np.uint16)
        quantized = np.floor(depth.values * DEPTH_PNG_SCALE + 0.5)
        raw[depth.valid] = np.clip(quantized[depth.valid], 1, 65535).astype(np.uint16)
        Image.fromarray(raw).save(path)
        return
    values = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(values.tobytes())
