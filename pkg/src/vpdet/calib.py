"""Calibration matrices and LiDAR <-> camera <-> pixel transforms.

Conventions:
    LiDAR frame: x forward, y left, z up (meters).
    Camera frame: x right, y down, z forward (meters).
    Pixels: u right, v down, origin at the top-left image corner.

Projection chain: homogeneous pixel = P2 @ R0 @ T_lidar_to_cam @ [x y z 1]^T,
normalized by its third component. Depth is the z of the rectified
camera-frame point (the projection matrix's translation column does not
enter the depth).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

ROTATION_TOL = 1e-6


class CalibrationError(ValueError):
    """Raised for malformed or inconsistent calibration data."""


class ProjectionFailure(enum.Enum):
    """Typed outcome for a point that has no valid pixel."""

    BEHIND = "behind"
    OUT_OF_FRAME = "out_of_frame"


BEHIND = ProjectionFailure.BEHIND
OUT_OF_FRAME = ProjectionFailure.OUT_OF_FRAME


@dataclass(frozen=True)
class PixelDepth:
    """A projected point: pixel coordinates plus camera-frame depth."""

    u: float
    v: float
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"PixelDepth requires depth > 0, got {self.depth}")


def _check_rotation(block: np.ndarray, name: str) -> None:
    err = np.abs(block @ block.T - np.eye(3)).max()
    if err > ROTATION_TOL:
        raise CalibrationError(f"{name} rotation block not orthonormal (max |R R^T - I| = {err:.3e})")


@dataclass(frozen=True)
class CalibrationSet:
    """Holds P2 (3x4 camera projection), R0 (4x4 rectification) and the
    4x4 rigid LiDAR-to-camera transform, with intrinsics read off P2."""

    p2: np.ndarray
    r0: np.ndarray
    t_lidar_to_cam: np.ndarray

    def __post_init__(self):
        p2 = np.asarray(self.p2, dtype=np.float64)
        r0 = np.asarray(self.r0, dtype=np.float64)
        t = np.asarray(self.t_lidar_to_cam, dtype=np.float64)
        if p2.shape != (3, 4):
            raise CalibrationError(f"p2 must be 3x4, got {p2.shape}")
        if r0.shape != (4, 4):
            raise CalibrationError(f"r0 must be 4x4, got {r0.shape}")
        if t.shape != (4, 4):
            raise CalibrationError(f"t_lidar_to_cam must be 4x4, got {t.shape}")
        if not (np.isfinite(p2).all() and np.isfinite(r0).all() and np.isfinite(t).all()):
            raise CalibrationError("calibration matrices must be finite")
        _check_rotation(r0[:3, :3], "r0")
        _check_rotation(t[:3, :3], "t_lidar_to_cam")
        if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
            raise CalibrationError("t_lidar_to_cam bottom row must be exactly (0, 0, 0, 1)")
        if not (p2[0, 0] > 0 and p2[1, 1] > 0):
            raise CalibrationError("focal lengths extracted from p2 must be positive")
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "t_lidar_to_cam", t)

    @property
    def f_u(self) -> float:
        return float(self.p2[0, 0])

    @property
    def f_v(self) -> float:
        return float(self.p2[1, 1])

    @property
    def c_u(self) -> float:
        return float(self.p2[0, 2])

    @property
    def c_v(self) -> float:
        return float(self.p2[1, 2])

    @cached_property
    def rect(self) -> np.ndarray:
        """R0 @ T: LiDAR homogeneous -> rectified camera homogeneous."""
        return self.r0 @ self.t_lidar_to_cam

    @cached_property
    def proj(self) -> np.ndarray:
        """P2 @ R0 @ T: LiDAR homogeneous -> homogeneous pixel."""
        return self.p2 @ self.rect

    @cached_property
    def rect_inv(self) -> np.ndarray:
        """T^-1 @ R0^-1: rectified camera homogeneous -> LiDAR homogeneous."""
        return np.linalg.inv(self.t_lidar_to_cam) @ np.linalg.inv(self.r0)

    @classmethod
    def identity(cls) -> "CalibrationSet":
        return cls(np.eye(3, 4), np.eye(4), np.eye(4))

    @classmethod
    def from_kitti_text(cls, text: str) -> "CalibrationSet":
        """Parse KITTI-style calibration lines (P2, R0_rect, Tr_velo_to_cam)."""
        entries = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            try:
                entries[key.strip()] = np.array([float(x) for x in rest.split()])
            except ValueError as e:
                raise CalibrationError(f"calibration line {lineno}: {e}") from e
        for key, count in (("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)):
            if key not in entries:
                raise CalibrationError(f"missing calibration key {key!r}")
            if entries[key].size != count:
                raise CalibrationError(f"{key} needs {count} values, got {entries[key].size}")
        p2 = entries["P2"].reshape(3, 4)
        r0 = np.eye(4)
        r0[:3, :3] = entries["R0_rect"].reshape(3, 3)
        t = np.eye(4)
        t[:3, :4] = entries["Tr_velo_to_cam"].reshape(3, 4)
        return cls(p2, r0, t)

    @classmethod
    def from_kitti_file(cls, path) -> "CalibrationSet":
        try:
            return cls.from_kitti_text(Path(path).read_text())
        except CalibrationError as e:
            raise CalibrationError(f"{path}: {e}") from e


def lidar_to_cam_points(points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """Rectified camera-frame coordinates for an (N, 3) LiDAR array."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    return (hom @ calib.rect.T)[:, :3]


def project_points(points: np.ndarray, calib: CalibrationSet):
    """Vectorized projection of (N, 3) LiDAR points.

    Returns (u, v, depth) arrays; entries with depth <= 0 hold NaN pixels.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    depth = (hom @ calib.rect.T)[:, 2]
    q = hom @ calib.proj.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = q[:, 0] / q[:, 2]
        v = q[:, 1] / q[:, 2]
    bad = depth <= 0
    u[bad] = np.nan
    v[bad] = np.nan
    return u, v, depth


def project_lidar_to_image(p_lidar, calib: CalibrationSet, image_size=None):
    """Project one LiDAR point; returns PixelDepth or a ProjectionFailure.

    image_size, when given, is (width, height) and makes out-of-bounds
    pixels return OUT_OF_FRAME.
    """
    u, v, depth = project_points(np.asarray(p_lidar, dtype=np.float64), calib)
    u, v, depth = float(u[0]), float(v[0]), float(depth[0])
    if depth <= 0:
        return BEHIND
    if image_size is not None:
        width, height = image_size
        if not (0 <= u < width and 0 <= v < height):
            return OUT_OF_FRAME
    return PixelDepth(u=u, v=v, depth=depth)


def back_project_pixels(u, v, depth, calib: CalibrationSet) -> np.ndarray:
    """Pinhole inverse for arrays of pixels: camera-frame (N, 3) points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("back-projection requires depth > 0")
    x = depth * (u - calib.c_u) / calib.f_u
    y = depth * (v - calib.c_v) / calib.f_v
    return np.stack([x, y, depth], axis=-1)


def back_project_pixel(u: float, v: float, depth: float, calib: CalibrationSet) -> np.ndarray:
    """Camera-frame 3-vector for a single pixel plus depth."""
    return back_project_pixels(np.float64(u), np.float64(v), np.float64(depth), calib)


def cam_to_lidar_points(points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    """Rectified camera-frame (N, 3) points back into the LiDAR frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    return (hom @ calib.rect_inv.T)[:, :3]


def cam_to_lidar(p_cam, calib: CalibrationSet) -> np.ndarray:
    return cam_to_lidar_points(np.asarray(p_cam, dtype=np.float64), calib)[0]


@dataclass
class DepthMap:
    """Per-pixel depths (meters) with a validity mask, stored (height, width)."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError("values and valid must be matching 2-D arrays")
        active = self.values[self.valid]
        if active.size and not (np.isfinite(active).all() and (active > 0).all()):
            raise ValueError("valid depth entries must be finite and > 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthMap":
        if width <= 0 or height <= 0:
            raise ValueError("width and height must be positive")
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))


def round_half_up(x):
    """Round to nearest integer, halves away from zero-free: floor(x + 0.5)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def render_sparse_depth(points, calib: CalibrationSet, width: int, height: int) -> DepthMap:
    """Z-buffer LiDAR points into a sparse depth map.

    Each point with positive camera depth that lands in frame marks its
    nearest-integer pixel; the minimum depth wins when pixels collide.
    Behind-camera and out-of-frame points are skipped silently.
    """
    depth_map = DepthMap.empty(width, height)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return depth_map
    u, v, depth = project_points(pts, calib)
    keep = depth > 0
    pu = np.full(len(pts), -1, dtype=np.int64)
    pv = np.full(len(pts), -1, dtype=np.int64)
    pu[keep] = round_half_up(u[keep])
    pv[keep] = round_half_up(v[keep])
    keep &= (pu >= 0) & (pu < width) & (pv >= 0) & (pv < height)
    values = np.full((height, width), np.inf)
    np.minimum.at(values, (pv[keep], pu[keep]), depth[keep])
    valid = np.isfinite(values)
    depth_map.values[valid] = values[valid]
    depth_map.valid = valid
    return depth_map
