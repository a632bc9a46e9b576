"""8-D point encoding and real/virtual cloud fusion.

Every point in the pipeline is an 8-vector (x, y, z, I, r, g, b, tau).
Real LiDAR points keep their sensor intensity, zero color and tau = 2;
virtual points carry image color, zero intensity and tau = 1. Early fusion
is plain concatenation before voxelization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TAU_VIRTUAL = 1
TAU_REAL = 2


@dataclass(frozen=True)
class Point8D:
    x: float
    y: float
    z: float
    intensity: float
    r: float
    g: float
    b: float
    tau: int

    def __post_init__(self):
        if self.tau not in (TAU_VIRTUAL, TAU_REAL):
            raise ValueError(f"tau must be 1 or 2, got {self.tau}")
        if self.tau == TAU_VIRTUAL and self.intensity != 0.0:
            raise ValueError("virtual points must carry zero intensity")
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def horizontal_range(self) -> float:
        return float(np.hypot(self.x, self.y))

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.intensity, self.r, self.g, self.b, float(self.tau)]
        )


def points_to_array(points) -> np.ndarray:
    """(N, 8) float64 view of a point list."""
    if not points:
        return np.zeros((0, 8))
    return np.array([p.as_vector() for p in points])


@dataclass
class FusedCloud:
    """Concatenated real + virtual points with per-modality counts."""

    points: list[Point8D]
    n_real: int
    n_virtual: int

    def __post_init__(self):
        if self.n_real + self.n_virtual != len(self.points):
            raise ValueError("counts do not sum to the point total")
        tally_real = sum(1 for p in self.points if p.tau == TAU_REAL)
        if tally_real != self.n_real:
            raise ValueError(
                f"tag tally mismatch: recorded {self.n_real} real, found {tally_real}"
            )

    def __len__(self) -> int:
        return len(self.points)

    def to_array(self) -> np.ndarray:
        return points_to_array(self.points)

    @classmethod
    def from_points(cls, points: list[Point8D]) -> "FusedCloud":
        n_real = sum(1 for p in points if p.tau == TAU_REAL)
        return cls(points, n_real, len(points) - n_real)


def encode_lidar(raw) -> list[Point8D]:
    """Raw (x, y, z, intensity) records into 8-D points: tau = 2, rgb = 0."""
    out = []
    for rec in raw:
        x, y, z, intensity = (float(v) for v in rec)
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            raise ValueError(f"non-finite coordinates in LiDAR record {rec!r}")
        out.append(Point8D(x, y, z, intensity, 0.0, 0.0, 0.0, TAU_REAL))
    return out


def paint_points(real: list[Point8D], image, calib) -> list[Point8D]:
    """Color in-frame points with their nearest pixel; others keep rgb = 0.

    Never touches position, intensity, or modality tag.
    """
    from .calib import project_points, round_half_up

    if not real:
        return []
    pts = np.array([[p.x, p.y, p.z] for p in real])
    u, v, depth = project_points(pts, calib)
    out = []
    for p, ui, vi, di in zip(real, u, v, depth):
        r = g = b = 0.0
        if di > 0:
            pu, pv = int(round_half_up(ui)), int(round_half_up(vi))
            if 0 <= pu < image.width and 0 <= pv < image.height:
                r, g, b = image.pixels[pv, pu]
        out.append(Point8D(p.x, p.y, p.z, p.intensity, r, g, b, p.tau))
    return out


def early_fuse(real: list[Point8D], virtual: list[Point8D]) -> FusedCloud:
    """Concatenate real points then virtual points, recording counts."""
    for p in real:
        if p.tau != TAU_REAL:
            raise ValueError("real input contains a point tagged as virtual")
    for p in virtual:
        if p.tau != TAU_VIRTUAL:
            raise ValueError("virtual input contains a point tagged as real")
    return FusedCloud(list(real) + list(virtual), len(real), len(virtual))


def near_field_dropout(
    cloud: FusedCloud, radius: float, drop_prob: float, seed: int
) -> FusedCloud:
    """Drop each point with horizontal range < radius with probability drop_prob."""
    if not 0 <= drop_prob <= 1:
        raise ValueError("drop_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(cloud.points))
    kept = [
        p
        for p, d in zip(cloud.points, draws)
        if p.horizontal_range >= radius or d >= drop_prob
    ]
    return FusedCloud.from_points(kept)


def read_velodyne(path) -> np.ndarray:
    """KITTI velodyne binary: little-endian float32 (x, y, z, intensity) quadruples."""
    blob = Path(path).read_bytes()
    if len(blob) % 16 != 0:
        raise ValueError(f"{path}: length {len(blob)} is not a multiple of 16 bytes")
    return np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_velodyne(points: np.ndarray, path) -> None:
    arr = np.asarray(points, dtype="<f4").reshape(-1, 4)
    Path(path).write_bytes(arr.tobytes())
