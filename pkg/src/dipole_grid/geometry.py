"""Head model, sensor placement, ROI boxes and voxel grids."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .rng import make_rng


class GeometryError(ValueError):
    pass


class Modality(str, enum.Enum):
    MEG = "MEG"
    EEG = "EEG"


def _vec3(v, name):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise GeometryError(f"{name} must be a 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class HeadModel:
    """Single-sphere head model; lengths in cm."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center, "center"))
        if not self.radius > 0:
            raise GeometryError("head radius must be positive")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.linalg.norm(p - self.center, axis=1) < self.radius

    def bounding_box(self) -> "RoiBox":
        lo = self.center - self.radius
        hi = self.center + self.radius
        return RoiBox(tuple(zip(lo, hi)))

    def to_dict(self):
        return {"center": self.center.tolist(), "radius": float(self.radius)}

    @classmethod
    def from_dict(cls, d):
        return cls(center=d["center"], radius=d["radius"])


@dataclass(frozen=True)
class SensorArray:
    positions: np.ndarray
    modality: Modality = Modality.MEG
    conductivity: Optional[float] = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise GeometryError("sensor positions must be an (L, 3) array with L >= 1")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.modality is Modality.EEG:
            if self.conductivity is None or not self.conductivity > 0:
                raise GeometryError("EEG sensors need a positive conductivity")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def check_outside(self, head: HeadModel):
        if head.contains(self.positions).any():
            raise GeometryError("all sensors must lie strictly outside the head sphere")

    def to_dict(self):
        d = {
            "modality": self.modality.value,
            "count": self.count,
            "positions": self.positions.tolist(),
        }
        if self.conductivity is not None:
            d["conductivity"] = float(self.conductivity)
        return d

    @classmethod
    def from_dict(cls, d):
        pos = np.asarray(d["positions"], dtype=float)
        if "count" in d and int(d["count"]) != pos.shape[0]:
            raise GeometryError("sensor count does not match number of positions")
        return cls(pos, Modality(d.get("modality", "MEG")), d.get("conductivity"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SensorArray":
        return cls.from_dict(json.loads(text))


def place_sensors(head: HeadModel, count: int, seed: int, offset: float = 0.5,
                  modality=Modality.MEG, conductivity=None) -> SensorArray:
    """Uniform random sensors on the upper hemisphere, ``offset`` cm above the scalp.

    The polar coordinate is drawn with uniform ``cos(theta)`` so points are
    area-uniform on the hemisphere.
    """
    if count < 1:
        raise GeometryError("count must be >= 1")
    if not offset > 0:
        raise GeometryError("sensor offset must be positive")
    rng = make_rng(seed)
    u = rng.random((count, 2))
    cos_t = u[:, 0]
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = 2.0 * np.pi * u[:, 1]
    unit = np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
    pos = head.center + (head.radius + offset) * unit
    return SensorArray(pos, modality, conductivity)


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box I_1 x I_2 x I_3 (cm)."""

    intervals: tuple

    def __post_init__(self):
        iv = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if len(iv) != 3:
            raise GeometryError("ROI needs exactly three intervals")
        for lo, hi in iv:
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise GeometryError(f"empty or invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "intervals", iv)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.intervals])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.intervals])

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def intersects_ball(self, head: HeadModel) -> bool:
        nearest = np.clip(head.center, self.lower, self.upper)
        return bool(np.linalg.norm(nearest - head.center) <= head.radius)

    def clip_to(self, other: "RoiBox") -> "RoiBox":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        hi = np.maximum(hi, lo)
        return RoiBox(tuple(zip(lo, hi)))

    def contains_box(self, other: "RoiBox", atol=1e-12) -> bool:
        return bool(np.all(other.lower >= self.lower - atol) and np.all(other.upper <= self.upper + atol))

    def to_list(self):
        return [list(iv) for iv in self.intervals]


@dataclass(frozen=True)
class VoxelGrid:
    roi: RoiBox
    mesh: tuple
    centers: np.ndarray

    @property
    def K(self) -> int:
        return int(np.prod(self.mesh))

    @property
    def widths(self) -> np.ndarray:
        return self.roi.widths / np.asarray(self.mesh)

    @property
    def cell_volume(self) -> float:
        # degenerate (zero-width) axes contribute a factor of one
        w = self.widths
        return float(np.prod(np.where(w > 0, w, 1.0)))

    def to_dict(self):
        return {
            "roi": self.roi.to_list(),
            "mesh": list(self.mesh),
            "K": self.K,
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        grid = discretize(RoiBox(tuple(map(tuple, d["roi"]))), tuple(d["mesh"]))
        if "K" in d and int(d["K"]) != grid.K:
            raise GeometryError("grid K does not match mesh")
        return grid


def discretize(roi: RoiBox, mesh: Sequence[int]) -> VoxelGrid:
    mesh = tuple(int(m) for m in mesh)
    if len(mesh) != 3 or min(mesh) < 1:
        raise GeometryError("mesh must be three integers >= 1")
    w = roi.widths
    for d in range(3):
        if w[d] == 0 and mesh[d] > 1:
            raise GeometryError(f"axis {d} has zero width but mesh {mesh[d]} > 1")
    axes = [roi.lower[d] + (np.arange(mesh[d]) + 0.5) * w[d] / mesh[d] for d in range(3)]
    # x fastest: index = i + K1*(j + K2*k)
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    centers = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    centers.setflags(write=False)
    return VoxelGrid(roi, mesh, centers)


def voxel_of(grid: VoxelGrid, point) -> Optional[int]:
    """Index of the cell containing ``point``; cells are half-open except at the ROI's upper faces."""
    p = _vec3(point, "point")
    lo, hi = grid.roi.lower, grid.roi.upper
    if np.any(p < lo) or np.any(p > hi):
        return None
    idx = []
    for d in range(3):
        m = grid.mesh[d]
        if hi[d] == lo[d]:
            idx.append(0)
            continue
        i = int(np.floor((p[d] - lo[d]) / (hi[d] - lo[d]) * m))
        idx.append(min(i, m - 1))
    i, j, k = idx
    return i + grid.mesh[0] * (j + grid.mesh[1] * k)


def axis_coordinates(grid: VoxelGrid):
    """Per-axis center coordinates (length K_d each)."""
    return [grid.roi.lower[d] + (np.arange(grid.mesh[d]) + 0.5) * grid.widths[d] for d in range(3)]
