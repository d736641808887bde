"""Pinhole camera geometry: inverse projection, rigid motion, forward projection.

Conventions used throughout the package:

* pixel ``(i, j)``: ``i`` runs along the width (column), ``j`` along the
  height (row); grids are stored ``[j, i]``.
* camera frame: x right, y down, z forward; depth is camera-frame z.
* continuous pixel coordinates ``(u, v)`` are snapped to a raster cell with
  round-half-away-from-zero, and the in-frame test uses the snapped cell.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput

ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def round_half_away(x):
    """Round to the nearest integer, ties away from zero (returns floats)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.floor(x + 0.5), -np.floor(-x + 0.5))


@dataclass(frozen=True)
class Intrinsics:
    """Zero-skew pinhole intrinsics plus frame size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInput("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInput("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise InvalidInput("frame dimensions must be integers")
        if self.width < 1 or self.height < 1:
            raise InvalidInput("frame dimensions must be >= 1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def cell_count(self):
        return self.width * self.height

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def rays(self, i, j):
        """Unit-depth rays ``((i-cx)/fx, (j-cy)/fy, 1)`` for pixel arrays."""
        i = np.asarray(i, dtype=np.float64)
        j = np.asarray(j, dtype=np.float64)
        return np.stack([(i - self.cx) / self.fx,
                         (j - self.cy) / self.fy,
                         np.ones_like(i)], axis=-1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                       float(d["cy"]), d["width"], d["height"])
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"bad intrinsics document: {exc}") from exc


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidInput("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInput("pose must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise InvalidInput("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidInput("rotation determinant is not +1")
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation=(0.0, 0.0, 0.0)):
        """Build a pose from a rotation vector (Rodrigues) and a translation."""
        w = np.asarray(axis_angle, dtype=np.float64)
        theta = float(np.linalg.norm(w))
        if theta == 0.0:
            return cls(np.eye(3), translation)
        k = w / theta
        kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        r = np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)
        # re-orthonormalize so the 1e-9 invariant holds for any angle
        u, _, vt = np.linalg.svd(r)
        return cls(u @ vt, translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other):
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self):
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            r = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
            t = np.asarray(d["translation"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"bad pose document: {exc}") from exc
        return cls(r, t)


def invert(pose):
    return pose.inverse()


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth in meters with a validity mask.

    Non-finite values are rejected outright; invalid entries are stored as 0.
    """

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        valid = np.array(self.validity, dtype=bool)
        if vals.ndim != 2 or vals.shape != valid.shape:
            raise InvalidInput("depth values and validity must be matching 2-D grids")
        if not np.all(np.isfinite(vals)):
            raise InvalidInput("depth map contains NaN or Inf")
        if np.any(vals[valid] <= 0):
            raise InvalidInput("valid depths must be strictly positive")
        vals[~valid] = 0.0
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "validity", _frozen(valid, dtype=bool))

    @classmethod
    def from_array(cls, values, validity=None):
        values = np.asarray(values, dtype=np.float64)
        if validity is None:
            validity = values > 0
        return cls(values, validity)

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values):
        return DepthMap(values, self.validity)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """``n`` camera-frame points, each tagged with its source pixel ``(i, j)``."""

    points: np.ndarray
    source_pixel: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        src = np.array(self.source_pixel, dtype=np.int64).reshape(-1, 2)
        if len(pts) != len(src):
            raise InvalidInput("points and source_pixel lengths differ")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("point coordinates must be finite")
        if len(src) and (src[:, 0].min() < 0 or src[:, 0].max() >= self.width
                         or src[:, 1].min() < 0 or src[:, 1].max() >= self.height):
            raise InvalidInput("source pixel outside originating frame")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "source_pixel", _frozen(src, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    @property
    def source_cells(self):
        """Row-major cell index of each point's source pixel."""
        return self.source_pixel[:, 1] * self.width + self.source_pixel[:, 0]


class Status(enum.IntEnum):
    IN_FRAME_POSITIVE = 0
    OUT_OF_FRAME = 1
    NEGATIVE_IN_FRAME = 2


@dataclass(frozen=True, eq=False)
class ProjectionOutcome:
    """Per-point projection into a target frame.

    ``raster_index`` is ``-1`` for out-of-frame points.
    """

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    raster_index: np.ndarray
    status: np.ndarray
    width: int
    height: int

    def __len__(self):
        return len(self.depth)

    def indices(self, status):
        return np.flatnonzero(self.status == status)

    @property
    def in_frame_positive(self):
        return self.indices(Status.IN_FRAME_POSITIVE)

    @property
    def negative_in_frame(self):
        return self.indices(Status.NEGATIVE_IN_FRAME)


@dataclass(frozen=True, eq=False)
class Registration:
    """Raster grid of 3-D coordinates; unpopulated cells hold zeros."""

    coords: np.ndarray
    populated: np.ndarray
    owner: np.ndarray = field(default=None)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        populated = np.array(self.populated, dtype=bool)
        if coords.shape != populated.shape + (3,):
            raise InvalidInput("coords must be (H, W, 3) matching populated (H, W)")
        coords[~populated] = 0.0
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "populated", _frozen(populated, dtype=bool))
        if self.owner is not None:
            object.__setattr__(self, "owner", _frozen(self.owner, dtype=np.int64))

    @property
    def shape(self):
        return self.populated.shape


def inverse_project(depth, intr):
    """Lift every valid depth pixel to a camera-frame point (row-major order)."""
    if depth.shape != intr.shape:
        raise InvalidInput(f"depth map {depth.shape} does not match intrinsics {intr.shape}")
    jj, ii = np.nonzero(depth.validity)
    d = depth.values[jj, ii]
    x = (ii - intr.cx) * d / intr.fx
    y = (jj - intr.cy) * d / intr.fy
    return PointCloud(np.stack([x, y, d], axis=1), np.stack([ii, jj], axis=1),
                      intr.width, intr.height)


def transform(cloud, pose):
    return PointCloud(pose.apply(cloud.points), cloud.source_pixel,
                      cloud.width, cloud.height)


def project(cloud, intr):
    """Project points into ``intr``'s frame and classify each one.

    Points with ``z == 0`` (or non-finite image coordinates) are out of frame.
    """
    pts = cloud.points
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * x / z + intr.cx
        v = intr.fy * y / z + intr.cy
    ru = round_half_away(u)
    rv = round_half_away(v)
    with np.errstate(invalid="ignore"):
        in_frame = ((z != 0) & np.isfinite(u) & np.isfinite(v)
                    & (ru >= 0) & (ru < intr.width) & (rv >= 0) & (rv < intr.height))
    status = np.full(len(z), Status.OUT_OF_FRAME, dtype=np.int8)
    status[in_frame & (z > 0)] = Status.IN_FRAME_POSITIVE
    status[in_frame & (z < 0)] = Status.NEGATIVE_IN_FRAME
    raster = np.full(len(z), -1, dtype=np.int64)
    raster[in_frame] = (rv[in_frame].astype(np.int64) * intr.width
                        + ru[in_frame].astype(np.int64))
    return ProjectionOutcome(u, v, z.copy(), raster, status, intr.width, intr.height)


def raster_index(i, j, width):
    """Absolute cell index ``j * width + i``."""
    if width < 1:
        raise InvalidInput("width must be >= 1")
    if not 0 <= i < width:
        raise InvalidInput(f"column {i} outside [0, {width})")
    if j < 0:
        raise InvalidInput(f"row {j} is negative")
    return j * width + i


def splat(depth, pose, intr):
    """Lift ``depth``, move it by ``pose`` and project into ``intr``'s frame."""
    cloud = inverse_project(depth, intr)
    moved = transform(cloud, pose)
    return cloud, moved, project(moved, intr)
