from abc import ABC, abstractmethod
from typing import ClassVar, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.transform import Rotation

from sceneflow.camera import RelativePose
from sceneflow.grids import SceneFlowError

# Ray parameters at or below this are behind the ray origin.
HIT_EPSILON = 1e-9


class SceneError(SceneFlowError):
    """Raised for degenerate synthetic scenes."""
    pass


def _vector(value: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64).reshape(-1)
    if array.shape != (3,) or not np.isfinite(array).all():
        raise SceneError(f"{name} must be a finite 3-vector, got {value}")
    return array


class RigidMotion(BaseModel):
    """Rotation (axis-angle, radians) and translation between the two frames.

    Object motions act about the object's centre: P' = R (P - c) + c + t.
    Used as a camera motion, ``pose()`` maps camera-1 coordinates to camera-2.
    """

    model_config = ConfigDict(frozen=True)

    rotvec: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)
    translation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0], min_length=3, max_length=3)

    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(np.asarray(self.rotvec, dtype=np.float64)).as_matrix()

    def pose(self) -> RelativePose:
        return RelativePose.from_rotvec(self.rotvec, self.translation)

    def is_identity(self) -> bool:
        return not any(self.rotvec) and not any(self.translation)

    def apply(self, points: np.ndarray, center: np.ndarray) -> np.ndarray:
        r = self.rotation()
        return (np.asarray(points, dtype=np.float64) - center) @ r.T + center + np.asarray(self.translation)

    def invert(self, points: np.ndarray, center: np.ndarray) -> np.ndarray:
        r = self.rotation()
        return (np.asarray(points, dtype=np.float64) - center - np.asarray(self.translation)) @ r + center

    def invert_directions(self, directions: np.ndarray) -> np.ndarray:
        return np.asarray(directions, dtype=np.float64) @ self.rotation()


class Primitive(ABC):
    """Base class for ray-traceable primitives.

    Rays are ``origin + s * direction`` with unnormalized directions; every
    intersection routine returns the smallest ``s > HIT_EPSILON`` per ray, or
    ``inf`` on a miss.
    """

    kind: ClassVar[str] = ""
    parameters: ClassVar[Tuple[str, ...]] = ()

    @property
    @abstractmethod
    def center(self) -> np.ndarray:
        """Pivot of the primitive's rigid motion."""
        pass

    @abstractmethod
    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Nearest ray parameter of each ray (N x 3 origins or one 3-vector, N x 3 directions)."""
        pass

    @abstractmethod
    def contains(self, point: np.ndarray) -> bool:
        """True when ``point`` is inside or on the surface."""
        pass

    def intersect_moved(self, origins: np.ndarray, directions: np.ndarray, motion: RigidMotion) -> np.ndarray:
        """Intersect with the primitive after ``motion``; ray parameters are unchanged."""
        if motion.is_identity():
            return self.intersect(origins, directions)
        local_origins = motion.invert(origins, self.center)
        local_directions = motion.invert_directions(directions)
        return self.intersect(local_origins, local_directions)

    def contains_moved(self, point: np.ndarray, motion: RigidMotion) -> bool:
        return self.contains(motion.invert(point, self.center))


def _nearest(candidates: np.ndarray) -> np.ndarray:
    candidates = np.where(np.isfinite(candidates) & (candidates > HIT_EPSILON), candidates, np.inf)
    return candidates.min(axis=-1)


class Plane(Primitive):
    """Infinite plane n . X = offset."""

    kind = "plane"
    parameters = ("normal", "offset")

    def __init__(self, normal: Sequence[float], offset: float):
        self.normal = _vector(normal, "plane normal")
        if not self.normal.any():
            raise SceneError("plane normal must be non-zero")
        self.offset = float(offset)

    @property
    def center(self) -> np.ndarray:
        return self.normal * self.offset / float(self.normal @ self.normal)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        directions = np.asarray(directions, dtype=np.float64)
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
        denom = directions @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.offset - origins @ self.normal) / denom
        s = np.where(denom != 0.0, s, np.inf)
        return _nearest(s[..., None])

    def contains(self, point: np.ndarray) -> bool:
        return abs(float(np.asarray(point) @ self.normal) - self.offset) <= HIT_EPSILON


class Sphere(Primitive):
    kind = "sphere"
    parameters = ("center", "radius")

    def __init__(self, center: Sequence[float], radius: float):
        self._center = _vector(center, "sphere center")
        if not radius > 0:
            raise SceneError(f"sphere radius must be positive, got {radius}")
        self.radius = float(radius)

    @property
    def center(self) -> np.ndarray:
        return self._center

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        directions = np.asarray(directions, dtype=np.float64)
        offsets = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape) - self._center
        a = np.sum(directions * directions, axis=-1)
        b = np.sum(offsets * directions, axis=-1)
        c = np.sum(offsets * offsets, axis=-1) - self.radius ** 2
        disc = b * b - a * c
        root = np.sqrt(np.where(disc >= 0, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            near = (-b - root) / a
            far = (-b + root) / a
        hit = (disc >= 0) & (a > 0)
        candidates = np.stack([np.where(hit, near, np.inf), np.where(hit, far, np.inf)], axis=-1)
        return _nearest(candidates)

    def contains(self, point: np.ndarray) -> bool:
        return float(np.linalg.norm(np.asarray(point) - self._center)) <= self.radius


class Box(Primitive):
    """Oriented box; a zero half extent gives a flat card."""

    kind = "box"
    parameters = ("center", "half_extents", "orientation")

    def __init__(
        self,
        center: Sequence[float],
        half_extents: Sequence[float],
        orientation: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        self._center = _vector(center, "box center")
        self.half_extents = _vector(half_extents, "box half extents")
        if (self.half_extents < 0).any() or np.count_nonzero(self.half_extents) < 2:
            raise SceneError(f"box needs non-negative half extents with at most one zero, got {half_extents}")
        self.rotation = Rotation.from_rotvec(_vector(orientation, "box orientation")).as_matrix()

    @property
    def center(self) -> np.ndarray:
        return self._center

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        directions = np.asarray(directions, dtype=np.float64)
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
        # Slab test in box coordinates.
        o = (origins - self._center) @ self.rotation
        d = directions @ self.rotation
        h = self.half_extents
        parallel = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        inside_slab = np.abs(o) <= h
        lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = lo.max(axis=-1)
        t_far = hi.min(axis=-1)
        hit = t_near <= t_far
        candidates = np.stack([np.where(hit, t_near, np.inf), np.where(hit, t_far, np.inf)], axis=-1)
        return _nearest(candidates)

    def contains(self, point: np.ndarray) -> bool:
        local = (np.asarray(point, dtype=np.float64) - self._center) @ self.rotation
        return bool((np.abs(local) <= self.half_extents).all())
