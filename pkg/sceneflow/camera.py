"""Pinhole projection, unprojection and rigid pose algebra."""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.spatial.transform import Rotation

from sceneflow.grids import FieldGrid, SceneFlowError, ValidityMask, as_bool

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-6
INTERP_MODES = ("bilinear", "nearest")


class CameraError(SceneFlowError):
    """Raised for invalid intrinsics or poses."""
    pass


class CameraIntrinsics(BaseModel):
    """Skew-free pinhole intrinsics in pixels."""

    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float

    @model_validator(mode="after")
    def _positive_focal(self) -> "CameraIntrinsics":
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        return self

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @classmethod
    def from_matrix(cls, k: Sequence) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=np.float64).reshape(3, 3)
        if k[0, 1] != 0.0 or k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0 or k[2, 2] != 1.0:
            raise CameraError("intrinsics matrix must be a skew-free pinhole matrix")
        return cls(fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]))


class RelativePose(BaseModel):
    """Rigid transform x -> R x + t, mapping camera-1 coordinates to camera-2."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _rotation(cls, value):
        r = np.array(value, dtype=np.float64, copy=True)
        if r.shape != (3, 3):
            raise CameraError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOLERANCE, rtol=0.0):
            raise CameraError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise CameraError("rotation determinant is not +1")
        r.setflags(write=False)
        return r

    @field_validator("translation", mode="before")
    @classmethod
    def _translation(cls, value):
        t = np.array(value, dtype=np.float64, copy=True).reshape(-1)
        if t.shape != (3,):
            raise CameraError(f"translation must be a 3-vector, got {t.shape}")
        if not np.isfinite(t).all():
            raise CameraError("translation must be finite")
        t.setflags(write=False)
        return t

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: Sequence) -> "RelativePose":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise CameraError("homogeneous pose must end with row [0, 0, 0, 1]")
        return cls(rotation=m[:3, :3], translation=m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: Sequence, translation: Sequence) -> "RelativePose":
        """Build a pose from an axis-angle vector (radians) and a translation."""
        rotation = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        return cls(rotation=rotation, translation=translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RelativePose":
        return RelativePose(rotation=self.rotation.T, translation=-self.rotation.T @ self.translation)

    def compose(self, right: "RelativePose") -> "RelativePose":
        """Return self o right, i.e. apply ``right`` first."""
        return RelativePose(
            rotation=self.rotation @ right.rotation,
            translation=self.rotation @ right.translation + self.translation,
        )

    def apply(self, points: np.ndarray, inverse: bool = False) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if inverse:
            return (points - self.translation) @ self.rotation
        return points @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())


def pixel_lattice(height: int, width: int) -> np.ndarray:
    """Return an H x W x 2 float64 array of (u, v) pixel coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def project_points(points: np.ndarray, k: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Project float64 points (..., 3); returns (uv, valid) with uv = 0 where z <= 0."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = k.fx * points[..., 0] / safe_z + k.cx
    v = k.fy * points[..., 1] / safe_z + k.cy
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = 0.0
    return uv, valid


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Unproject pixel coordinates (..., 2) with depths (...) to float64 points (..., 3)."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - k.cx) * depth / k.fx
    y = (uv[..., 1] - k.cy) * depth / k.fy
    return np.stack([x, y, depth], axis=-1)


def project(
    points: FieldGrid, k: CameraIntrinsics, mask: Optional[ValidityMask] = None
) -> Tuple[FieldGrid, ValidityMask]:
    """Project a pointmap to pixel coordinates.

    Pixels with non-positive depth are marked invalid in the returned mask and
    carry (0, 0); this is not an error.
    """
    if points.channels != 3:
        raise CameraError(f"project expects a 3-channel pointmap, got {points.channels}")
    uv, positive = project_points(points.as_f64(), k)
    valid = positive & as_bool(mask, points.shape)
    uv[~valid] = 0.0
    return FieldGrid(data=uv), ValidityMask.from_bool(valid)


def unproject(
    depth: FieldGrid, k: CameraIntrinsics, mask: Optional[ValidityMask] = None
) -> Tuple[FieldGrid, ValidityMask]:
    """Lift a depth map to a pointmap in the camera frame; the mask passes through."""
    if depth.channels != 1:
        raise CameraError(f"unproject expects a 1-channel depth map, got {depth.channels}")
    points = unproject_pixels(pixel_lattice(depth.height, depth.width), depth.as_f64()[..., 0], k)
    valid = as_bool(mask, depth.shape)
    return FieldGrid(data=points), ValidityMask.from_bool(valid)


def transform(points: FieldGrid, pose: RelativePose, inverse: bool = False) -> FieldGrid:
    """Apply x -> R x + t, or x -> R^T (x - t) when ``inverse`` is set."""
    if points.channels != 3:
        raise CameraError(f"transform expects a 3-channel pointmap, got {points.channels}")
    return FieldGrid(data=pose.apply(points.as_f64(), inverse=inverse))


def sample_grid(
    grid: np.ndarray, valid: np.ndarray, at: np.ndarray, mode: str = "bilinear"
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample an H x W x C float64 array at subpixel (u, v) coordinates.

    Bilinear mode blends the four neighbours; the sample is valid only when
    every neighbour carrying a non-zero weight is in bounds and valid, so an
    integer coordinate only consults its own pixel. Nearest mode rounds to the
    closest pixel. Invalid samples are zero.
    """
    if mode not in INTERP_MODES:
        raise CameraError(f"unknown interpolation mode: {mode}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[..., None]
    height, width, channels = grid.shape
    at = np.asarray(at, dtype=np.float64)
    u = at[..., 0]
    v = at[..., 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -1.0)
    v = np.where(finite, v, -1.0)
    out_shape = u.shape + (channels,)

    if mode == "nearest":
        ui = np.floor(u + 0.5).astype(np.int64)
        vi = np.floor(v + 0.5).astype(np.int64)
        inside = finite & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
        uc = np.clip(ui, 0, width - 1)
        vc = np.clip(vi, 0, height - 1)
        ok = inside & valid[vc, uc]
        values = np.where(ok[..., None], grid[vc, uc], 0.0)
        return values.reshape(out_shape), ok

    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    du = u - u0
    dv = v - v0
    values = np.zeros(out_shape, dtype=np.float64)
    ok = finite.copy()
    for oy, ox, weight in (
        (0, 0, (1.0 - du) * (1.0 - dv)),
        (0, 1, du * (1.0 - dv)),
        (1, 0, (1.0 - du) * dv),
        (1, 1, du * dv),
    ):
        uu = u0 + ox
        vv = v0 + oy
        used = weight != 0.0
        inside = (uu >= 0) & (uu < width) & (vv >= 0) & (vv < height)
        uc = np.clip(uu, 0, width - 1)
        vc = np.clip(vv, 0, height - 1)
        neighbour_ok = inside & valid[vc, uc]
        ok &= ~used | neighbour_ok
        values += np.where(used[..., None], weight[..., None] * grid[vc, uc], 0.0)
    values[~ok] = 0.0
    return values, ok


def sample_bilinear(
    grid: FieldGrid,
    mask: Optional[ValidityMask],
    at: np.ndarray,
    mode: str = "bilinear",
) -> Tuple[np.ndarray, np.ndarray]:
    """Look up ``grid`` at subpixel coordinates ``at`` (..., 2) in (u, v) order.

    Returns the float64 values (..., C) and a boolean validity array (...).
    """
    return sample_grid(grid.as_f64(), as_bool(mask, grid.shape), at, mode=mode)


def sample_flow_targets(
    field: np.ndarray, valid: np.ndarray, flow: np.ndarray, mode: str = "bilinear"
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample ``field`` at p + flow[p] for every pixel p of the lattice."""
    height, width = flow.shape[:2]
    targets = pixel_lattice(height, width) + np.asarray(flow, dtype=np.float64)
    return sample_grid(field, valid, targets, mode=mode)

