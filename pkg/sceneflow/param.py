"""Scene-flow parameterizations and the conversions between them.

- CSO: camera-space 3D offsets added to frame-1 points.
- DDOF: optical flow (u, v) plus depth change, stored at the source pixel.
- EP: 3D end points in the camera-2 frame.
"""
import logging
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from sceneflow.camera import (
    CameraIntrinsics,
    pixel_lattice,
    project_points,
    sample_flow_targets,
    unproject_pixels,
)
from sceneflow.grids import FieldGrid, SceneFlowError, ValidityMask, as_bool

logger = logging.getLogger(__name__)


class ConversionError(SceneFlowError):
    """Raised when parameterization inputs do not line up."""
    pass


class SFKind(str, Enum):
    CSO = "cso"
    DDOF = "ddof"
    EP = "ep"


class SFRepresentation(BaseModel):
    """A scene-flow payload tagged with how its three channels are read."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: SFKind
    payload: FieldGrid


def _check_same(*grids: FieldGrid) -> None:
    shape = grids[0].shape
    for grid in grids[1:]:
        if grid.shape != shape:
            raise ConversionError(f"shape mismatch: {grid.shape} vs {shape}")


def cso_to_ep(sf: FieldGrid, x1: FieldGrid) -> FieldGrid:
    _check_same(sf, x1)
    return FieldGrid(data=x1.as_f64() + sf.as_f64())


def ep_to_cso(ep: FieldGrid, x1: FieldGrid) -> FieldGrid:
    _check_same(ep, x1)
    return FieldGrid(data=ep.as_f64() - x1.as_f64())


def ddof_to_cso(
    mu: FieldGrid,
    dd: FieldGrid,
    x1: FieldGrid,
    k: CameraIntrinsics,
    mask: Optional[ValidityMask] = None,
    interp: str = "bilinear",
) -> Tuple[FieldGrid, ValidityMask]:
    """Compose scene flow from optical flow and depth change.

    D2 = x1_z + dd is formed on the frame-1 lattice, unprojected, and the
    resulting pointmap is sampled at p + mu; the scene flow is that sample
    minus x1. Samples that leave the image or touch an invalid neighbour
    (non-positive D2, masked x1) are masked out and set to zero.
    """
    _check_same(mu, dd, x1)
    if mu.channels != 2 or dd.channels != 1 or x1.channels != 3:
        raise ConversionError("ddof_to_cso expects mu (C=2), dd (C=1), x1 (C=3)")
    height, width = x1.shape
    points1 = x1.as_f64()
    depth2 = points1[..., 2] + dd.as_f64()[..., 0]
    lattice_valid = as_bool(mask, x1.shape) & (points1[..., 2] > 0) & (depth2 > 0)
    points2 = unproject_pixels(pixel_lattice(height, width), depth2, k)
    end, valid = sample_flow_targets(points2, lattice_valid, mu.as_f64(), mode=interp)
    valid &= as_bool(mask, x1.shape)
    sf = end - points1
    sf[~valid] = 0.0
    return FieldGrid(data=sf), ValidityMask.from_bool(valid)


def cso_to_ddof(
    sf: FieldGrid,
    x1: FieldGrid,
    k: CameraIntrinsics,
    mask: Optional[ValidityMask] = None,
) -> Tuple[FieldGrid, FieldGrid, ValidityMask]:
    """Split scene flow into optical flow and depth change at the source pixel.

    mu = project(x1 + sf) - project(x1) and dd = (x1 + sf)_z - x1_z. Pixels
    whose start or end point is not in front of the camera are invalidated.
    """
    _check_same(sf, x1)
    points1 = x1.as_f64()
    end = points1 + sf.as_f64()
    uv1, ok1 = project_points(points1, k)
    uv2, ok2 = project_points(end, k)
    valid = ok1 & ok2 & as_bool(mask, x1.shape)
    mu = uv2 - uv1
    dd = end[..., 2:3] - points1[..., 2:3]
    mu[~valid] = 0.0
    dd[~valid] = 0.0
    return FieldGrid(data=mu), FieldGrid(data=dd), ValidityMask.from_bool(valid)


def pack_ddof(mu: FieldGrid, dd: FieldGrid) -> FieldGrid:
    """Stack (mu_u, mu_v, dd) into one 3-channel payload."""
    return FieldGrid(data=np.concatenate([mu.data, dd.data], axis=-1))


def unpack_ddof(payload: FieldGrid) -> Tuple[FieldGrid, FieldGrid]:
    return FieldGrid(data=payload.data[..., :2]), FieldGrid(data=payload.data[..., 2:3])


def to_cso(
    rep: SFRepresentation,
    x1: FieldGrid,
    k: CameraIntrinsics,
    mask: Optional[ValidityMask] = None,
    interp: str = "bilinear",
) -> Tuple[FieldGrid, ValidityMask]:
    valid = ValidityMask.from_bool(as_bool(mask, x1.shape))
    if rep.kind == SFKind.CSO:
        return rep.payload, valid
    if rep.kind == SFKind.EP:
        return ep_to_cso(rep.payload, x1), valid
    mu, dd = unpack_ddof(rep.payload)
    return ddof_to_cso(mu, dd, x1, k, mask=mask, interp=interp)


def convert(
    rep: SFRepresentation,
    target: SFKind,
    x1: FieldGrid,
    k: CameraIntrinsics,
    mask: Optional[ValidityMask] = None,
    interp: str = "bilinear",
) -> Tuple[SFRepresentation, ValidityMask]:
    """Convert ``rep`` to ``target`` through CSO; returns the new payload and mask."""
    target = SFKind(target)
    sf, valid = to_cso(rep, x1, k, mask=mask, interp=interp)
    if target == SFKind.CSO:
        payload = sf
    elif target == SFKind.EP:
        payload = cso_to_ep(sf, x1)
    else:
        mu, dd, valid = cso_to_ddof(sf, x1, k, mask=valid)
        payload = pack_ddof(mu, dd)
    logger.debug(f"Converted scene flow {rep.kind.value} -> {target.value}, {valid.count()} valid pixels")
    return SFRepresentation(kind=target, payload=payload), valid
