"""Pseudo ground-truth scene flow from depth, optical flow and camera pose.

Every pixel p1 of frame 1 is lifted with its depth, moved to p2 = p1 + flow,
lifted again with the frame-2 depth found at p2, and the difference of the two
3D points is the scene flow. The native reference frame of the result is
camera 2: the start point lives in camera 1, the end point in camera 2.
"""
import json
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import settings
from sceneflow.camera import (
    CameraIntrinsics,
    RelativePose,
    pixel_lattice,
    sample_flow_targets,
    unproject,
    unproject_pixels,
)
from sceneflow.grids import FieldGrid, SceneFlowError, ValidityMask, as_bool
from sceneflow.tensors import SampleRecord

logger = logging.getLogger(__name__)

FRAMES = ("camera2", "camera1", "world")
RECIPE_FILE = "recipe.json"


class RecipeError(SceneFlowError):
    """Raised when a sample cannot be uplifted or reframed."""
    pass


class UpliftResult(BaseModel):
    """Uplifted scene flow, its validity, GT pointmaps and the cycle mask."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    sf: FieldGrid
    mask_sf: ValidityMask
    x1: FieldGrid
    x2: FieldGrid
    occlusion: ValidityMask
    cyc_skipped: bool = False
    alpha1: float = 0.01
    alpha2: float = 0.5
    interp: str = "bilinear"

    def provenance(self) -> dict:
        return {
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "interp": self.interp,
            "cyc_skipped": self.cyc_skipped,
        }


def cycle_check(
    flow_fwd: FieldGrid,
    flow_bwd: FieldGrid,
    alpha1: Optional[float] = None,
    alpha2: Optional[float] = None,
    interp: str = "bilinear",
    valid_bwd: Optional[ValidityMask] = None,
) -> ValidityMask:
    """Forward-backward consistency check.

    A pixel passes when |f(p) + b(p + f(p))|^2 < alpha1 (|f(p)|^2 + |b(p + f(p))|^2) + alpha2,
    with the backward flow sampled at the forward target. Targets whose
    backward flow cannot be sampled (out of bounds, or touching a pixel
    that ``valid_bwd`` marks invalid) fail the check.
    """
    alpha1 = settings.ALPHA1 if alpha1 is None else alpha1
    alpha2 = settings.ALPHA2 if alpha2 is None else alpha2
    if flow_fwd.shape != flow_bwd.shape or flow_fwd.channels != 2 or flow_bwd.channels != 2:
        raise RecipeError("cycle_check needs two 2-channel flows of the same shape")

    fwd = flow_fwd.as_f64()
    bwd_at, sampled = sample_flow_targets(flow_bwd.as_f64(), as_bool(valid_bwd, flow_bwd.shape), fwd, mode=interp)
    residual = np.sum((fwd + bwd_at) ** 2, axis=-1)
    bound = alpha1 * (np.sum(fwd ** 2, axis=-1) + np.sum(bwd_at ** 2, axis=-1)) + alpha2
    return ValidityMask.from_bool(sampled & (residual < bound))


def compose_validity(*masks: ValidityMask) -> ValidityMask:
    """Elementwise AND of same-shaped masks."""
    if not masks:
        raise RecipeError("compose_validity needs at least one mask")
    out = masks[0]
    for mask in masks[1:]:
        out = out & mask
    return out


def gt_pointmaps(sample: SampleRecord) -> Tuple[FieldGrid, FieldGrid]:
    """Unproject both depth maps; X2 is carried into the camera-1 frame."""
    x1, _ = unproject(sample.d1, sample.intrinsics)
    x2_cam2, _ = unproject(sample.d2, sample.intrinsics)
    x2 = sample.pose_1_to_2.apply(x2_cam2.as_f64(), inverse=True)
    return x1, FieldGrid(data=x2)


def uplift_arrays(
    d1: np.ndarray,
    d2: np.ndarray,
    flow: np.ndarray,
    k: CameraIntrinsics,
    m_d2: np.ndarray,
    interp: str = "bilinear",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Core uplift on float64 arrays.

    Returns (sf, x1, m_d2_at_p2) where sf = x2_cam2 - x1 and x2_cam2 lies on
    the ray through p2 at the frame-2 depth sampled there.
    """
    height, width = d1.shape[:2]
    lattice = pixel_lattice(height, width)
    x1 = unproject_pixels(lattice, d1.reshape(height, width), k)
    p2 = lattice + flow
    d2_at_p2, valid_at_p2 = sample_flow_targets(d2.reshape(height, width, 1), m_d2, flow, mode=interp)
    x2_cam2 = unproject_pixels(p2, d2_at_p2[..., 0], k)
    sf = x2_cam2 - x1
    return sf, x1, valid_at_p2


def uplift(
    sample: SampleRecord,
    alpha1: Optional[float] = None,
    alpha2: Optional[float] = None,
    interp: Optional[str] = None,
) -> UpliftResult:
    """Compute pseudo ground-truth scene flow, pointmaps and validity.

    Args:
        sample: Sample with d1, d2, flow_fwd, intrinsics and pose
        alpha1: Relative cycle-check tolerance (settings default)
        alpha2: Absolute cycle-check tolerance in squared pixels (settings default)
        interp: How D2 is looked up at p2, "bilinear" or "nearest"

    Returns:
        UpliftResult in the native camera-2 reference frame

    Raises:
        RecipeError: If a required field is missing
    """
    alpha1 = settings.ALPHA1 if alpha1 is None else alpha1
    alpha2 = settings.ALPHA2 if alpha2 is None else alpha2
    interp = settings.INTERP if interp is None else interp
    for name in ("d1", "d2", "flow_fwd"):
        if getattr(sample, name, None) is None:
            raise RecipeError(f"uplift requires field {name}")

    m_d1 = sample.mask("d1")
    m_d2 = sample.mask("d2")
    m_flow = sample.mask("flow_fwd")

    sf, x1, valid_at_p2 = uplift_arrays(
        sample.d1.as_f64(),
        sample.d2.as_f64(),
        sample.flow_fwd.as_f64(),
        sample.intrinsics,
        m_d2.as_bool(),
        interp=interp,
    )

    if sample.flow_bwd is None:
        logger.warning("No backward flow; forward-backward check skipped (cyc_skipped)")
        cyc = ValidityMask.ones(sample.height, sample.width)
        cyc_skipped = True
    else:
        cyc = cycle_check(
            sample.flow_fwd, sample.flow_bwd, alpha1, alpha2, interp="bilinear", valid_bwd=sample.mask("flow_bwd")
        )
        cyc_skipped = False

    mask_sf = compose_validity(m_flow, m_d1, ValidityMask.from_bool(valid_at_p2), cyc)
    sf[~mask_sf.as_bool()] = 0.0
    _, x2 = gt_pointmaps(sample)
    logger.debug(f"Uplift: {mask_sf.count()} of {sample.height * sample.width} pixels SF-valid")
    return UpliftResult(
        sf=FieldGrid(data=sf),
        mask_sf=mask_sf,
        x1=FieldGrid(data=x1),
        x2=x2,
        occlusion=cyc,
        cyc_skipped=cyc_skipped,
        alpha1=alpha1,
        alpha2=alpha2,
        interp=interp,
    )


def reframe_arrays(
    x1: np.ndarray,
    sf: np.ndarray,
    pose: RelativePose,
    target: str,
    world_pose: Optional[RelativePose] = None,
) -> np.ndarray:
    """Re-express camera-2-native scene flow (float64 arrays) in ``target``."""
    if target not in FRAMES:
        raise RecipeError(f"unknown reference frame: {target}")
    if target == "camera2":
        return np.array(sf, dtype=np.float64, copy=True)
    end = pose.apply(x1 + sf, inverse=True)
    if target == "camera1":
        return end - x1
    if world_pose is None:
        raise RecipeError("world reference frame requires a world-from-camera-1 pose")
    return world_pose.apply(end) - world_pose.apply(x1)


def reframe_sceneflow(
    result: UpliftResult,
    pose: RelativePose,
    target: str,
    world_pose: Optional[RelativePose] = None,
) -> FieldGrid:
    """Re-express the uplifted scene flow in another reference frame.

    ``camera2`` returns the native flow; ``camera1`` carries the end point
    back into camera 1 with the inverse pose; ``world`` maps both end points
    through ``world_pose`` (world-from-camera-1). Invalid pixels stay zero.
    """
    reframed = reframe_arrays(result.x1.as_f64(), result.sf.as_f64(), pose, target, world_pose)
    reframed[~result.mask_sf.as_bool()] = 0.0
    return FieldGrid(data=reframed)


def augment_sample(sample: SampleRecord, result: UpliftResult) -> SampleRecord:
    """Return ``sample`` carrying the uplifted sf, m_sf and GT pointmaps."""
    return sample.replace(sf=result.sf, m_sf=result.mask_sf, x1=result.x1, x2=result.x2, sf_kind="cso")


def write_recipe_provenance(result: UpliftResult, directory: Union[str, Path]) -> None:
    path = Path(directory) / RECIPE_FILE
    try:
        path.write_text(json.dumps(result.provenance(), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise RecipeError(f"failed to write {path}: {e}") from e


def read_recipe_provenance(directory: Union[str, Path]) -> Optional[dict]:
    path = Path(directory) / RECIPE_FILE
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))
