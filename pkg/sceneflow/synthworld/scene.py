"""Scene descriptions and seeded random scene corpora.

All geometry is given in camera-1 coordinates at time 1, which also serve as
the world frame. ``camera_motion`` is the pose mapping camera-1 coordinates
to camera-2 coordinates.
"""
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sceneflow.camera import CameraIntrinsics
from .factory import PrimitiveFactory
from .primitives import Primitive, RigidMotion, SceneError

logger = logging.getLogger(__name__)

SCENE_FILE = "scene.json"


class ObjectSpec(BaseModel):
    """One primitive and its rigid motion between the two frames."""

    model_config = ConfigDict(frozen=True)

    kind: str
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    half_extents: Optional[List[float]] = None
    orientation: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    normal: Optional[List[float]] = None
    offset: Optional[float] = None
    motion: RigidMotion = Field(default_factory=RigidMotion)

    @model_validator(mode="after")
    def _known_kind(self) -> "ObjectSpec":
        if self.kind not in PrimitiveFactory.get_supported_primitives():
            raise SceneError(f"unknown primitive kind: {self.kind}")
        missing = [name for name in PrimitiveFactory.get_parameters(self.kind) if getattr(self, name) is None]
        if missing:
            raise SceneError(f"{self.kind} is missing {', '.join(missing)}")
        return self

    def build(self) -> Primitive:
        params = {name: getattr(self, name) for name in PrimitiveFactory.get_parameters(self.kind)}
        return PrimitiveFactory.create_primitive(self.kind, **params)


class SceneSpec(BaseModel):
    """A two-frame synthetic scene: static background plane plus moving objects."""

    model_config = ConfigDict(frozen=True)

    background: ObjectSpec
    objects: List[ObjectSpec] = Field(default_factory=list)
    camera_motion: RigidMotion = Field(default_factory=RigidMotion)
    intrinsics: CameraIntrinsics
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    seed: int = 0
    metric: bool = True

    @model_validator(mode="after")
    def _check_geometry(self) -> "SceneSpec":
        if self.background.kind != "plane":
            raise SceneError("background must be a plane")
        if not self.background.motion.is_identity():
            raise SceneError("background plane must be static")
        pose = self.camera_motion.pose()
        camera2 = pose.apply(np.zeros(3), inverse=True)
        origin = np.zeros(3)
        for index, obj in enumerate([self.background] + list(self.objects)):
            primitive = obj.build()
            if primitive.contains(origin) or primitive.contains_moved(camera2, obj.motion):
                raise SceneError(f"object {index} ({obj.kind}) contains a camera centre")
            if obj.kind == "plane":
                continue
            moved = obj.motion.apply(primitive.center, primitive.center)
            if primitive.center[2] <= 0 or pose.apply(moved)[2] <= 0:
                raise SceneError(f"object {index} ({obj.kind}) is not in front of both cameras")
        return self

    def primitives(self) -> List[Primitive]:
        return [obj.build() for obj in [self.background] + list(self.objects)]

    def motions(self) -> List[RigidMotion]:
        return [obj.motion for obj in [self.background] + list(self.objects)]


def write_scene(spec: SceneSpec, directory: Union[str, Path]) -> Path:
    path = Path(directory) / SCENE_FILE
    path.write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_scene(path: Union[str, Path]) -> SceneSpec:
    path = Path(path)
    if path.is_dir():
        path = path / SCENE_FILE
    return SceneSpec.model_validate_json(path.read_text(encoding="utf-8"))


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    return CameraIntrinsics(fx=float(width), fy=float(width), cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


def _lattice_scene(rng: np.random.Generator, seed: int, height: int, width: int) -> SceneSpec:
    k = default_intrinsics(height, width)
    f = k.fx
    z_bg = float(rng.uniform(6.0, 9.0))
    # Whole-pixel background flow from a lateral camera translation.
    k_bg = rng.integers(-2, 3, size=2)
    t_cam = np.array([k_bg[0] * z_bg / f, k_bg[1] * z_bg / f, 0.0])

    objects = []
    for _ in range(int(rng.integers(1, 4))):
        z = float(rng.uniform(3.0, 5.0))
        u = rng.uniform(0.2 * width, 0.8 * width)
        v = rng.uniform(0.2 * height, 0.8 * height)
        half_u = rng.uniform(0.1 * width, 0.25 * width)
        half_v = rng.uniform(0.1 * height, 0.25 * height)
        k_obj = rng.integers(-3, 4, size=2)
        shift = np.array([k_obj[0] * z / f - t_cam[0], k_obj[1] * z / f - t_cam[1], 0.0])
        objects.append(
            ObjectSpec(
                kind="box",
                center=[(u - k.cx) * z / f, (v - k.cy) * z / f, z],
                half_extents=[half_u * z / f, half_v * z / f, 0.0],
                motion=RigidMotion(translation=shift.tolist()),
            )
        )
    return SceneSpec(
        background=ObjectSpec(kind="plane", normal=[0.0, 0.0, 1.0], offset=z_bg),
        objects=objects,
        camera_motion=RigidMotion(translation=t_cam.tolist()),
        intrinsics=k,
        height=height,
        width=width,
        seed=seed,
        metric=bool(rng.random() < 0.5),
    )


def _general_scene(rng: np.random.Generator, seed: int, height: int, width: int) -> SceneSpec:
    k = default_intrinsics(height, width)
    f = k.fx
    z_bg = float(rng.uniform(6.0, 9.0))
    normal = [float(rng.normal(0.0, 0.1)), float(rng.normal(0.0, 0.1)), 1.0]

    objects = []
    for _ in range(int(rng.integers(1, 4))):
        z = float(rng.uniform(3.0, 5.0))
        u = rng.uniform(0.2 * width, 0.8 * width)
        v = rng.uniform(0.2 * height, 0.8 * height)
        center = [(u - k.cx) * z / f, (v - k.cy) * z / f, z]
        motion = RigidMotion(
            rotvec=rng.normal(0.0, 0.05, size=3).tolist(),
            translation=rng.uniform(-0.3, 0.3, size=3).tolist(),
        )
        if rng.random() < 0.5:
            objects.append(ObjectSpec(kind="sphere", center=center, radius=float(rng.uniform(0.3, 0.8)), motion=motion))
        else:
            objects.append(
                ObjectSpec(
                    kind="box",
                    center=center,
                    half_extents=rng.uniform(0.2, 0.6, size=3).tolist(),
                    orientation=rng.normal(0.0, 0.3, size=3).tolist(),
                    motion=motion,
                )
            )
    return SceneSpec(
        background=ObjectSpec(kind="plane", normal=normal, offset=z_bg),
        objects=objects,
        camera_motion=RigidMotion(
            rotvec=rng.normal(0.0, 0.02, size=3).tolist(),
            translation=rng.uniform(-0.3, 0.3, size=3).tolist(),
        ),
        intrinsics=k,
        height=height,
        width=width,
        seed=seed,
        metric=bool(rng.random() < 0.5),
    )


def random_scene(seed: int, height: int = 64, width: int = 64, lattice: bool = True) -> SceneSpec:
    """Build a seeded random scene.

    Lattice scenes hold a fronto-parallel background and flat cards whose
    motions all produce whole-pixel optical flow with unchanged depth, so
    depth lookups at flow targets are exact. General scenes add spheres,
    rotated boxes, a tilted background and camera rotation.
    """
    rng = np.random.default_rng(seed)
    if lattice:
        spec = _lattice_scene(rng, seed, height, width)
    else:
        spec = _general_scene(rng, seed, height, width)
    logger.debug(f"Random scene seed={seed} lattice={lattice}: {len(spec.objects)} objects")
    return spec
