"""Sample records and the raw-tensor on-disk container.

A container is a directory holding ``meta.json`` and one headerless file per
present field: little-endian float32 for grids (``<name>.f32``) and unsigned
bytes for masks (``m_<name>.u8``), both row-major and channel-last.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from sceneflow.camera import CameraError, CameraIntrinsics, RelativePose
from sceneflow.grids import FieldGrid, GridError, SceneFlowError, ValidityMask

logger = logging.getLogger(__name__)

__all__ = [
    "ContainerError",
    "FieldGrid",
    "SampleRecord",
    "SceneFlowError",
    "ValidityMask",
    "read_sample",
    "write_sample",
]

META_FILE = "meta.json"

# Grid fields in container order, with their channel counts.
GRID_CHANNELS: Dict[str, int] = {
    "d1": 1,
    "d2": 1,
    "flow_fwd": 2,
    "flow_bwd": 2,
    "sf": 3,
    "x1": 3,
    "x2": 3,
}
REQUIRED_FIELDS = ("d1", "d2", "flow_fwd")
MASK_FIELDS = ("d1", "d2", "flow_fwd", "flow_bwd", "sf")
SF_KINDS = ("cso", "ddof", "ep")


class ContainerError(SceneFlowError):
    """Raised for container I/O failures and sample invariant violations."""
    pass


class SampleRecord(BaseModel):
    """One two-frame sample: depths, flows, optional scene flow and pointmaps.

    Masks are optional; an absent mask means every pixel of that field is
    valid. Pointmaps ``x1``/``x2`` share the depth masks.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    d1: FieldGrid
    d2: FieldGrid
    flow_fwd: FieldGrid
    flow_bwd: Optional[FieldGrid] = None
    sf: Optional[FieldGrid] = None
    x1: Optional[FieldGrid] = None
    x2: Optional[FieldGrid] = None
    m_d1: Optional[ValidityMask] = None
    m_d2: Optional[ValidityMask] = None
    m_flow_fwd: Optional[ValidityMask] = None
    m_flow_bwd: Optional[ValidityMask] = None
    m_sf: Optional[ValidityMask] = None
    intrinsics: CameraIntrinsics
    pose_1_to_2: RelativePose
    metric: bool = False
    sf_kind: str = "cso"

    @model_validator(mode="after")
    def _check_invariants(self) -> "SampleRecord":
        height, width = self.d1.shape
        for name, channels in GRID_CHANNELS.items():
            grid = getattr(self, name)
            if grid is None:
                continue
            if grid.shape != (height, width):
                raise ContainerError(f"{name}: shape {grid.shape} differs from d1 shape {(height, width)}")
            if grid.channels != channels:
                raise ContainerError(f"{name}: expected {channels} channels, got {grid.channels}")
            if not grid.is_finite():
                raise ContainerError(f"{name}: contains non-finite values")
        for name in MASK_FIELDS:
            mask = getattr(self, f"m_{name}")
            if mask is None:
                continue
            if getattr(self, name) is None:
                raise ContainerError(f"m_{name}: mask given without its field {name}")
            if mask.shape != (height, width):
                raise ContainerError(f"m_{name}: shape {mask.shape} differs from d1 shape {(height, width)}")
        if self.sf_kind not in SF_KINDS:
            raise ContainerError(f"sf_kind: unknown kind {self.sf_kind!r}")
        return self

    @property
    def height(self) -> int:
        return self.d1.height

    @property
    def width(self) -> int:
        return self.d1.width

    def mask(self, name: str) -> ValidityMask:
        """Return the mask for ``name``, all-ones when absent."""
        if name in ("x1", "x2"):
            name = "d1" if name == "x1" else "d2"
        mask = getattr(self, f"m_{name}")
        if mask is None:
            return ValidityMask.ones(self.height, self.width)
        return mask

    def present_fields(self) -> List[str]:
        return [name for name in GRID_CHANNELS if getattr(self, name) is not None]

    def present_masks(self) -> List[str]:
        return [f"m_{name}" for name in MASK_FIELDS if getattr(self, f"m_{name}") is not None]

    def replace(self, **changes: Any) -> "SampleRecord":
        """Return a validated copy with ``changes`` applied."""
        values = {name: getattr(self, name) for name in type(self).model_fields}
        values.update(changes)
        return SampleRecord(**values)


def _float_strings(values: np.ndarray) -> List[str]:
    return [repr(float(v)) for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def _write_bytes(path: Path, payload: bytes) -> None:
    try:
        path.write_bytes(payload)
    except OSError as e:
        raise ContainerError(f"failed to write {path}: {e}") from e


def write_sample(sample: SampleRecord, directory: Union[str, Path]) -> None:
    """Write ``sample`` as a container directory.

    Args:
        sample: Validated sample record
        directory: Target directory, created if missing

    Raises:
        ContainerError: If the sample violates an invariant or I/O fails
    """
    # Records built with model_construct skip validation; re-check before writing.
    SampleRecord.model_validate(dict(sample))

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ContainerError(f"cannot create {directory}: {e}") from e

    fields = sample.present_fields()
    masks = sample.present_masks()
    for name in fields:
        grid: FieldGrid = getattr(sample, name)
        _write_bytes(directory / f"{name}.f32", grid.data.astype("<f4").tobytes())
    for name in masks:
        mask: ValidityMask = getattr(sample, name)
        _write_bytes(directory / f"{name}.u8", mask.bits.astype(np.uint8).tobytes())

    # Stale optional tensors from an earlier write must not survive.
    for name in GRID_CHANNELS:
        if name not in fields:
            (directory / f"{name}.f32").unlink(missing_ok=True)
    for name in MASK_FIELDS:
        if f"m_{name}" not in masks:
            (directory / f"m_{name}.u8").unlink(missing_ok=True)

    meta = {
        "height": sample.height,
        "width": sample.width,
        "intrinsics": _float_strings(sample.intrinsics.matrix()),
        "pose_1_to_2": _float_strings(sample.pose_1_to_2.matrix()),
        "metric": bool(sample.metric),
        "fields": fields,
        "masks": masks,
        "sf_kind": sample.sf_kind,
    }
    _write_bytes(directory / META_FILE, (json.dumps(meta, indent=2) + "\n").encode("utf-8"))
    logger.debug(f"Wrote sample with fields {fields} to {directory}")


def read_meta(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / META_FILE
    if not path.exists():
        raise ContainerError(f"meta.json: missing in {directory}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ContainerError(f"meta.json: unreadable in {directory}: {e}") from e
    for key in ("height", "width", "intrinsics", "pose_1_to_2", "metric", "fields"):
        if key not in meta:
            raise ContainerError(f"meta.json: missing key {key!r}")
    return meta


def _read_tensor(path: Path, dtype: str, shape: tuple, name: str) -> np.ndarray:
    if not path.exists():
        raise ContainerError(f"{name}: missing file {path.name}")
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"{name}: cannot read {path}: {e}") from e
    itemsize = np.dtype(dtype).itemsize
    expected = int(np.prod(shape)) * itemsize
    if len(payload) != expected:
        raise ContainerError(
            f"{name}: dimension mismatch, meta implies {expected} bytes but file has {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def read_sample(directory: Union[str, Path]) -> SampleRecord:
    """Read and fully validate a container directory.

    Raises:
        ContainerError: On a missing file, a byte-length mismatch, non-finite
            values or any other invariant violation
    """
    directory = Path(directory)
    meta = read_meta(directory)
    height, width = int(meta["height"]), int(meta["width"])
    values: Dict[str, Any] = {}

    for name in meta["fields"]:
        if name not in GRID_CHANNELS:
            raise ContainerError(f"meta.json: unknown field {name!r}")
        data = _read_tensor(directory / f"{name}.f32", "<f4", (height, width, GRID_CHANNELS[name]), name)
        if not np.isfinite(data).all():
            raise ContainerError(f"{name}: contains non-finite values")
        values[name] = FieldGrid(data=data)
    for name in REQUIRED_FIELDS:
        if name not in values:
            raise ContainerError(f"{name}: required field missing from meta.json")

    for name in meta.get("masks", []):
        if name[2:] not in MASK_FIELDS:
            raise ContainerError(f"meta.json: unknown mask {name!r}")
        bits = _read_tensor(directory / f"{name}.u8", "u1", (height, width), name)
        try:
            values[name] = ValidityMask(bits=bits)
        except GridError as e:
            raise ContainerError(f"{name}: {e}") from e

    try:
        values["intrinsics"] = CameraIntrinsics.from_matrix([float(v) for v in meta["intrinsics"]])
        values["pose_1_to_2"] = RelativePose.from_matrix([float(v) for v in meta["pose_1_to_2"]])
    except (CameraError, ValueError) as e:
        raise ContainerError(f"meta.json: invalid camera data: {e}") from e
    values["metric"] = bool(meta["metric"])
    values["sf_kind"] = meta.get("sf_kind", "cso")

    sample = SampleRecord(**values)
    logger.debug(f"Read sample {directory} ({height}x{width}, fields {meta['fields']})")
    return sample


def list_sample_dirs(root: Union[str, Path]) -> List[Path]:
    """Return container directories under ``root`` in lexicographic order.

    ``root`` itself is returned when it is a container.
    """
    root = Path(root)
    if (root / META_FILE).exists():
        return [root]
    if not root.is_dir():
        raise ContainerError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if (p / META_FILE).exists())
