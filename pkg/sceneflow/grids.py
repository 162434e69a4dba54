"""Dense per-pixel float grids and validity masks."""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator


class SceneFlowError(Exception):
    """Base class for every error raised by the sceneflow package."""
    pass


class GridError(SceneFlowError):
    """Raised when a grid or mask is malformed."""
    pass


def _frozen_copy(array: np.ndarray, dtype: np.dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


class FieldGrid(BaseModel):
    """An H x W x C grid of 32-bit floats, row-major and channel-last.

    Depth maps have one channel, optical flow two, pointmaps and scene flow
    three. Values are stored as float32; computations upcast to float64.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _coerce(cls, value):
        array = np.asarray(value)
        if array.ndim == 2:
            array = array[..., None]
        if array.ndim != 3:
            raise GridError(f"grid must be H x W x C, got shape {array.shape}")
        if array.shape[2] not in (1, 2, 3):
            raise GridError(f"grid must have 1, 2 or 3 channels, got {array.shape[2]}")
        return _frozen_copy(array, np.float32)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "FieldGrid":
        return cls(data=array)

    @classmethod
    def zeros(cls, height: int, width: int, channels: int) -> "FieldGrid":
        return cls(data=np.zeros((height, width, channels), dtype=np.float32))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def as_f64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FieldGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


class ValidityMask(BaseModel):
    """One byte per pixel, 1 where the paired grid value is usable."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    bits: np.ndarray

    @field_validator("bits", mode="before")
    @classmethod
    def _coerce(cls, value):
        array = np.asarray(value)
        if array.ndim == 3 and array.shape[2] == 1:
            array = array[..., 0]
        if array.ndim != 2:
            raise GridError(f"mask must be H x W, got shape {array.shape}")
        if array.dtype == np.bool_:
            array = array.astype(np.uint8)
        elif not np.isin(array, (0, 1)).all():
            raise GridError("mask values must be 0 or 1")
        return _frozen_copy(array, np.uint8)

    @classmethod
    def ones(cls, height: int, width: int) -> "ValidityMask":
        return cls(bits=np.ones((height, width), dtype=np.uint8))

    @classmethod
    def from_bool(cls, array: np.ndarray) -> "ValidityMask":
        return cls(bits=np.asarray(array, dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape[0], self.bits.shape[1]

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def count(self) -> int:
        return int(self.bits.sum())

    def __and__(self, other: "ValidityMask") -> "ValidityMask":
        if self.shape != other.shape:
            raise GridError(f"mask shapes differ: {self.shape} vs {other.shape}")
        return ValidityMask(bits=self.bits & other.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ValidityMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def as_f64(value) -> np.ndarray:
    """Return a float64 H x W x C array from a FieldGrid or array-like."""
    if isinstance(value, FieldGrid):
        return value.as_f64()
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 2:
        array = array[..., None]
    return array


def as_bool(mask, shape: Tuple[int, int]) -> np.ndarray:
    """Return a boolean H x W array from a mask, an array or None (all valid)."""
    if mask is None:
        return np.ones(shape, dtype=bool)
    if isinstance(mask, ValidityMask):
        bits = mask.as_bool()
    else:
        bits = np.asarray(mask, dtype=bool)
    if bits.shape != tuple(shape):
        raise GridError(f"mask shape {bits.shape} does not match grid shape {tuple(shape)}")
    return bits
