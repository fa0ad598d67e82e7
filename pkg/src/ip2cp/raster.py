"""Core raster types and 8-bit PNG IO.

Images live in memory as float64 arrays with channel values in [0, 1];
bytes appear only at the file boundary (u8 value u maps to u/255 on load,
v maps to round-half-up(v*255) on save). Label masks are single-channel
uint8 arrays with the five damage codes. All types are treated as
immutable after construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, MaskValueError, ShapeError


class DamageLabel(enum.IntEnum):
    """Per-pixel damage code as stored in mask PNGs."""

    BACKGROUND = 0
    NO_DAMAGE = 1
    MINOR = 2
    MAJOR = 3
    DESTROYED = 4


class BinaryLabel(enum.IntEnum):
    """Patch-level class. Order is fixed (NO_DAMAGE < WITH_DAMAGE) so that
    serialized outputs are deterministic."""

    NO_DAMAGE = 0
    WITH_DAMAGE = 1

    @property
    def text(self) -> str:
        return "no_damage" if self is BinaryLabel.NO_DAMAGE else "with_damage"

    @classmethod
    def from_text(cls, text: str) -> "BinaryLabel":
        try:
            return {"no_damage": cls.NO_DAMAGE, "with_damage": cls.WITH_DAMAGE}[text]
        except KeyError:
            raise DataError(f"unknown binary label {text!r}") from None


@dataclass(frozen=True)
class RasterImage:
    """H x W x 3 image with float64 values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image data, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise DataError("zero-sized image")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("image values outside [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabelMask:
    """H x W per-pixel damage labels, stored as uint8 codes 0..4."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if arr.ndim != 2:
            raise ShapeError(f"expected (H, W) mask, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise DataError("zero-sized mask")
        bad = np.argwhere(arr > int(DamageLabel.DESTROYED))
        if bad.size:
            r, c = bad[0]
            raise MaskValueError(
                f"mask value {int(arr[r, c])} at (row={r}, col={c}) outside 0..4"
            )
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def load_image(path: str | Path) -> RasterImage:
    """Load an 8-bit RGB PNG as a [0, 1] float image (u -> u/255 exactly)."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if mode != "RGB":
        raise DataError(f"{path}: expected 8-bit RGB content, got mode {mode!r}")
    return RasterImage(arr.astype(np.float64) / 255.0)


def save_image(img: RasterImage, path: str | Path) -> None:
    """Write an 8-bit RGB PNG; v maps to round-half-up(v * 255)."""
    data = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def load_mask(path: str | Path) -> LabelMask:
    """Load a single-channel 8-bit PNG whose bytes are damage codes 0..4."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if mode != "L":
        raise DataError(f"{path}: expected single-channel 8-bit mask, got mode {mode!r}")
    try:
        return LabelMask(arr)
    except MaskValueError as exc:
        raise MaskValueError(f"{path}: {exc}") from None


def save_mask(mask: LabelMask, path: str | Path) -> None:
    """Write the mask as a single-channel 8-bit PNG."""
    try:
        Image.fromarray(mask.labels, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write mask {path}: {exc}") from exc


def binarize_label(label: DamageLabel) -> BinaryLabel | None:
    """Collapse the five-level code to the binary patch task.

    Background has no binary class (returns None); any damage level from
    minor up counts as WITH_DAMAGE.
    """
    if label == DamageLabel.BACKGROUND:
        return None
    if label == DamageLabel.NO_DAMAGE:
        return BinaryLabel.NO_DAMAGE
    return BinaryLabel.WITH_DAMAGE


_BINARIZE_LUT = np.array([-1, 0, 1, 1, 1], dtype=np.int8)


def binarize_mask(labels: np.ndarray) -> np.ndarray:
    """Vectorized binarize_label over a code array: -1 none, 0 NO_DAMAGE, 1 WITH_DAMAGE."""
    return _BINARIZE_LUT[labels]
