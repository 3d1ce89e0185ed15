"""Pixel-space primitives: images, boxes, masks, region isolation, containment.

All types are immutable after construction and every operation is pure, so
everything here is safe for unrestricted concurrent use.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoxOutOfBoundsError,
    MaskShapeError,
    MissingMaskError,
    SpuriousMaskError,
)

RGB = tuple[int, int, int]

BLACK: RGB = (0, 0, 0)


def _validate_rgb(fill: RGB) -> RGB:
    r, g, b = fill
    for c in (r, g, b):
        if not (0 <= int(c) <= 255):
            raise ValueError(f"fill channel out of range: {fill}")
    return (int(r), int(g), int(b))


@dataclass(frozen=True)
class RasterImage:
    """An RGB8 image. ``pixels`` is a read-only array of shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"pixels must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, color: RGB = BLACK) -> "RasterImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:, :] = _validate_rgb(color)
        return cls(arr)

    def digest(self) -> str:
        """Content digest of dimensions plus raw pixel bytes.

        Serves as the image identifier for fixture-backed mock backends:
        stable across runs, hosts, and encode/decode round-trips.
        """
        h = hashlib.sha256()
        h.update(f"{self.width}x{self.height}:".encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    def __hash__(self):
        return hash((self.width, self.height, self.pixels.tobytes()))


@dataclass(frozen=True)
class BinaryMask:
    """One boolean per pixel, shape (height, width). All-zero masks are legal."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            raise ValueError(f"bits must be bool, got {arr.dtype}")
        if arr.ndim != 2:
            raise ValueError(f"bits must have shape (h, w), got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def full(cls, width: int, height: int, value: bool = True) -> "BinaryMask":
        return cls(np.full((height, width), value, dtype=bool))

    @classmethod
    def from_box(cls, width: int, height: int, box: "BBox") -> "BinaryMask":
        """Rectangle mask: bits set exactly inside ``box``."""
        box.require_within(width, height)
        arr = np.zeros((height, width), dtype=bool)
        arr[box.y_min:box.y_max, box.x_min:box.x_max] = True
        return cls(arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and np.array_equal(
            self.bits, other.bits
        )

    def __hash__(self):
        return hash((self.width, self.height, self.bits.tobytes()))


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned integer pixel box, half-open: [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise BoxOutOfBoundsError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (0 <= self.x_min < self.x_max):
            raise BoxOutOfBoundsError(
                f"need 0 <= x_min < x_max, got [{self.x_min}, {self.x_max})"
            )
        if not (0 <= self.y_min < self.y_max):
            raise BoxOutOfBoundsError(
                f"need 0 <= y_min < y_max, got [{self.y_min}, {self.y_max})"
            )

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def require_within(self, width: int, height: int) -> None:
        if self.x_max > width or self.y_max > height:
            raise BoxOutOfBoundsError(
                f"box {self.as_tuple()} exceeds image bounds {width}x{height}"
            )

    def translate(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        return max(0, w) * max(0, h)


class IsolationMode(enum.Enum):
    """How to restrict the image to the region of interest before proposals."""

    FULL = "full"                  # no restriction; whole image passes through
    RECT_MASK = "rect_mask"        # exterior of the box filled, no crop
    CROP = "crop"                  # box cut out of the image
    SEGMENT_MASK = "segment_mask"  # mask applied, then cropped to the box

    @classmethod
    def parse(cls, value: "IsolationMode | str") -> "IsolationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown isolation mode {value!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class AttendedImage:
    """The region-isolated image plus the provenance of how it was produced."""

    image: RasterImage
    mode: IsolationMode
    source_box: BBox
    fill: RGB

    @property
    def origin(self) -> tuple[int, int]:
        """Offset of this image's (0, 0) in original-image coordinates."""
        if self.mode in (IsolationMode.CROP, IsolationMode.SEGMENT_MASK):
            return (self.source_box.x_min, self.source_box.y_min)
        return (0, 0)

    def to_original(self, box: BBox) -> BBox:
        dx, dy = self.origin
        return box.translate(dx, dy)

    def to_attended(self, box: BBox) -> BBox:
        dx, dy = self.origin
        return box.translate(-dx, -dy)


class ContainmentKind(enum.Enum):
    CENTER_IN = "center_in"
    FULLY_INSIDE = "fully_inside"
    IOA_AT_LEAST = "ioa_at_least"


@dataclass(frozen=True)
class ContainmentPolicy:
    """Geometric test deciding whether a detection counts as inside a region."""

    kind: ContainmentKind
    theta: float | None = field(default=None)

    def __post_init__(self):
        if self.kind is ContainmentKind.IOA_AT_LEAST:
            if self.theta is None or not (0.0 < self.theta <= 1.0):
                raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        elif self.theta is not None:
            raise ValueError(f"theta is only valid for ioa_at_least, got {self.theta}")

    @classmethod
    def center_in(cls) -> "ContainmentPolicy":
        return cls(ContainmentKind.CENTER_IN)

    @classmethod
    def fully_inside(cls) -> "ContainmentPolicy":
        return cls(ContainmentKind.FULLY_INSIDE)

    @classmethod
    def ioa_at_least(cls, theta: float) -> "ContainmentPolicy":
        return cls(ContainmentKind.IOA_AT_LEAST, float(theta))


DEFAULT_CONTAINMENT = ContainmentPolicy.center_in()


# --- operations --------------------------------------------------------------

def apply_mask(image: RasterImage, mask: BinaryMask, fill: RGB = BLACK) -> RasterImage:
    """Keep pixels where the mask bit is set; everything else becomes ``fill``.

    Raises MaskShapeError when mask and image dimensions differ.
    """
    if (mask.height, mask.width) != (image.height, image.width):
        raise MaskShapeError(
            f"mask {mask.width}x{mask.height} vs image {image.width}x{image.height}"
        )
    fill = _validate_rgb(fill)
    out = np.where(mask.bits[:, :, None], image.pixels, np.uint8(0))
    out[~mask.bits] = fill
    return RasterImage(out.astype(np.uint8))


def crop(image: RasterImage, box: BBox) -> RasterImage:
    """Cut ``box`` out of the image. Output pixel (i, j) = input (x_min+i, y_min+j)."""
    box.require_within(image.width, image.height)
    return RasterImage(image.pixels[box.y_min:box.y_max, box.x_min:box.x_max].copy())


def isolate_region(
    image: RasterImage,
    box: BBox,
    mask: BinaryMask | None,
    mode: IsolationMode,
    fill: RGB = BLACK,
) -> AttendedImage:
    """Restrict the image to the region of interest per ``mode``.

    FULL passes the image through; RECT_MASK fills everything outside the box;
    CROP cuts the box out; SEGMENT_MASK applies the mask and then crops to the
    box. A mask is required for SEGMENT_MASK and rejected for the other modes.
    """
    box.require_within(image.width, image.height)
    fill = _validate_rgb(fill)
    if mode is IsolationMode.SEGMENT_MASK:
        if mask is None:
            raise MissingMaskError("segment_mask isolation requires a mask")
    elif mask is not None:
        raise SpuriousMaskError(f"mode {mode.value} must not consume a mask")

    if mode is IsolationMode.FULL:
        out = RasterImage(image.pixels.copy())
    elif mode is IsolationMode.RECT_MASK:
        out = apply_mask(image, BinaryMask.from_box(image.width, image.height, box), fill)
    elif mode is IsolationMode.CROP:
        out = crop(image, box)
    else:
        out = crop(apply_mask(image, mask, fill), box)
    return AttendedImage(image=out, mode=mode, source_box=box, fill=fill)


def ioa(det: BBox, region: BBox) -> float:
    """Intersection area over the detection's own area. Disjoint boxes yield 0."""
    return det.intersection_area(region) / det.area


def contains(region: BBox, det: BBox, policy: ContainmentPolicy = DEFAULT_CONTAINMENT) -> bool:
    """Whether ``det`` counts as inside ``region`` under the given policy.

    CENTER_IN uses a half-open interval test on the detection's center point,
    FULLY_INSIDE requires all four edges within the region, and IOA_AT_LEAST
    compares ``ioa(det, region)`` against the policy threshold.
    """
    if policy.kind is ContainmentKind.CENTER_IN:
        cx, cy = det.center
        return (
            region.x_min <= cx < region.x_max
            and region.y_min <= cy < region.y_max
        )
    if policy.kind is ContainmentKind.FULLY_INSIDE:
        return (
            det.x_min >= region.x_min
            and det.y_min >= region.y_min
            and det.x_max <= region.x_max
            and det.y_max <= region.y_max
        )
    return ioa(det, region) >= policy.theta
