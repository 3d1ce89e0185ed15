"""PNG/JPEG codecs at the artifact boundary. Internal representation is raw RGB8."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .geometry import BinaryMask, RasterImage


def load_image(path: str | Path) -> RasterImage:
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def decode_image(data: bytes) -> RasterImage:
    """Decode PNG or JPEG bytes; raises ValueError on undecodable input."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except UnidentifiedImageError as exc:
        raise ValueError("data is not a decodable PNG/JPEG image") from exc


def encode_png(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: RasterImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))


def png_b64(image: RasterImage) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


def image_from_b64(b64: str) -> RasterImage:
    try:
        data = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise ValueError("invalid base64 payload") from exc
    return decode_image(data)


# Masks travel as single-channel PNG: 0 = outside, 255 = inside.

def encode_mask_png(mask: BinaryMask) -> bytes:
    arr = np.where(mask.bits, np.uint8(255), np.uint8(0))
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_mask_png(mask: BinaryMask, path: str | Path) -> None:
    Path(path).write_bytes(encode_mask_png(mask))


def decode_mask_png(data: bytes) -> BinaryMask:
    try:
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ValueError("data is not a decodable mask PNG") from exc
    return BinaryMask(arr >= 128)


def load_mask_png(path: str | Path) -> BinaryMask:
    return decode_mask_png(Path(path).read_bytes())


def mask_png_b64(mask: BinaryMask) -> str:
    return base64.b64encode(encode_mask_png(mask)).decode("ascii")


def mask_from_b64(b64: str) -> BinaryMask:
    try:
        data = base64.b64decode(b64, validate=True)
    except Exception as exc:
        raise ValueError("invalid base64 payload") from exc
    return decode_mask_png(data)
