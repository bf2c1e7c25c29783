"""PNG and base64 helpers for CHW float images in [0, 1]."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3,H,W) float [0,1] -> (H,W,3) uint8, round-half-up via +0.5 floor."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3,H,W), got {image.shape}")
    arr = np.clip(image, 0.0, 1.0) * 255.0
    return (arr + 0.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H,W,3), got {arr.shape}")
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def png_encode(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_decode(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def png_b64_encode(image: np.ndarray) -> str:
    return base64.b64encode(png_encode(image)).decode("ascii")


def png_b64_decode(text: str) -> np.ndarray:
    return png_decode(base64.b64decode(text))


def depth_to_image(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    """(H,W) depth -> (3,H,W) grayscale pose image, near bright, far dark."""
    t = np.clip((depth - near) / (far - near), 0.0, 1.0)
    gray = (1.0 - t).astype(np.float32)
    return np.stack([gray, gray, gray])
