"""PNG and raw float32 sidecar I/O."""
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import LeaNetError


class ImageIOError(LeaNetError, IOError):
    module = "imageio"


def read_rgb(path, extent=None, resample="nearest"):
    """Read an image as ``H x W x 3`` uint8, optionally resized to ``extent x extent``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if extent is not None and im.size != (extent, extent):
                method = Image.BILINEAR if resample == "bilinear" else Image.NEAREST
                im = im.resize((extent, extent), method)
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot decode image {path}: {exc}") from None


def read_gray(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot decode image {path}: {exc}") from None


def write_png(path, array):
    """Write uint8 ``H x W`` (gray) or ``H x W x 3`` (RGB) data."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ImageIOError(f"write_png expects uint8 data, got {array.dtype}")
    try:
        Image.fromarray(array).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from None


def to_gray8(values, lo=0.0, hi=1.0):
    """Quantize values in ``[lo, hi]`` to 0..255."""
    scaled = (np.asarray(values, dtype=np.float64) - lo) / max(hi - lo, 1e-12)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_f32(path, grid):
    """Row-major little-endian float32 grid prefixed by two u32 extents (H, W)."""
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ImageIOError(f"f32 sidecar expects a 2-D grid, got shape {grid.shape}")
    Path(path).write_bytes(struct.pack("<II", *grid.shape) + np.ascontiguousarray(grid).tobytes())


def read_f32(path):
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ImageIOError(f"{path}: truncated f32 sidecar")
    h, w = struct.unpack_from("<II", blob)
    if len(blob) != 8 + 4 * h * w:
        raise ImageIOError(f"{path}: expected {h}x{w} floats, found {(len(blob) - 8) // 4}")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)
