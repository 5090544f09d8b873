"""Image and raster files.

8-bit images go through OpenCV (binary PPM for color, binary PGM for masks); metric rasters
are headerless little-endian arrays in row-major order whose shape comes from the scene
intrinsics.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from models.exceptions import DatasetError


def write_color(path: str | Path, color: np.ndarray) -> Path:
    """Write an (H, W, 3) float image in [0, 1] as a binary PPM."""
    path = Path(path)
    rgb = np.clip(np.rint(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DatasetError(path, "could not write color image")
    return path


def read_color(path: str | Path) -> np.ndarray:
    """Read a PPM as an (H, W, 3) float image in [0, 1]."""
    path = Path(path)
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(path, "missing or unreadable color image")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_mask(path: str | Path, static: np.ndarray) -> Path:
    """Write a boolean static mask as binary PGM: 255 = static, 0 = dynamic."""
    path = Path(path)
    if not cv2.imwrite(str(path), np.where(static, 255, 0).astype(np.uint8)):
        raise DatasetError(path, "could not write mask")
    return path


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    gray = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if gray is None:
        raise DatasetError(path, "missing or unreadable mask")
    return gray > 127


def write_raw(path: str | Path, array: np.ndarray, dtype: str) -> Path:
    """Write a headerless little-endian raster (``dtype`` is '<f4' or '<u4')."""
    path = Path(path)
    np.ascontiguousarray(array, dtype=np.dtype(dtype)).tofile(path)
    return path


def read_raw(path: str | Path, shape: tuple[int, int], dtype: str) -> np.ndarray:
    """Read a headerless little-endian raster of a known shape.

    Raises:
        DatasetError: missing file or wrong byte count
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(path, "missing raster")
    data = np.fromfile(path, dtype=np.dtype(dtype))
    expected = shape[0] * shape[1]
    if data.size != expected:
        raise DatasetError(path, f"expected {expected} values, found {data.size}")
    return data.reshape(shape)


def write_depth(path: str | Path, depth: np.ndarray) -> Path:
    return write_raw(path, depth, "<f4")


def read_depth(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    depth = read_raw(path, shape, "<f4").astype(np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise DatasetError(path, "depth raster holds negative or non-finite values")
    return depth


def write_ids(path: str | Path, ids: np.ndarray) -> Path:
    return write_raw(path, ids, "<u4")


def read_ids(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    return read_raw(path, shape, "<u4").astype(np.uint32)
