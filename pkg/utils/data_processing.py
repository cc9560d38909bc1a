import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import CoreError

# Configure logging
logger = logging.getLogger(__name__)

# ITU-R 601 luma weights (R, G, B)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

NORMALIZE_EPS = 1e-8

# Displacement ranges used for bucketed statistics, left-closed
DISPLACEMENT_EDGES = (0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 90.0, np.inf)


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Luminance image with values in [0,1]; data has shape (height, width)"""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if self.width < 1 or self.height < 1:
            raise CoreError(f"Image must be at least 1x1, got {self.width}x{self.height}")
        if data.shape != (self.height, self.width):
            raise CoreError(f"Image data shape {data.shape} does not match {self.height}x{self.width}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise CoreError("Image values must be finite and within [0,1]")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 2:
            raise CoreError(f"Expected a 2-D luminance array, got shape {array.shape}")
        return cls(width=array.shape[1], height=array.shape[0], data=array)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (u horizontal, v vertical) with a validity mask"""

    width: int
    height: int
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        u = _frozen(self.u)
        v = _frozen(self.v)
        valid = _frozen(self.valid, dtype=bool)
        if u.shape != shape or v.shape != shape or valid.shape != shape:
            raise CoreError(f"Flow components must all have shape {shape}")
        if not (np.all(np.isfinite(u[valid])) and np.all(np.isfinite(v[valid]))):
            raise CoreError("Flow must be finite wherever it is valid")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_arrays(cls, u, v, valid=None):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if valid is None:
            valid = np.ones(u.shape, dtype=bool)
        return cls(width=u.shape[1], height=u.shape[0], u=u, v=v, valid=valid)

    @property
    def magnitude(self):
        """Displacement magnitude per pixel (undefined entries where invalid)"""
        return np.hypot(self.u, self.v)

    def count_valid(self):
        return int(self.valid.sum())


@dataclass(frozen=True, eq=False)
class DescriptorField:
    """Per-pixel descriptors; data has shape (height, width, dim)"""

    width: int
    height: int
    dim: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if self.dim < 1:
            raise CoreError("Descriptor dimension must be at least 1")
        if data.shape != (self.height, self.width, self.dim):
            raise CoreError(
                f"Descriptor data shape {data.shape} does not match "
                f"({self.height}, {self.width}, {self.dim})"
            )
        if not np.all(np.isfinite(data)):
            raise CoreError("Descriptor values must be finite")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 3:
            raise CoreError(f"Expected (height, width, dim) descriptors, got shape {array.shape}")
        return cls(width=array.shape[1], height=array.shape[0], dim=array.shape[2], data=array)


@dataclass(frozen=True, eq=False)
class Patch:
    """Square window of luminance values with odd side length"""

    size: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if self.size % 2 != 1:
            raise CoreError(f"Patch size must be odd, got {self.size}")
        if data.shape != (self.size, self.size):
            raise CoreError(f"Patch data shape {data.shape} does not match size {self.size}")
        if not np.all(np.isfinite(data)):
            raise CoreError("Patch values must be finite")
        object.__setattr__(self, "data", data)


def rgb_to_luminance(rgb):
    """
    Convert an RGB array to luminance

    Args:
        rgb (numpy.ndarray): Array of shape (h, w, 3) in R, G, B channel order

    Returns:
        numpy.ndarray: Luminance array of shape (h, w)
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]


def reflect_indices(indices, n):
    """Mirror indices about the borders of an axis of length n (edge not repeated)"""
    indices = np.asarray(indices)
    if n == 1:
        return np.zeros_like(indices)
    period = 2 * (n - 1)
    folded = np.abs(indices) % period
    return np.where(folded >= n, period - folded, folded)


def _check_patch_size(size):
    if size < 1 or size % 2 != 1:
        raise CoreError(f"Patch size must be a positive odd number, got {size}")


def extract_patch(img, center, size):
    """
    Extract the size x size window centered at a pixel

    Samples falling outside the image are filled by mirror reflection.

    Args:
        img (GrayImage): Source image
        center (tuple): Pixel coordinate (x, y)
        size (int): Odd side length

    Returns:
        Patch: The extracted window
    """
    _check_patch_size(size)
    x, y = int(center[0]), int(center[1])
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise CoreError(f"Patch center {(x, y)} outside {img.width}x{img.height} image")

    half = size // 2
    rows = reflect_indices(np.arange(y - half, y + half + 1), img.height)
    cols = reflect_indices(np.arange(x - half, x + half + 1), img.width)
    return Patch(size=size, data=img.data[np.ix_(rows, cols)])


def padded_image(img, size, rows=None):
    """
    Mirror-pad an image so every pixel (or every pixel of the given rows)
    has a full size x size window

    Args:
        img (GrayImage): Source image
        size (int): Odd patch side length
        rows (range): Optional subset of rows to pad for

    Returns:
        numpy.ndarray: Padded array of shape (len(rows) + size - 1, width + size - 1)
    """
    _check_patch_size(size)
    half = size // 2
    if rows is None:
        rows = range(img.height)
    row_idx = reflect_indices(np.arange(rows.start - half, rows.stop + half), img.height)
    col_idx = reflect_indices(np.arange(-half, img.width + half), img.width)
    return img.data[np.ix_(row_idx, col_idx)]


def image_patches(img, size, rows=None):
    """
    All windows for a block of rows as an array of shape (n_rows, width, size, size)

    Args:
        img (GrayImage): Source image
        size (int): Odd patch side length
        rows (range): Rows to extract (defaults to all)

    Returns:
        numpy.ndarray: Read-only strided view over the padded image
    """
    padded = padded_image(img, size, rows)
    return sliding_window_view(padded, (size, size))


def normalize_patches(patches):
    """
    Normalize a stack of patches (..., P, P) to zero mean, unit population std

    Patches whose std is below 1e-8 become all zeros.
    """
    patches = np.asarray(patches, dtype=np.float64)
    mean = patches.mean(axis=(-2, -1), keepdims=True)
    centered = patches - mean
    std = np.sqrt((centered ** 2).mean(axis=(-2, -1), keepdims=True))
    degenerate = std < NORMALIZE_EPS
    safe_std = np.where(degenerate, 1.0, std)
    return np.where(degenerate, 0.0, centered / safe_std)


def normalize_patch(p):
    """
    Normalize a patch to mean 0 and population standard deviation 1

    Args:
        p (Patch): Input patch

    Returns:
        Patch: Normalized patch (all zeros if the input std is below 1e-8)
    """
    return Patch(size=p.size, data=normalize_patches(p.data))


def displacement_magnitude(flow, p):
    """
    Euclidean length of the flow vector at a pixel

    Args:
        flow (FlowField): Flow field
        p (tuple): Pixel coordinate (x, y)

    Returns:
        float: sqrt(u^2 + v^2)
    """
    x, y = int(p[0]), int(p[1])
    if not (0 <= x < flow.width and 0 <= y < flow.height):
        raise CoreError(f"Pixel {(x, y)} outside {flow.width}x{flow.height} flow field")
    if not flow.valid[y, x]:
        raise CoreError(f"Flow is not valid at pixel {(x, y)}")
    return float(np.hypot(flow.u[y, x], flow.v[y, x]))
