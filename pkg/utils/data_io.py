import gzip
import logging
import os
import struct
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import map_coordinates

from utils.data_processing import DISPLACEMENT_EDGES, FlowField, GrayImage, rgb_to_luminance
from utils.errors import (BadMagicError, DataFormatError, DimensionOverflowError, ImageFormatError,
                          SizeMismatchError, TruncatedFileError)

# Configure logging
logger = logging.getLogger(__name__)

FLO_MAGIC = b"PIEH"
FLO_UNKNOWN = 1e10
FLO_INVALID_THRESHOLD = 1e9
FLO_MAX_SIDE = 99999

KITTI_OFFSET = 2 ** 15
KITTI_SCALE = 64.0

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

SYNTHETIC_MODELS = ("translation", "layered", "zoom")
LAYERED_ATTEMPTS = 20
LAYER_PLACEMENT_TRIES = 50
MIN_LAYER_SIDE = 4.0


def read_bytes(path, module=None):
    """Whole contents of a binary file; unreadable paths raise DataFormatError"""
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataFormatError(f"{path}: cannot be read ({e.strerror or e})", module=module) from e


def read_flo(path):
    """
    Read a Middlebury .flo file

    Components with magnitude above 1e9 mark the pixel invalid.

    Args:
        path (str): File path

    Returns:
        FlowField: Flow stored in the file
    """
    blob = read_bytes(path)
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: header needs 12 bytes, got {len(blob)}")
    if blob[:4] != FLO_MAGIC:
        raise BadMagicError(f"{path}: bad .flo magic {blob[:4]!r}")
    width, height = struct.unpack("<ii", blob[4:12])
    if not (0 < width <= FLO_MAX_SIDE and 0 < height <= FLO_MAX_SIDE):
        raise DimensionOverflowError(f"{path}: implausible dimensions {width}x{height}")

    expected = 8 * width * height
    body = blob[12:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: body holds {len(body)} bytes, expected {expected}")
    if len(body) > expected:
        raise SizeMismatchError(f"{path}: {len(body) - expected} trailing bytes after the flow data")

    data = np.frombuffer(body, dtype="<f4").reshape(height, width, 2).astype(np.float64)
    u, v = data[..., 0], data[..., 1]
    valid = (np.abs(u) <= FLO_INVALID_THRESHOLD) & (np.abs(v) <= FLO_INVALID_THRESHOLD)
    return FlowField.from_arrays(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


def write_flo(path, flow):
    """Write a FlowField as a Middlebury .flo file (invalid pixels as 1e10)"""
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.u, FLO_UNKNOWN)
    data[..., 1] = np.where(flow.valid, flow.v, FLO_UNKNOWN)
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", flow.width, flow.height))
        f.write(data.tobytes())
    logger.info(f"Wrote {flow.width}x{flow.height} flow to {path}")


def _imread(path):
    if not os.path.isfile(path):
        raise DataFormatError(f"{path}: no such file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: cannot be decoded as an image")
    return raw


def read_kitti_flow_png(path):
    """
    Read a KITTI 16-bit flow PNG

    The file stores (u, v, valid) as the R, G, B channels with
    u = (R - 2^15) / 64 and v = (G - 2^15) / 64.
    """
    raw = _imread(path)
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected a 16-bit 3-channel PNG, got {raw.dtype} with shape {raw.shape}")
    # OpenCV returns channels in B, G, R order
    u = (raw[..., 2].astype(np.float64) - KITTI_OFFSET) / KITTI_SCALE
    v = (raw[..., 1].astype(np.float64) - KITTI_OFFSET) / KITTI_SCALE
    valid = raw[..., 0] > 0
    return FlowField.from_arrays(u, v, valid)


def write_kitti_flow_png(path, flow):
    """Write a FlowField in the KITTI 16-bit PNG encoding"""
    def encode(component):
        return np.clip(np.rint(np.where(flow.valid, component, 0.0) * KITTI_SCALE + KITTI_OFFSET), 0, 65535)

    bgr = np.stack([flow.valid.astype(np.float64), encode(flow.v), encode(flow.u)], axis=-1).astype(np.uint16)
    if not cv2.imwrite(str(path), bgr):
        raise ImageFormatError(f"{path}: could not write the KITTI PNG")


def _idx_bytes(path):
    blob = read_bytes(path)
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(path):
    """
    Read an IDX file (optionally gzipped)

    Args:
        path (str): File path

    Returns:
        numpy.ndarray: Images (count, rows, cols) scaled to [0,1], or integer labels (count,)
    """
    blob = _idx_bytes(path)
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: IDX header is truncated")
    (magic,) = struct.unpack(">I", blob[:4])

    if magic == IDX_IMAGES:
        if len(blob) < 16:
            raise TruncatedFileError(f"{path}: IDX image header is truncated")
        count, rows, cols = struct.unpack(">III", blob[4:16])
        body = blob[16:]
        if len(body) != count * rows * cols:
            raise SizeMismatchError(f"{path}: header announces {count * rows * cols} pixels, body has {len(body)}")
        return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols).astype(np.float64) / 255.0

    if magic == IDX_LABELS:
        (count,) = struct.unpack(">I", blob[4:8])
        body = blob[8:]
        if len(body) != count:
            raise SizeMismatchError(f"{path}: header announces {count} labels, body has {len(body)}")
        return np.frombuffer(body, dtype=np.uint8).astype(np.int64)

    raise BadMagicError(f"{path}: unknown IDX magic 0x{magic:08x}")


def read_image(path):
    """
    Read an 8- or 16-bit image as luminance in [0,1]

    Colour images are converted with ITU-R 601 weights; alpha is dropped.
    """
    raw = _imread(path)
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported bit depth {raw.dtype}")

    if data.ndim == 3:
        if data.shape[2] not in (3, 4):
            raise ImageFormatError(f"{path}: unsupported channel count {data.shape[2]}")
        data = rgb_to_luminance(data[..., 2::-1])
    return GrayImage.from_array(np.clip(data, 0.0, 1.0))


def write_image(path, img):
    """Write a GrayImage as a 16-bit grayscale PNG"""
    data = np.rint(img.data * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), data):
        raise ImageFormatError(f"{path}: could not write the image")


def write_flow_magnitude_pgm(path, flow):
    """
    Write |flow| as an 8-bit PGM, linearly scaled so the maximum maps to 255

    Returns:
        float: The maximum magnitude (0 when the flow is zero or invalid everywhere)
    """
    magnitude = np.where(flow.valid, flow.magnitude, 0.0)
    peak = float(magnitude.max()) if magnitude.size else 0.0
    scaled = np.zeros(magnitude.shape, dtype=np.uint8)
    if peak > 0:
        scaled = np.rint(255.0 * magnitude / peak).astype(np.uint8)
    if not cv2.imwrite(str(path), scaled):
        raise ImageFormatError(f"{path}: could not write the PGM")
    logger.info(f"Wrote flow magnitude to {path} (max {peak:.3f}px)")
    return peak


@dataclass(frozen=True)
class SyntheticParams:
    """
    Synthetic pair description

    model is "translation" (one global shift), "layered" (textured
    rectangles moving over a moving background) or "zoom" (scaling about
    the image center). Layered pairs hold at least one rectangle per
    displacement range below v_max, and at least `layers` rectangles.
    """

    width: int = 64
    height: int = 64
    octaves: int = 4
    base_cell: int = 16
    model: str = "translation"
    v_max: float = 20.0
    translation: tuple = None
    zoom: float = 1.1
    layers: int = 6
    quantize: bool = True

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise DataFormatError(f"Synthetic frames must be at least 32x32, got {self.width}x{self.height}")
        if self.v_max < 0:
            raise DataFormatError(f"v_max must be non-negative, got {self.v_max}")
        if self.model not in SYNTHETIC_MODELS:
            raise DataFormatError(f"Unknown displacement model '{self.model}'")
        if self.octaves < 1 or self.base_cell < 1:
            raise DataFormatError("Texture needs at least one octave and a positive cell size")
        if self.zoom <= 0:
            raise DataFormatError(f"Zoom factor must be positive, got {self.zoom}")


class Texture:
    """Multi-octave value noise on a canvas padded around the frame"""

    def __init__(self, rng, width, height, pad, octaves, base_cell):
        self.pad = int(pad)
        shape = (height + 2 * self.pad, width + 2 * self.pad)
        canvas = np.zeros(shape)
        for octave in range(octaves):
            cell = max(1.0, base_cell / 2 ** octave)
            grid = rng.random((int(np.ceil(shape[0] / cell)) + 2, int(np.ceil(shape[1] / cell)) + 2))
            rows, cols = np.mgrid[0:shape[0], 0:shape[1]] / cell
            canvas += 0.5 ** octave * map_coordinates(grid, [rows, cols], order=1)
        low, high = canvas.min(), canvas.max()
        self.canvas = (canvas - low) / (high - low) if high > low else np.zeros(shape)

    def sample(self, xs, ys):
        """Bilinear values at frame coordinates (canvas edges extend outward)"""
        return map_coordinates(self.canvas, [ys + self.pad, xs + self.pad], order=1, mode="nearest")


def _random_vector(rng, magnitude):
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return magnitude * np.cos(angle), magnitude * np.sin(angle)


def _in_frame(x, y, width, height):
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def _translation_pair(rng, params, xs, ys):
    if params.translation is not None:
        tx, ty = (float(c) for c in params.translation)
    else:
        tx, ty = _random_vector(rng, rng.uniform(0.0, params.v_max))
    pad = int(np.ceil(max(abs(tx), abs(ty)))) + 2
    texture = Texture(rng, params.width, params.height, pad, params.octaves, params.base_cell)
    first = texture.sample(xs, ys)
    second = texture.sample(xs - tx, ys - ty)
    u, v = np.full(xs.shape, tx), np.full(xs.shape, ty)
    return first, second, u, v, _in_frame(xs + tx, ys + ty, params.width, params.height)


def _zoom_pair(rng, params, xs, ys):
    s = params.zoom
    cx, cy = (params.width - 1) / 2.0, (params.height - 1) / 2.0
    pad = int(np.ceil(max(params.width, params.height) * abs(1.0 / s - 1.0) / 2.0)) + 2
    texture = Texture(rng, params.width, params.height, pad, params.octaves, params.base_cell)
    first = texture.sample(xs, ys)
    second = texture.sample(cx + (xs - cx) / s, cy + (ys - cy) / s)
    u, v = (s - 1.0) * (xs - cx), (s - 1.0) * (ys - cy)
    return first, second, u, v, _in_frame(xs + u, ys + v, params.width, params.height)


def _displacement_ranges(v_max):
    """Bucket ranges [low, min(high, v_max)) reachable by displacements up to v_max"""
    edges = DISPLACEMENT_EDGES
    ranges = [(lo, min(hi, v_max)) for lo, hi in zip(edges[:-1], edges[1:]) if lo < v_max]
    return ranges or [(0.0, 0.0)]


def _fitting_layer(rng, magnitude, width, height):
    """Rectangle and shift such that the rectangle lies in the frame before and after moving"""
    for _ in range(LAYER_PLACEMENT_TRIES):
        dx, dy = _random_vector(rng, magnitude)
        max_w, max_h = width - abs(dx) - 1.0, height - abs(dy) - 1.0
        if max_w >= MIN_LAYER_SIDE and max_h >= MIN_LAYER_SIDE:
            break
    w = max(1.0, min(rng.uniform(0.2, 0.45) * width, max_w))
    h = max(1.0, min(rng.uniform(0.2, 0.45) * height, max_h))
    x_low, y_low = max(0.0, -dx), max(0.0, -dy)
    rx = rng.uniform(x_low, max(x_low, width - w - max(0.0, dx)))
    ry = rng.uniform(y_low, max(y_low, height - h - max(0.0, dy)))
    return (rx, ry, w, h), (dx, dy)


def _layered_attempt(rng, params, xs, ys):
    width, height = params.width, params.height
    ranges = _displacement_ranges(params.v_max)

    # The background takes the slowest range; each faster range gets its own rectangle,
    # drawn above any extra layers
    stratified = [rng.uniform(lo, hi) for lo, hi in ranges[1:]]
    rng.shuffle(stratified)
    extra = [rng.uniform(0.0, params.v_max) for _ in range(max(0, params.layers - len(stratified)))]
    rects = [(0.0, 0.0, float(width), float(height))]
    shifts = [_random_vector(rng, rng.uniform(*ranges[0]))]
    for magnitude in extra + stratified:
        rect, shift = _fitting_layer(rng, magnitude, width, height)
        rects.append(rect)
        shifts.append(shift)
    n = len(rects)
    pad = int(np.ceil(params.v_max)) + 2
    textures = [Texture(rng, width, height, pad, params.octaves, params.base_cell) for _ in range(n)]

    def owner(x, y, moved):
        top = np.zeros(x.shape, dtype=np.int64)
        for k in range(1, n):
            rx, ry, w, h = rects[k]
            dx, dy = shifts[k] if moved else (0.0, 0.0)
            inside = (x >= rx + dx) & (x < rx + dx + w) & (y >= ry + dy) & (y < ry + dy + h)
            top[inside] = k
        return top

    first_owner = owner(xs, ys, moved=False)
    second_owner = owner(xs, ys, moved=True)
    first, second = np.zeros(xs.shape), np.zeros(xs.shape)
    u, v = np.zeros(xs.shape), np.zeros(xs.shape)
    for k in range(n):
        dx, dy = shifts[k]
        mine = first_owner == k
        first[mine] = textures[k].sample(xs[mine], ys[mine])
        u[mine], v[mine] = dx, dy
        seen = second_owner == k
        second[seen] = textures[k].sample(xs[seen] - dx, ys[seen] - dy)

    tx, ty = xs + u, ys + v
    valid = _in_frame(tx, ty, width, height)
    # Occluded when another layer owns the nearest target pixel in frame 2
    ix = np.clip(np.rint(tx).astype(np.int64), 0, width - 1)
    iy = np.clip(np.rint(ty).astype(np.int64), 0, height - 1)
    valid &= second_owner[iy, ix] == first_owner
    return first, second, u, v, valid


def _layered_pair(rng, params, xs, ys):
    """Layered motion, regenerated until every reachable displacement range has valid pixels"""
    n_ranges = len(_displacement_ranges(params.v_max))
    best, best_covered = None, -1
    for _ in range(LAYERED_ATTEMPTS):
        pair = _layered_attempt(rng, params, xs, ys)
        _, _, u, v, valid = pair
        buckets = np.searchsorted(DISPLACEMENT_EDGES, np.hypot(u, v)[valid], side="right") - 1
        covered = len(set(buckets.tolist()) & set(range(n_ranges)))
        if covered == n_ranges:
            return pair
        if covered > best_covered:
            best, best_covered = pair, covered
    logger.warning(
        f"Layered pair covers {best_covered} of {n_ranges} displacement ranges after {LAYERED_ATTEMPTS} attempts"
    )
    return best


def gen_synthetic_pair(rng, params=None):
    """
    Generate a textured frame pair with exact ground-truth flow

    Args:
        rng (numpy.random.Generator): Random stream
        params (SyntheticParams): Size, texture and displacement model

    Returns:
        tuple: (frame 1 GrayImage, frame 2 GrayImage, FlowField from frame 1 to frame 2)
    """
    params = params or SyntheticParams()
    ys, xs = np.mgrid[0:params.height, 0:params.width].astype(np.float64)
    builders = {"translation": _translation_pair, "zoom": _zoom_pair, "layered": _layered_pair}
    first, second, u, v, valid = builders[params.model](rng, params, xs, ys)

    first, second = np.clip(first, 0.0, 1.0), np.clip(second, 0.0, 1.0)
    if params.quantize:
        first = np.rint(first * 65535.0) / 65535.0
        second = np.rint(second * 65535.0) / 65535.0

    flow = FlowField.from_arrays(u, v, valid)
    logger.info(
        f"Generated '{params.model}' pair {params.width}x{params.height}: "
        f"{flow.count_valid()} valid pixels, max displacement {flow.magnitude[valid].max(initial=0.0):.1f}px"
    )
    return GrayImage.from_array(first), GrayImage.from_array(second), flow
