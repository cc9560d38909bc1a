import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from utils.data_processing import FlowField
from utils.errors import NNFError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PMParams:
    """Search range R, iteration count, random-search decay alpha and seed"""

    search_range: int = 10
    iterations: int = 6
    decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.search_range < 1:
            raise NNFError(f"Search range must be at least 1, got {self.search_range}")
        if self.iterations < 1:
            raise NNFError(f"Iterations must be at least 1, got {self.iterations}")
        if not 0.0 < self.decay < 1.0:
            raise NNFError(f"Decay must be within (0,1), got {self.decay}")

    def radii(self):
        """Random-search window radii R, R*alpha, ... down to 1 pixel"""
        radii = []
        r = float(self.search_range)
        while r >= 1.0:
            radii.append(int(r))
            r *= self.decay
        return radii


@dataclass
class NNField:
    """
    Offsets (dx, dy) from every pixel of A into B, with the matching cost

    offsets has shape (height, width, 2); cost has shape (height, width).
    """

    offsets: np.ndarray
    cost: np.ndarray
    target_width: int
    target_height: int

    @property
    def height(self):
        return self.offsets.shape[0]

    @property
    def width(self):
        return self.offsets.shape[1]

    def targets(self):
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return xs + self.offsets[..., 0], ys + self.offsets[..., 1]

    def to_flow(self):
        return FlowField.from_arrays(self.offsets[..., 0], self.offsets[..., 1])


def descriptor_cost(a, b):
    """L2 distance between descriptor vectors along the last axis"""
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_fields(A, B):
    if A.dim != B.dim:
        raise NNFError(f"Descriptor dimensions differ: {A.dim} vs {B.dim}")


def init_nnf(A, B, params, rng):
    """
    Random initial field: offsets uniform within +-R, restricted to B

    Args:
        A (DescriptorField): Source descriptors
        B (DescriptorField): Target descriptors
        params (PMParams): Search parameters
        rng (numpy.random.Generator): Random stream

    Returns:
        NNField: Initial field with costs filled in
    """
    _check_fields(A, B)
    r = params.search_range
    ys, xs = np.mgrid[0:A.height, 0:A.width]
    low_x, high_x = np.maximum(-r, -xs), np.minimum(r, B.width - 1 - xs)
    low_y, high_y = np.maximum(-r, -ys), np.minimum(r, B.height - 1 - ys)
    if np.any(high_x < low_x) or np.any(high_y < low_y):
        raise NNFError(f"Some pixels of A have no target in B within range {r}")

    dx = rng.integers(low_x, high_x + 1)
    dy = rng.integers(low_y, high_y + 1)
    offsets = np.stack([dx, dy], axis=-1)
    cost = descriptor_cost(A.data, B.data[ys + dy, xs + dx])
    return NNField(offsets, cost, B.width, B.height)


def _propagate(A, B, offsets, cost, reverse):
    """One raster sweep adopting a neighbour's offset when it lowers the cost"""
    height, width = cost.shape
    a, b = A.data, B.data
    step = 1 if reverse else -1
    ys = range(height - 1, -1, -1) if reverse else range(height)
    xs = range(width - 1, -1, -1) if reverse else range(width)
    improved = 0
    for y in ys:
        for x in xs:
            for nx, ny in ((x + step, y), (x, y + step)):
                if not (0 <= nx < width and 0 <= ny < height):
                    continue
                dx, dy = offsets[ny, nx]
                tx, ty = x + dx, y + dy
                if not (0 <= tx < B.width and 0 <= ty < B.height):
                    continue
                if dx == offsets[y, x, 0] and dy == offsets[y, x, 1]:
                    continue
                c = descriptor_cost(a[y, x], b[ty, tx])
                if c < cost[y, x]:
                    offsets[y, x] = (dx, dy)
                    cost[y, x] = c
                    improved += 1
    return improved


def _random_search(A, B, offsets, cost, radii, uniforms):
    """Try one random offset per radius around each pixel's current best"""
    ys, xs = np.mgrid[0:A.height, 0:A.width]
    improved = 0
    for k, r in enumerate(radii):
        jitter = np.floor(uniforms[k] * (2 * r + 1)).astype(np.int64) - r
        tx = np.clip(xs + offsets[..., 0] + jitter[..., 0], 0, B.width - 1)
        ty = np.clip(ys + offsets[..., 1] + jitter[..., 1], 0, B.height - 1)
        candidate = descriptor_cost(A.data, B.data[ty, tx])
        better = candidate < cost
        offsets[..., 0] = np.where(better, tx - xs, offsets[..., 0])
        offsets[..., 1] = np.where(better, ty - ys, offsets[..., 1])
        cost[:] = np.where(better, candidate, cost)
        improved += int(better.sum())
    return improved


def patchmatch(A, B, params, rng=None, progress=False):
    """
    Approximate nearest-neighbour field from A into B

    Each iteration is a raster propagation sweep (forward on even
    iterations, backward on odd ones) followed by a random search with
    radii R * alpha^k >= 1 around the current best. Offsets only change
    when the cost strictly drops, so costs never increase.

    Args:
        A (DescriptorField): Source descriptors
        B (DescriptorField): Target descriptors
        params (PMParams): Search parameters
        rng (numpy.random.Generator): Random stream (defaults to one seeded from params)
        progress (bool): Show a progress bar

    Returns:
        NNField: Final field
    """
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    nnf = init_nnf(A, B, params, rng)
    offsets, cost = nnf.offsets.copy(), nnf.cost.copy()
    radii = params.radii()

    iterations = tqdm(range(params.iterations), desc="PatchMatch",
                      disable=not (progress and sys.stdout.isatty()))
    for it in iterations:
        # Drawn up front and indexed by pixel so search never depends on scan order
        uniforms = rng.random((len(radii), A.height, A.width, 2))
        propagated = _propagate(A, B, offsets, cost, reverse=bool(it % 2))
        searched = _random_search(A, B, offsets, cost, radii, uniforms)
        logger.debug(
            f"PatchMatch iteration {it + 1}: {propagated} propagated, {searched} improved by search, "
            f"mean cost {cost.mean():.4f}"
        )
    return NNField(offsets, cost, B.width, B.height)


def bidirectional_patchmatch(A, B, params, workers=2, progress=False):
    """
    Forward (A to B) and backward (B to A) fields, computed concurrently

    Each direction draws from its own stream derived from (seed, direction).

    Returns:
        tuple: (forward NNField, backward NNField)
    """
    jobs = [(A, B, 0), (B, A, 1)]

    def run(job):
        src, dst, direction = job
        return patchmatch(src, dst, params, np.random.default_rng([params.seed, direction]), progress)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=2) as executor:
            fwd, bwd = executor.map(run, jobs)
    else:
        fwd, bwd = [run(job) for job in jobs]
    logger.info(f"PatchMatch done: mean cost forward {fwd.cost.mean():.4f}, backward {bwd.cost.mean():.4f}")
    return fwd, bwd


def consistency_filter(fwd, bwd, tau=1.0):
    """
    Keep forward matches whose backward match returns close to the source

    Pixel p is valid iff |fwd(p) + bwd(p + fwd(p))| <= tau.

    Args:
        fwd (NNField): Field from frame 1 into frame 2
        bwd (NNField): Field from frame 2 into frame 1
        tau (float): Tolerance in pixels

    Returns:
        FlowField: Forward offsets, valid where consistent
    """
    if (fwd.target_width, fwd.target_height) != (bwd.width, bwd.height) or \
            (bwd.target_width, bwd.target_height) != (fwd.width, fwd.height):
        raise NNFError("Forward and backward fields have incompatible dimensions")
    tx, ty = fwd.targets()
    back = bwd.offsets[ty, tx]
    residual = np.hypot(fwd.offsets[..., 0] + back[..., 0], fwd.offsets[..., 1] + back[..., 1])
    valid = residual <= tau
    logger.info(f"Consistency check kept {int(valid.sum())}/{valid.size} matches (tau={tau})")
    return FlowField.from_arrays(fwd.offsets[..., 0], fwd.offsets[..., 1], valid)
