import logging
from dataclasses import dataclass

import numpy as np
from sklearn.neighbors import NearestNeighbors

from utils.data_processing import FlowField
from utils.errors import DensifyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DensifyParams:
    """K nearest seeds, spatial scale sigma_s (px) and luminance scale sigma_c"""

    k: int = 16
    sigma_s: float = 15.0
    sigma_c: float = 0.08

    def __post_init__(self):
        if self.k < 1:
            raise DensifyError(f"K must be at least 1, got {self.k}")
        if not (self.sigma_s > 0 and self.sigma_c > 0):
            raise DensifyError("Spatial and luminance scales must be positive")


class SparseToDense:
    """
    Edge-aware weighted interpolation of a sparse flow field

    Each invalid pixel takes the weighted mean flow of its K spatially
    nearest valid seeds, with weights exp(-|dx|/sigma_s - |I(p)-I(q)|/sigma_c).
    """

    def __init__(self, params=None):
        self.params = params or DensifyParams()
        self.logger = logging.getLogger(__name__)

    def weights(self, distances, luminance_gaps):
        """Normalized seed weights per row, computed in the log domain"""
        log_w = -distances / self.params.sigma_s - luminance_gaps / self.params.sigma_c
        log_w -= log_w.max(axis=1, keepdims=True)
        w = np.exp(log_w)
        return w / w.sum(axis=1, keepdims=True)

    def densify(self, sparse, img):
        """
        Fill every invalid pixel of a sparse flow

        Args:
            sparse (FlowField): Flow with at least one valid pixel
            img (GrayImage): Frame 1, guiding the luminance term

        Returns:
            FlowField: Fully valid flow; valid input pixels are copied through
        """
        if (sparse.width, sparse.height) != (img.width, img.height):
            raise DensifyError("Flow and image dimensions differ")
        n_seeds = sparse.count_valid()
        if n_seeds == 0:
            raise DensifyError("Sparse flow has no valid pixels")

        u, v = sparse.u.copy(), sparse.v.copy()
        holes = ~sparse.valid
        if not holes.any():
            return FlowField.from_arrays(u, v)

        seed_y, seed_x = np.nonzero(sparse.valid)
        hole_y, hole_x = np.nonzero(holes)
        k = min(self.params.k, n_seeds)

        index = NearestNeighbors(n_neighbors=k).fit(np.stack([seed_x, seed_y], axis=1))
        distances, neighbours = index.kneighbors(np.stack([hole_x, hole_y], axis=1))

        seed_lum = img.data[seed_y, seed_x]
        gaps = np.abs(img.data[hole_y, hole_x][:, None] - seed_lum[neighbours])
        w = self.weights(distances, gaps)

        u[hole_y, hole_x] = np.sum(w * sparse.u[seed_y, seed_x][neighbours], axis=1)
        v[hole_y, hole_x] = np.sum(w * sparse.v[seed_y, seed_x][neighbours], axis=1)
        self.logger.info(f"Densified {hole_y.size} pixels from {n_seeds} seeds (K={k})")
        return FlowField.from_arrays(u, v)


def densify(sparse, img, params=None):
    params = params or DensifyParams()
    logger.debug(f"Densifying with K={params.k}, sigma_s={params.sigma_s}, sigma_c={params.sigma_c}")
    return SparseToDense(params).densify(sparse, img)
