import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from modules.patchmatch import descriptor_cost
from utils.data_processing import DISPLACEMENT_EDGES
from utils.errors import EvalError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["bucket_low", "bucket_high", "metric", "value"]

ALL_KEY = "all"


@dataclass(frozen=True)
class DisplacementBuckets:
    """Left-closed displacement ranges [edge_i, edge_i+1)"""

    edges: tuple = DISPLACEMENT_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise EvalError(f"Bucket edges must be strictly increasing, got {self.edges}")
        object.__setattr__(self, "edges", edges)

    def ranges(self):
        return list(zip(self.edges[:-1], self.edges[1:]))

    def assign(self, v):
        """Bucket index of every magnitude, -1 when outside all buckets"""
        v = np.asarray(v, dtype=np.float64)
        idx = np.searchsorted(self.edges, v, side="right") - 1
        return np.where((idx >= 0) & (idx < len(self.edges) - 1), idx, -1)


SENSITIVITY_BUCKETS = DisplacementBuckets((0.0, 5.0, 10.0, 40.0, np.inf))


def _check_same_size(a, b, what):
    if (a.width, a.height) != (b.width, b.height):
        raise EvalError(f"{what} dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def _resolve_mask(gt, mask):
    if mask is None:
        mask = gt.valid
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.valid.shape:
        raise EvalError(f"Mask shape {mask.shape} does not match the flow {gt.valid.shape}")
    if np.any(mask & ~gt.valid):
        raise EvalError("Mask includes pixels where ground truth is invalid")
    if not mask.any():
        raise EvalError("Evaluation mask is empty")
    return mask


def endpoint_errors(flow, gt):
    """Per-pixel Euclidean error between two flow fields"""
    _check_same_size(flow, gt, "Flow and ground truth")
    return np.hypot(flow.u - gt.u, flow.v - gt.v)


def outlier_rate(flow, gt, threshold=3.0, mask=None):
    """
    Percentage of masked pixels whose end-point error exceeds the threshold

    Args:
        flow (FlowField): Estimated flow
        gt (FlowField): Ground truth
        threshold (float): Error threshold in pixels
        mask (numpy.ndarray): Pixels to evaluate (defaults to gt-valid pixels)

    Returns:
        float: Outlier percentage in [0, 100]
    """
    errors = endpoint_errors(flow, gt)
    mask = _resolve_mask(gt, mask)
    return 100.0 * float(np.count_nonzero(errors[mask] > threshold)) / float(mask.sum())


def epe(flow, gt, mask=None):
    """Mean end-point error over the mask"""
    errors = endpoint_errors(flow, gt)
    mask = _resolve_mask(gt, mask)
    return float(errors[mask].mean())


def _bucket_means(values, bucket_idx, buckets):
    """Mean per non-empty bucket; empty buckets are left out"""
    means = {}
    for i, (low, high) in enumerate(buckets.ranges()):
        selected = values[bucket_idx == i]
        if selected.size:
            means[(low, high)] = float(selected.mean())
    return means


def _matched_pixels(gt, width, height):
    """gt-valid pixels whose rounded target lies inside a width x height frame"""
    ys, xs = np.nonzero(gt.valid)
    tx = np.rint(xs + gt.u[ys, xs]).astype(np.int64)
    ty = np.rint(ys + gt.v[ys, xs]).astype(np.int64)
    inside = (tx >= 0) & (tx < width) & (ty >= 0) & (ty < height)
    return xs[inside], ys[inside], tx[inside], ty[inside]


def disc_offsets(radius):
    """Integer offsets within a Euclidean disc, the center excluded"""
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = (dx ** 2 + dy ** 2 <= radius ** 2) & ~((dx == 0) & (dy == 0))
    return dx[keep], dy[keep]


class DistractorCounter:
    """
    Counts, per anchor, the pixels near the true match whose descriptor is
    strictly closer to the anchor descriptor than the true match's is
    """

    def __init__(self, radius=25.0):
        if radius < 1:
            raise EvalError(f"Distractor radius must be at least 1, got {radius}")
        self.radius = float(radius)
        self.dx, self.dy = disc_offsets(self.radius)
        self.logger = logging.getLogger(__name__)

    def counts(self, desc_a, desc_b, gt):
        """
        Returns:
            tuple: (displacement magnitudes, distractor counts) for every evaluated pixel
        """
        _check_same_size(desc_a, gt, "Descriptors and ground truth")
        if desc_a.dim != desc_b.dim:
            raise EvalError(f"Descriptor dimensions differ: {desc_a.dim} vs {desc_b.dim}")
        xs, ys, tx, ty = _matched_pixels(gt, desc_b.width, desc_b.height)
        if xs.size == 0:
            raise EvalError("No ground-truth match lands inside the second frame")

        counts = np.zeros(xs.size, dtype=np.int64)
        for i in range(xs.size):
            anchor = desc_a.data[ys[i], xs[i]]
            true_dist = descriptor_cost(anchor, desc_b.data[ty[i], tx[i]])
            qx, qy = tx[i] + self.dx, ty[i] + self.dy
            inside = (qx >= 0) & (qx < desc_b.width) & (qy >= 0) & (qy < desc_b.height)
            dists = descriptor_cost(anchor[None], desc_b.data[qy[inside], qx[inside]])
            counts[i] = np.count_nonzero(dists < true_dist)
        return gt.magnitude[ys, xs], counts


def count_distractors(desc_a, desc_b, gt, radius=25.0, buckets=None):
    """
    Mean distractor count per displacement bucket

    Args:
        desc_a (DescriptorField): Frame 1 descriptors
        desc_b (DescriptorField): Frame 2 descriptors
        gt (FlowField): Ground truth
        radius (float): Euclidean radius around the true match
        buckets (DisplacementBuckets): Displacement ranges

    Returns:
        dict: (low, high) -> mean count for non-empty buckets, plus "all" -> overall mean
    """
    buckets = buckets or DisplacementBuckets()
    magnitudes, counts = DistractorCounter(radius).counts(desc_a, desc_b, gt)
    means = _bucket_means(counts.astype(np.float64), buckets.assign(magnitudes), buckets)
    means[ALL_KEY] = float(counts.mean())
    logger.info(f"Distractors: mean {means[ALL_KEY]:.3f} over {counts.size} pixels")
    return means


def match_distance_profile(desc_a, desc_b, gt, buckets=None):
    """Mean true-match descriptor distance per displacement bucket (empty buckets absent)"""
    buckets = buckets or DisplacementBuckets()
    _check_same_size(desc_a, gt, "Descriptors and ground truth")
    xs, ys, tx, ty = _matched_pixels(gt, desc_b.width, desc_b.height)
    distances = descriptor_cost(desc_a.data[ys, xs], desc_b.data[ty, tx])
    return _bucket_means(distances, buckets.assign(gt.magnitude[ys, xs]), buckets)


def sensitivity_profile(desc_a, gt, offset=5, buckets=None):
    """
    Descriptor change under a horizontal shift, relative to slow pixels

    For each bucket, the mean of |desc(p) - desc(p + (offset, 0))| over its
    pixels, divided by the same mean over the first bucket.

    Args:
        desc_a (DescriptorField): Frame 1 descriptors
        gt (FlowField): Ground truth, used for displacement buckets
        offset (int): Horizontal neighbour offset in pixels
        buckets (DisplacementBuckets): Buckets; the first is the reference

    Returns:
        dict: (low, high) -> ratio for non-empty buckets
    """
    buckets = buckets or SENSITIVITY_BUCKETS
    _check_same_size(desc_a, gt, "Descriptors and ground truth")
    if desc_a.width <= offset:
        raise EvalError(f"Image width {desc_a.width} is too small for a {offset}px offset")

    ys, xs = np.nonzero(gt.valid[:, :desc_a.width - offset])
    distances = descriptor_cost(desc_a.data[ys, xs], desc_a.data[ys, xs + offset])
    means = _bucket_means(distances, buckets.assign(gt.magnitude[ys, xs]), buckets)

    reference = buckets.ranges()[0]
    if reference not in means:
        raise EvalError(f"Reference bucket {reference} is empty")
    if means[reference] == 0.0:
        raise EvalError("Reference bucket mean distance is zero; ratios are undefined")
    return {key: value / means[reference] for key, value in means.items()}


def bucketed_flow_errors(flow, gt, buckets=None, threshold=3.0):
    """Outlier rate and EPE per displacement bucket and over all valid pixels"""
    buckets = buckets or DisplacementBuckets()
    errors = endpoint_errors(flow, gt)
    idx = np.where(gt.valid, buckets.assign(gt.magnitude), -1)
    results = {
        "outlier_rate": _bucket_means(100.0 * (errors > threshold), idx, buckets),
        "epe": _bucket_means(errors, idx, buckets),
    }
    results["outlier_rate"][ALL_KEY] = outlier_rate(flow, gt, threshold)
    results["epe"][ALL_KEY] = epe(flow, gt)
    return results


def metrics_frame(means, metric, buckets=None):
    """
    Tidy CSV rows (bucket_low, bucket_high, metric, value)

    The "all" entry is written as the full range of the buckets.
    """
    buckets = buckets or DisplacementBuckets()
    rows = []
    for key, value in means.items():
        low, high = (buckets.edges[0], buckets.edges[-1]) if key == ALL_KEY else key
        rows.append({"bucket_low": low, "bucket_high": high, "metric": metric, "value": value})
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)
