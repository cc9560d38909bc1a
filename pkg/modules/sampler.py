import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from modules.descriptor_net import TripletPatches, triplet_distances
from modules.loss import LossConfig, per_triplet_loss
from utils.data_processing import normalize_patches, padded_image
from utils.errors import SamplerError

logger = logging.getLogger(__name__)

STRATEGIES = (
    "baseline", "interleave", "interleave_cur", "interleave_sp", "spci",
    "anti", "cur_disp", "cur_dist", "self_paced", "neg_mine",
)

# Chebyshev radius of the negative neighbourhood
NEGATIVE_RADIUS = 8
MAX_PLACEMENT_TRIES = 100

# Epoch whose validation loss becomes l_init
L_INIT_EPOCH = 5

CUR_DISP_START = 10.0
CUR_DIST_START = 64.0
CUR_DIST_END = 8.0

SELF_PACED_START_PERCENTILE = 30.0
SELF_PACED_RETRIES = 10
NEG_MINE_FACTOR = 2


@dataclass(frozen=True)
class LogNormalParams:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise SamplerError(f"Log-normal sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class ScheduleState:
    """Where training stands: drives negative placement for one epoch"""

    strategy: str
    epoch: int
    total_epochs: int
    l_prev: float = None
    l_init: float = None
    seed: int = 0
    loss_threshold: float = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplerError(f"Unknown strategy '{self.strategy}', expected one of {', '.join(STRATEGIES)}")
        if self.total_epochs <= 0:
            raise SamplerError(f"Total epochs must be positive, got {self.total_epochs}")
        if not 0 <= self.epoch <= self.total_epochs:
            raise SamplerError(f"Epoch {self.epoch} outside [0, {self.total_epochs}]")
        for name in ("l_prev", "l_init", "loss_threshold"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise SamplerError(f"{name} must be non-negative, got {value}")
        for name in ("l_init", "loss_threshold"):
            if getattr(self, name) is not None and self.epoch < L_INIT_EPOCH:
                raise SamplerError(f"{name} cannot be fixed before epoch {L_INIT_EPOCH} (epoch {self.epoch})")

    @property
    def progress(self):
        return self.epoch / self.total_epochs


@dataclass(frozen=True)
class Triplet:
    p: tuple
    p_T: tuple
    p_F: tuple
    v: float


@dataclass
class TripletBatch:
    """Triplets as arrays: pixel coordinates are integer (x, y) rows"""

    anchors: np.ndarray
    matches: np.ndarray
    negatives: np.ndarray
    v: np.ndarray

    def __len__(self):
        return len(self.v)

    def __getitem__(self, i):
        return Triplet(
            p=tuple(int(c) for c in self.anchors[i]),
            p_T=tuple(int(c) for c in self.matches[i]),
            p_F=tuple(int(c) for c in self.negatives[i]),
            v=float(self.v[i]),
        )

    def take(self, index):
        return TripletBatch(self.anchors[index], self.matches[index], self.negatives[index], self.v[index])

    def negative_offsets(self):
        """Euclidean distance between each negative and its true match"""
        return np.hypot(*(self.negatives - self.matches).T.astype(np.float64))

    @staticmethod
    def concatenate(batches):
        return TripletBatch(
            np.concatenate([b.anchors for b in batches]),
            np.concatenate([b.matches for b in batches]),
            np.concatenate([b.negatives for b in batches]),
            np.concatenate([b.v for b in batches]),
        )


def sample_lognormal(rng, n, params=None):
    """Raw log-normal variates exp(mu + sigma * Z)"""
    params = params or LogNormalParams()
    return rng.lognormal(mean=params.mu, sigma=params.sigma, size=n)


def sample_lognormal_normalized(rng, n, params=None):
    """
    Draw n log-normal values and min-max normalize them over the batch

    Args:
        rng (numpy.random.Generator): Random stream
        n (int): Batch size, at least 2
        params (LogNormalParams): Distribution parameters

    Returns:
        numpy.ndarray: Values in [0,1] whose min is 0 and max is 1
    """
    if n < 2:
        raise SamplerError(f"Normalization needs at least 2 samples, got {n}")
    x = sample_lognormal(rng, n, params)
    low, high = x.min(), x.max()
    if high == low:
        raise SamplerError("Log-normal batch is constant and cannot be normalized")
    return (x - low) / (high - low)


def spci_coeff(state):
    """
    Difficulty multiplier R_i = (i/m) * max(0, 1 - l_prev/l_init)

    Zero until the reference loss is fixed after epoch 5.
    """
    if state.l_init is None or state.epoch < L_INIT_EPOCH:
        return 0.0
    if state.l_init == 0:
        raise SamplerError("Reference loss l_init is zero; the loss ratio is undefined")
    return state.progress * _self_paced_factor(state)


def _self_paced_factor(state):
    if state.l_init is None or state.l_prev is None or state.epoch < L_INIT_EPOCH:
        return 0.0
    if state.l_init == 0:
        raise SamplerError("Reference loss l_init is zero; the loss ratio is undefined")
    return max(0.0, 1.0 - state.l_prev / state.l_init)


def schedule_coeff(state):
    """Multiplier R_i used by the interleaving family of strategies"""
    if state.strategy == "spci":
        return spci_coeff(state)
    if state.strategy == "interleave_cur":
        return state.progress
    if state.strategy == "interleave_sp":
        return _self_paced_factor(state)
    return 0.0


def self_paced_threshold(epoch, total_epochs, losses, reference=None):
    """
    Loss threshold tau_i below which a candidate is admitted

    Until the reference is fixed at epoch 5 the threshold is the 30th
    percentile of the candidate losses. From then on it is an absolute
    loss, reference / (1 - t) with t = (i - 5) / (m - 5), so it grows from
    the reference to +inf at epoch m.

    Args:
        epoch (int): Current epoch i
        total_epochs (int): Total epochs m
        losses (numpy.ndarray): Candidate losses under the current model
        reference (float): 30th percentile loss fixed at epoch 5, if known

    Returns:
        float: tau_i (inf admits everything)
    """
    if epoch >= total_epochs:
        return np.inf
    if reference is None:
        return float(np.percentile(losses, SELF_PACED_START_PERCENTILE))
    if total_epochs <= L_INIT_EPOCH:
        return float(reference)
    t = max(0.0, (epoch - L_INIT_EPOCH) / (total_epochs - L_INIT_EPOCH))
    return float(reference) / (1.0 - t)


def negative_distance(v, x_hat, r):
    """
    Distance of the negative's line point from the true match

    Args:
        v (float or array): Displacement magnitude
        x_hat (float or array): Normalized log-normal value
        r (float): Difficulty multiplier R_i

    Returns:
        float or numpy.ndarray: clamp(v * (1 - x_hat - r), 0, v)
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise SamplerError("Displacement magnitude must be non-negative")
    d = np.clip(v * (1.0 - np.asarray(x_hat, dtype=np.float64) - r), 0.0, v)
    return float(d) if d.ndim == 0 else d


def _check_bounds(bounds):
    width, height = int(bounds[0]), int(bounds[1])
    if width < 1 or height < 1:
        raise SamplerError(f"Invalid bounds {bounds}")
    return width, height


def _draw_around(centers, matches, rng, bounds):
    """
    Uniform integer pixels within Chebyshev distance 8 of each center,
    restricted to the image, never equal to the matching row of matches
    """
    width, height = _check_bounds(bounds)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    matches = np.asarray(matches).reshape(-1, 2)

    low = np.ceil(centers - NEGATIVE_RADIUS - 1e-9).astype(np.int64)
    high = np.floor(centers + NEGATIVE_RADIUS + 1e-9).astype(np.int64)
    low = np.maximum(low, 0)
    high = np.minimum(high, [width - 1, height - 1])
    if np.any(high < low):
        raise SamplerError("Negative neighbourhood lies entirely outside the image")

    out = np.empty_like(low)
    pending = np.arange(len(centers))
    for _ in range(MAX_PLACEMENT_TRIES):
        if pending.size == 0:
            break
        draw = rng.integers(low[pending], high[pending] + 1)
        out[pending] = draw
        pending = pending[np.all(draw == matches[pending], axis=1)]
    if pending.size:
        raise SamplerError(
            f"No valid negative found after {MAX_PLACEMENT_TRIES} tries near {tuple(matches[pending[0]])}"
        )
    return out


def _line_points(anchors, matches, d):
    """Points at distance d from each match towards its anchor (the match itself when v=0)"""
    delta = (anchors - matches).astype(np.float64)
    norm = np.hypot(delta[:, 0], delta[:, 1])
    safe = np.where(norm > 0, norm, 1.0)
    return matches + np.where(norm[:, None] > 0, d[:, None] * delta / safe[:, None], 0.0)


def place_negative(p, p_T, d, rng, bounds):
    """
    Place one negative near the motion line between the true match and the anchor

    Args:
        p (tuple): Anchor pixel (x, y)
        p_T (tuple): True match pixel (x, y)
        d (float): Distance of the line point p_L from p_T, at most |p_T - p|
        rng (numpy.random.Generator): Random stream
        bounds (tuple): (width, height) of frame 2

    Returns:
        tuple: Negative pixel p_F
    """
    width, height = _check_bounds(bounds)
    p = np.asarray(p, dtype=np.int64).reshape(1, 2)
    p_T = np.asarray(p_T, dtype=np.int64).reshape(1, 2)
    if not (0 <= p_T[0, 0] < width and 0 <= p_T[0, 1] < height):
        raise SamplerError(f"True match {tuple(p_T[0])} outside {width}x{height}")
    v = float(np.hypot(*(p - p_T)[0]))
    if d < 0 or d > v + 1e-9:
        raise SamplerError(f"Distance {d} outside [0, {v}]")
    center = _line_points(p, p_T, np.array([float(d)]))
    p_F = _draw_around(center, p_T, rng, (width, height))[0]
    return int(p_F[0]), int(p_F[1])


class TripletSampler:
    """
    Builds triplet batches from one ground-truth training pair

    Eligible anchors are valid ground-truth pixels whose rounded target
    p_T = round(p + flow) lies in frame 2, optionally restricted to a
    displacement range [min_disp, max_disp).
    """

    def __init__(self, pair, gt, patch_size, lognormal=None, loss_cfg=None,
                 min_disp=None, max_disp=None):
        first, second = pair
        if (first.width, first.height) != (second.width, second.height):
            raise SamplerError("Frames of a pair must share dimensions")
        if (gt.width, gt.height) != (first.width, first.height):
            raise SamplerError("Ground truth dimensions do not match the frames")

        self.pair = pair
        self.patch_size = int(patch_size)
        self.lognormal = lognormal or LogNormalParams()
        self.loss_cfg = loss_cfg or LossConfig()
        self.bounds = (first.width, first.height)
        self.logger = logging.getLogger(__name__)

        ys, xs = np.nonzero(gt.valid)
        if xs.size == 0:
            raise SamplerError("Ground truth is not valid at any pixel")
        tx = np.rint(xs + gt.u[ys, xs]).astype(np.int64)
        ty = np.rint(ys + gt.v[ys, xs]).astype(np.int64)
        keep = (tx >= 0) & (tx < first.width) & (ty >= 0) & (ty < first.height)
        if not keep.any():
            raise SamplerError("No ground-truth target lands inside frame 2")
        anchors = np.stack([xs[keep], ys[keep]], axis=1)
        matches = np.stack([tx[keep], ty[keep]], axis=1)
        v = np.hypot(*(matches - anchors).T.astype(np.float64))

        lo = 0.0 if min_disp is None else float(min_disp)
        hi = np.inf if max_disp is None else float(max_disp)
        in_range = (v >= lo) & (v < hi)
        if not in_range.any():
            raise SamplerError(f"No eligible anchors with displacement in [{lo}, {hi})")
        self.anchors = anchors[in_range]
        self.matches = matches[in_range]
        self.v = v[in_range]
        self.v_max = float(self.v.max())

        self._windows = [
            sliding_window_view(padded_image(img, self.patch_size), (self.patch_size, self.patch_size))
            for img in pair
        ]
        self.logger.info(
            f"Sampler ready: {len(self.v)} eligible anchors, displacement up to {self.v_max:.1f}px"
        )

    def cur_disp_cap(self, state):
        """Maximum anchor displacement admitted at the current epoch"""
        return CUR_DISP_START + state.progress * max(0.0, self.v_max - CUR_DISP_START)

    def _draw_anchors(self, rng, n, cap=None):
        pool = np.arange(len(self.v))
        if cap is not None:
            pool = pool[self.v <= cap]
            if pool.size == 0:
                raise SamplerError(f"No eligible anchors under the cur_disp cap of {cap:.1f}px")
        idx = pool[rng.integers(0, pool.size, size=n)]
        return self.anchors[idx], self.matches[idx], self.v[idx]

    def _baseline(self, rng, anchors, matches, v):
        negatives = _draw_around(matches, matches, rng, self.bounds)
        return TripletBatch(anchors, matches, negatives, v)

    def _interleave(self, rng, anchors, matches, v, r):
        x_hat = sample_lognormal_normalized(rng, len(v), self.lognormal)
        d = np.atleast_1d(negative_distance(v, x_hat, r))
        centers = _line_points(anchors, matches, d)
        return TripletBatch(anchors, matches, _draw_around(centers, matches, rng, self.bounds), v)

    def _clip_to_image(self, points):
        width, height = self.bounds
        return np.clip(points, [0, 0], [width - 1, height - 1])

    def _anti(self, rng, anchors, matches, v):
        x_hat = sample_lognormal_normalized(rng, len(v), self.lognormal)
        d = (v.max() - v) * (1.0 - x_hat)
        delta = (anchors - matches).astype(np.float64)
        angle = rng.uniform(0.0, 2.0 * np.pi, size=len(v))
        random_dir = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        direction = np.where(v[:, None] > 0, delta / np.where(v > 0, v, 1.0)[:, None], random_dir)
        centers = self._clip_to_image(matches + d[:, None] * direction)
        return TripletBatch(anchors, matches, _draw_around(centers, matches, rng, self.bounds), v)

    def _cur_dist(self, rng, anchors, matches, v, state):
        t = state.progress
        d_c = CUR_DIST_START * (1.0 - t) + CUR_DIST_END * t
        angle = rng.uniform(0.0, 2.0 * np.pi, size=len(v))
        offsets = d_c * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        centers = self._clip_to_image(matches + offsets)
        return TripletBatch(anchors, matches, _draw_around(centers, matches, rng, self.bounds), v)

    def triplet_losses(self, net, batch):
        """Per-triplet loss of each triplet under the current network"""
        d_match, d_nonmatch = triplet_distances(net, self.patches(batch))
        return per_triplet_loss(d_match, d_nonmatch, self.loss_cfg)

    def _self_paced(self, rng, n, net, state):
        candidates = self._baseline(rng, *self._draw_anchors(rng, n))
        if state.epoch >= state.total_epochs:
            return candidates
        losses = self.triplet_losses(net, candidates)
        tau = self_paced_threshold(state.epoch, state.total_epochs, losses, state.loss_threshold)

        kept = [candidates.take(losses < tau)]
        rejected = [(candidates.take(losses >= tau), losses[losses >= tau])]
        count = len(kept[0])
        for _ in range(SELF_PACED_RETRIES):
            if count >= n:
                break
            extra = self._baseline(rng, *self._draw_anchors(rng, n - count))
            extra_losses = self.triplet_losses(net, extra)
            easy = extra_losses < tau
            kept.append(extra.take(easy))
            rejected.append((extra.take(~easy), extra_losses[~easy]))
            count += int(easy.sum())

        if count < n:
            pool = TripletBatch.concatenate([b for b, _ in rejected])
            pool_losses = np.concatenate([l for _, l in rejected])
            order = np.argsort(pool_losses, kind="stable")[:n - count]
            kept.append(pool.take(order))
            self.logger.warning(
                f"Self-paced filter kept {count}/{n} triplets below tau={tau:.4f}; "
                f"filled the rest with the lowest-loss candidates"
            )
        return TripletBatch.concatenate(kept).take(np.arange(n))

    def _neg_mine(self, rng, n, net):
        anchors, matches, v = self._draw_anchors(rng, n)
        candidates = [self._baseline(rng, anchors, matches, v) for _ in range(NEG_MINE_FACTOR)]
        losses = np.stack([self.triplet_losses(net, c) for c in candidates])
        best = np.argmax(losses, axis=0)
        negatives = np.stack([c.negatives for c in candidates])[best, np.arange(n)]
        return TripletBatch(anchors, matches, negatives, v)

    def build(self, state, n, net=None, batch_index=0):
        """
        Build n triplets for one batch under the state's strategy

        The random stream is derived from (seed, epoch, batch_index) so a
        batch is reproducible on its own.

        Args:
            state (ScheduleState): Strategy and schedule position
            n (int): Number of triplets, at least 2
            net (DescriptorNet): Current network (self_paced and neg_mine only)
            batch_index (int): Index of the batch within the epoch

        Returns:
            TripletBatch: n triplets
        """
        if n < 2:
            raise SamplerError(f"Batch size must be at least 2, got {n}")
        strategy = state.strategy
        if strategy in ("self_paced", "neg_mine"):
            if net is None:
                raise SamplerError(f"Strategy '{strategy}' needs the current network")
            if net.input_size != self.patch_size:
                raise SamplerError(f"Network input {net.input_size} does not match patch size {self.patch_size}")

        rng = np.random.default_rng([state.seed, state.epoch, batch_index])

        if strategy == "self_paced":
            batch = self._self_paced(rng, n, net, state)
        elif strategy == "neg_mine":
            batch = self._neg_mine(rng, n, net)
        else:
            cap = self.cur_disp_cap(state) if strategy == "cur_disp" else None
            anchors, matches, v = self._draw_anchors(rng, n, cap)
            if strategy in ("baseline", "cur_disp"):
                batch = self._baseline(rng, anchors, matches, v)
            elif strategy == "anti":
                batch = self._anti(rng, anchors, matches, v)
            elif strategy == "cur_dist":
                batch = self._cur_dist(rng, anchors, matches, v, state)
            else:
                batch = self._interleave(rng, anchors, matches, v, schedule_coeff(state))

        self.logger.debug(
            f"Built {len(batch)} '{strategy}' triplets for epoch {state.epoch}, batch {batch_index}; "
            f"mean negative offset {batch.negative_offsets().mean():.2f}px"
        )
        return batch

    def patches(self, batch):
        """Normalized anchor (frame 1), positive and negative (frame 2) patches"""
        first, second = self._windows
        return TripletPatches(
            anchors=normalize_patches(first[batch.anchors[:, 1], batch.anchors[:, 0]]),
            positives=normalize_patches(second[batch.matches[:, 1], batch.matches[:, 0]]),
            negatives=normalize_patches(second[batch.negatives[:, 1], batch.negatives[:, 0]]),
        )


def build_triplets(pair, gt, state, n, net=None, patch_size=None, **sampler_kwargs):
    """
    Build one batch of triplets for a training pair

    Args:
        pair (tuple): (frame 1, frame 2) GrayImages
        gt (FlowField): Ground truth from frame 1 to frame 2
        state (ScheduleState): Strategy and schedule position
        n (int): Number of triplets
        net (DescriptorNet): Required for self_paced and neg_mine
        patch_size (int): Patch side length (defaults to the net input or 31)

    Returns:
        TripletBatch: n triplets
    """
    if patch_size is None:
        patch_size = net.input_size if net is not None else 31
    sampler = TripletSampler(pair, gt, patch_size, **sampler_kwargs)
    return sampler.build(state, n, net)
