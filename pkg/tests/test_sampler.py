import unittest
import sys
import os
from unittest.mock import patch

import numpy as np
from numpy.testing import assert_array_equal
from scipy.stats import chisquare

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.descriptor_net import DescriptorNet
from modules.sampler import (LogNormalParams, ScheduleState, TripletSampler, build_triplets, negative_distance,
                             place_negative, sample_lognormal, sample_lognormal_normalized, self_paced_threshold,
                             spci_coeff)
from utils.data_processing import FlowField, GrayImage
from utils.errors import SamplerError

WIDTH, HEIGHT = 96, 40

SMALL_LAYERS = [
    {"type": "conv", "channels": 4, "kernel": 3, "stride": 2},
    {"type": "tanh"},
    {"type": "dense", "units": 8},
]


def ramp_pair(seed=0):
    """Random frames with a horizontal flow u = -x/2, so displacement grows with x"""
    rng = np.random.default_rng(seed)
    first = GrayImage.from_array(rng.random((HEIGHT, WIDTH)))
    second = GrayImage.from_array(rng.random((HEIGHT, WIDTH)))
    xs = np.tile(np.arange(WIDTH, dtype=np.float64), (HEIGHT, 1))
    gt = FlowField.from_arrays(-0.5 * xs, np.zeros((HEIGHT, WIDTH)))
    return (first, second), gt


def bucket_means(values, offsets, edges):
    means = []
    for low, high in zip(edges[:-1], edges[1:]):
        mask = (values >= low) & (values < high)
        means.append(offsets[mask].mean())
    return means


class TestLogNormal(unittest.TestCase):
    """Test cases for the log-normal draws"""

    def test_normalized_endpoints(self):
        """Test normalized endpoints"""
        x = sample_lognormal_normalized(np.random.default_rng(1), 50)
        self.assertEqual(x.min(), 0.0)
        self.assertEqual(x.max(), 1.0)

    def test_raw_median(self):
        """Test raw median"""
        x = sample_lognormal(np.random.default_rng(2), 100000, LogNormalParams(0.0, 1.0))
        self.assertLess(abs(np.median(x) - 1.0), 0.03)

    def test_deterministic(self):
        """Test deterministic"""
        a = sample_lognormal_normalized(np.random.default_rng(3), 20)
        b = sample_lognormal_normalized(np.random.default_rng(3), 20)
        assert_array_equal(a, b)

    def test_needs_two_samples(self):
        """Test needs two samples"""
        with self.assertRaises(SamplerError):
            sample_lognormal_normalized(np.random.default_rng(0), 1)

    def test_sigma_must_be_positive(self):
        """Test sigma must be positive"""
        with self.assertRaises(SamplerError):
            LogNormalParams(sigma=0.0)


class TestSchedule(unittest.TestCase):
    """Test cases for the SPCI multiplier and negative distance"""

    def test_spci_zero_at_start(self):
        """Test spci zero at start"""
        self.assertEqual(spci_coeff(ScheduleState("spci", 0, 10)), 0.0)

    def test_spci_zero_without_improvement(self):
        """Test spci zero without improvement"""
        state = ScheduleState("spci", 8, 10, l_prev=3.0, l_init=2.0)
        self.assertEqual(spci_coeff(state), 0.0)

    def test_spci_final_epoch_half_loss(self):
        """Test spci final epoch half loss"""
        state = ScheduleState("spci", 10, 10, l_prev=1.0, l_init=2.0)
        self.assertEqual(spci_coeff(state), 0.5)

    def test_spci_synthetic_trace(self):
        """Test spci synthetic trace"""
        m, l_init = 40, 2.0
        values = []
        for i in range(m + 1):
            l_i = l_init * (1.0 - i / (2 * m))
            if i < 5:
                state = ScheduleState("spci", i, m, l_prev=l_i)
            else:
                state = ScheduleState("spci", i, m, l_prev=l_i, l_init=l_init)
            values.append(spci_coeff(state))
        self.assertEqual(values[0], 0.0)
        self.assertEqual(values[-1], 0.5)
        self.assertTrue(all(b >= a for a, b in zip(values, values[1:])))

    def test_spci_zero_reference_loss(self):
        """Test spci zero reference loss"""
        with self.assertRaises(SamplerError):
            spci_coeff(ScheduleState("spci", 6, 10, l_prev=1.0, l_init=0.0))

    def test_l_init_not_before_epoch_five(self):
        """Test l init not before epoch five"""
        with self.assertRaises(SamplerError):
            ScheduleState("spci", 3, 10, l_prev=1.0, l_init=1.0)

    def test_loss_threshold_not_before_epoch_five(self):
        """Test loss threshold not before epoch five"""
        with self.assertRaises(SamplerError):
            ScheduleState("self_paced", 4, 10, loss_threshold=1.0)

    def test_self_paced_threshold_ignores_losses_once_fixed(self):
        """Test self paced threshold ignores losses once fixed"""
        cheap, costly = np.full(50, 0.1), np.linspace(10.0, 90.0, 50)
        self.assertEqual(self_paced_threshold(5, 10, cheap, 2.0), 2.0)
        self.assertAlmostEqual(self_paced_threshold(7, 10, cheap, 2.0), 2.0 / 0.6)
        self.assertEqual(self_paced_threshold(7, 10, cheap, 2.0), self_paced_threshold(7, 10, costly, 2.0))
        self.assertEqual(self_paced_threshold(10, 10, costly, 2.0), np.inf)

    def test_self_paced_threshold_warm_up_uses_the_easiest_third(self):
        """Test self paced threshold warm up uses the easiest third"""
        losses = np.arange(101, dtype=np.float64)
        self.assertEqual(self_paced_threshold(2, 10, losses), 30.0)
        self.assertEqual(self_paced_threshold(2, 10, losses * 2.0), 60.0)

    def test_unknown_strategy(self):
        """Test unknown strategy"""
        with self.assertRaises(SamplerError):
            ScheduleState("random", 0, 10)

    def test_negative_distance_examples(self):
        """Test negative distance examples"""
        self.assertEqual(negative_distance(0.0, 0.3, 0.0), 0.0)
        self.assertEqual(negative_distance(40.0, 0.0, 0.0), 40.0)
        self.assertEqual(negative_distance(40.0, 0.75, 0.5), 0.0)

    def test_negative_distance_rejects_negative_v(self):
        """Test negative distance rejects negative v"""
        with self.assertRaises(SamplerError):
            negative_distance(-1.0, 0.0, 0.0)


class TestPlaceNegative(unittest.TestCase):
    """Test cases for single negative placement"""

    def test_zero_distance_is_baseline(self):
        """Test zero distance is baseline"""
        rng = np.random.default_rng(4)
        for _ in range(500):
            p_F = place_negative((20, 20), (30, 25), 0.0, rng, (64, 64))
            self.assertLessEqual(max(abs(p_F[0] - 30), abs(p_F[1] - 25)), 8)
            self.assertNotEqual(p_F, (30, 25))

    def test_full_distance_clusters_at_anchor(self):
        """Test full distance clusters at anchor"""
        rng = np.random.default_rng(5)
        for _ in range(200):
            p_F = place_negative((20, 20), (50, 20), 30.0, rng, (64, 64))
            self.assertLessEqual(max(abs(p_F[0] - 20), abs(p_F[1] - 20)), 8)

    def test_uniform_around_line_point(self):
        """Test uniform around line point"""
        rng = np.random.default_rng(6)
        draws = np.array([place_negative((0, 0), (10, 0), 4.0, rng, (64, 64)) for _ in range(10000)])
        self.assertTrue(np.all(np.abs(draws - [6, 0]).max(axis=1) <= 8))

        # support: x in [0, 14], y in [0, 8], minus the true match
        counts = np.zeros((9, 15), dtype=np.int64)
        np.add.at(counts, (draws[:, 1], draws[:, 0]), 1)
        self.assertEqual(counts[0, 10], 0)
        observed = np.delete(counts.ravel(), 10)
        self.assertGreater(chisquare(observed).pvalue, 0.01)

    def test_distance_beyond_anchor(self):
        """Test distance beyond anchor"""
        with self.assertRaises(SamplerError):
            place_negative((0, 0), (10, 0), 11.0, np.random.default_rng(0), (64, 64))

    def test_pathological_bounds(self):
        """Test pathological bounds"""
        with self.assertRaises(SamplerError):
            place_negative((0, 0), (0, 0), 0.0, np.random.default_rng(0), (1, 1))


class TestTripletSampler(unittest.TestCase):
    """Test cases for strategy-specific triplet batches"""

    def setUp(self):
        """Set up test fixtures"""
        self.pair, self.gt = ramp_pair()
        self.sampler = TripletSampler(self.pair, self.gt, 9)

    def _many(self, strategy, batches=100, n=100, epoch=0, total=10, **state_kw):
        state = ScheduleState(strategy, epoch, total, **state_kw)
        return [self.sampler.build(state, n, batch_index=b) for b in range(batches)]

    def _assert_valid(self, batch):
        self.assertTrue(np.all((batch.negatives >= 0) & (batch.negatives < [WIDTH, HEIGHT])))
        self.assertFalse(np.any(np.all(batch.negatives == batch.matches, axis=1)))

    def test_baseline_geometry(self):
        """Test baseline geometry"""
        for batch in self._many("baseline", batches=20):
            self._assert_valid(batch)
            self.assertTrue(np.all(np.abs(batch.negatives - batch.matches).max(axis=1) <= 8))

    def test_interleave_geometry(self):
        """Test interleave geometry"""
        for batch in self._many("interleave"):
            self._assert_valid(batch)
            low = np.minimum(batch.matches[:, 0], batch.anchors[:, 0]) - 8
            high = np.maximum(batch.matches[:, 0], batch.anchors[:, 0]) + 8
            self.assertTrue(np.all((batch.negatives[:, 0] >= low) & (batch.negatives[:, 0] <= high)))
            self.assertTrue(np.all(np.abs(batch.negatives[:, 1] - batch.matches[:, 1]) <= 8))

    def test_interleave_static_pixels_degenerate_to_baseline(self):
        """Test interleave static pixels degenerate to baseline"""
        for batch in self._many("interleave", batches=20):
            static = batch.v == 0
            offsets = np.abs(batch.negatives[static] - batch.matches[static]).max(axis=1)
            self.assertTrue(np.all(offsets <= 8))

    def test_interleave_offsets_grow_with_displacement(self):
        """Test interleave offsets grow with displacement"""
        batch = self._many("interleave")
        v = np.concatenate([b.v for b in batch])
        offsets = np.concatenate([b.negative_offsets() for b in batch])
        means = bucket_means(v, offsets, [0, 5, 10, 20, 30])
        self.assertTrue(all(b > a for a, b in zip(means, means[1:])), means)

    def test_anti_reverses_the_trend(self):
        """Test anti reverses the trend"""
        batch = self._many("anti")
        for b in batch:
            self._assert_valid(b)
        v = np.concatenate([b.v for b in batch])
        offsets = np.concatenate([b.negative_offsets() for b in batch])
        means = bucket_means(v, offsets, [0, 5, 10, 20, 30])
        self.assertTrue(all(b < a for a, b in zip(means, means[1:])), means)

    def test_spci_negatives_get_harder(self):
        """Test spci negatives get harder"""
        means = []
        for epoch in (5, 20, 40):
            batches = self._many("spci", batches=20, epoch=epoch, total=40, l_prev=1.0, l_init=2.0)
            means.append(np.mean([b.negative_offsets().mean() for b in batches]))
        self.assertTrue(all(b <= a for a, b in zip(means, means[1:])), means)

    def test_cur_disp_pool_grows(self):
        """Test cur disp pool grows"""
        start = self._many("cur_disp", batches=10)
        self.assertTrue(all(np.all(b.v <= 10.0) for b in start))
        end = self._many("cur_disp", batches=10, epoch=10)
        self.assertGreater(max(b.v.max() for b in end), 40.0)

    def test_cur_dist_shrinks(self):
        """Test cur dist shrinks"""
        early = np.mean([b.negative_offsets().mean() for b in self._many("cur_dist", batches=10)])
        late = np.mean([b.negative_offsets().mean() for b in self._many("cur_dist", batches=10, epoch=10)])
        self.assertLess(late, early)

    def test_deterministic(self):
        """Test deterministic"""
        state = ScheduleState("interleave", 3, 10, seed=7)
        a = self.sampler.build(state, 64, batch_index=2)
        b = self.sampler.build(state, 64, batch_index=2)
        for field in ("anchors", "matches", "negatives", "v"):
            assert_array_equal(getattr(a, field), getattr(b, field))

    def test_net_required(self):
        """Test net required"""
        for strategy in ("self_paced", "neg_mine"):
            with self.assertRaises(SamplerError):
                self.sampler.build(ScheduleState(strategy, 0, 10), 10)

    def test_self_paced_and_neg_mine_with_net(self):
        """Test self paced and neg mine with net"""
        net = DescriptorNet(SMALL_LAYERS, 9, seed=0)
        for strategy, epoch in (("self_paced", 0), ("self_paced", 7), ("self_paced", 10), ("neg_mine", 2)):
            batch = self.sampler.build(ScheduleState(strategy, epoch, 10), 32, net=net)
            self.assertEqual(len(batch), 32)
            self._assert_valid(batch)
            self.assertTrue(np.all(np.abs(batch.negatives - batch.matches).max(axis=1) <= 8))

    def test_self_paced_admits_everything_below_a_fixed_threshold(self):
        """Test self paced admits everything below a fixed threshold"""
        net = DescriptorNet(SMALL_LAYERS, 9, seed=0)
        flat = DescriptorNet(SMALL_LAYERS, 9, parameters=[np.zeros_like(p) for p in net.params])
        with patch.object(self.sampler.logger, "warning") as warning:
            batch = self.sampler.build(ScheduleState("self_paced", 5, 10, loss_threshold=100.0), 32, net=flat)
        self.assertEqual(len(batch), 32)
        warning.assert_not_called()

    def test_self_paced_rejects_everything_above_a_fixed_threshold(self):
        """Test self paced rejects everything above a fixed threshold"""
        net = DescriptorNet(SMALL_LAYERS, 9, seed=0)
        flat = DescriptorNet(SMALL_LAYERS, 9, parameters=[np.zeros_like(p) for p in net.params])
        with self.assertLogs("modules.sampler", level="WARNING"):
            batch = self.sampler.build(ScheduleState("self_paced", 5, 10, loss_threshold=50.0), 32, net=flat)
        self.assertEqual(len(batch), 32)

    def test_patches_are_normalized(self):
        """Test patches are normalized"""
        batch = self._many("baseline", batches=1, n=8)[0]
        patches = self.sampler.patches(batch)
        self.assertEqual(patches.anchors.shape, (8, 9, 9))
        self.assertTrue(np.allclose(patches.negatives.mean(axis=(1, 2)), 0.0))

    def test_no_eligible_anchor(self):
        """Test no eligible anchor"""
        with self.assertRaises(SamplerError):
            TripletSampler(self.pair, self.gt, 9, min_disp=100.0)

    def test_batch_size_must_be_two(self):
        """Test batch size must be two"""
        with self.assertRaises(SamplerError):
            self.sampler.build(ScheduleState("baseline", 0, 10), 1)

    def test_build_triplets_wrapper(self):
        """Test build triplets wrapper"""
        batch = build_triplets(self.pair, self.gt, ScheduleState("baseline", 0, 10), 12, patch_size=9)
        self.assertEqual(len(batch), 12)


if __name__ == '__main__':
    unittest.main()
