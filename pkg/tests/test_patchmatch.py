import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.patchmatch import (NNField, PMParams, bidirectional_patchmatch, consistency_filter, descriptor_cost,
                                init_nnf, patchmatch)
from utils.data_processing import DescriptorField
from utils.errors import NNFError


def random_field(rng, height=24, width=24, dim=8):
    return DescriptorField.from_array(rng.standard_normal((height, width, dim)))


def brute_force(A, B):
    """Exhaustive nearest neighbour of every pixel of A over all of B"""
    flat_b = B.data.reshape(-1, B.dim)
    flat_a = A.data.reshape(-1, A.dim)
    dist = np.sqrt(((flat_a[:, None, :] - flat_b[None, :, :]) ** 2).sum(axis=-1))
    best = dist.argmin(axis=1)
    ty, tx = np.divmod(best, B.width)
    return tx.reshape(A.height, A.width), ty.reshape(A.height, A.width), dist.min(axis=1).reshape(A.height, A.width)


class TestInit(unittest.TestCase):
    """Test cases for the random initial field"""

    def setUp(self):
        """Set up test fixtures"""
        rng = np.random.default_rng(0)
        self.A = random_field(rng)
        self.B = random_field(rng)

    def test_offsets_within_range_and_bounds(self):
        """Test offsets within range and bounds"""
        nnf = init_nnf(self.A, self.B, PMParams(search_range=5), np.random.default_rng(1))
        self.assertTrue(np.all(np.abs(nnf.offsets) <= 5))
        tx, ty = nnf.targets()
        self.assertTrue(np.all((tx >= 0) & (tx < 24) & (ty >= 0) & (ty < 24)))

    def test_stored_cost_matches_recomputation(self):
        """Test stored cost matches recomputation"""
        nnf = init_nnf(self.A, self.B, PMParams(search_range=5), np.random.default_rng(2))
        tx, ty = nnf.targets()
        rng = np.random.default_rng(3)
        for _ in range(100):
            y, x = rng.integers(0, 24, size=2)
            expected = np.linalg.norm(self.A.data[y, x] - self.B.data[ty[y, x], tx[y, x]])
            self.assertAlmostEqual(nnf.cost[y, x], expected, places=10)

    def test_dimension_mismatch(self):
        """Test dimension mismatch"""
        other = DescriptorField.from_array(np.zeros((24, 24, 4)))
        with self.assertRaises(NNFError):
            init_nnf(self.A, other, PMParams(), np.random.default_rng(0))

    def test_bad_params(self):
        """Test bad params"""
        with self.assertRaises(NNFError):
            PMParams(search_range=0)
        with self.assertRaises(NNFError):
            PMParams(decay=1.0)

    def test_radii(self):
        """Test radii"""
        self.assertEqual(PMParams(search_range=10, decay=0.5).radii(), [10, 5, 2, 1])


class TestPatchMatch(unittest.TestCase):
    """Test cases for propagation and random search"""

    def test_identical_fields_give_zero_offsets(self):
        """Test identical fields give zero offsets"""
        A = random_field(np.random.default_rng(4))
        nnf = patchmatch(A, A, PMParams(search_range=6, seed=1))
        assert_array_equal(nnf.offsets, np.zeros_like(nnf.offsets))
        assert_array_equal(nnf.cost, np.zeros_like(nnf.cost))

    def test_matches_brute_force_on_noisy_copies(self):
        """Test matches brute force on noisy copies"""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            A = random_field(rng)
            B = DescriptorField.from_array(A.data + 0.01 * rng.standard_normal(A.data.shape))
            nnf = patchmatch(A, B, PMParams(search_range=4, iterations=6, seed=seed))
            bx, by, best = brute_force(A, B)
            tx, ty = nnf.targets()
            agreement = np.mean((tx == bx) & (ty == by))
            self.assertGreaterEqual(agreement, 0.95, f"seed {seed}")
            self.assertLessEqual(nnf.cost.mean(), 1.02 * best.mean(), f"seed {seed}")

    def test_recovers_horizontal_shift(self):
        """Test recovers horizontal shift"""
        rng = np.random.default_rng(7)
        base = rng.standard_normal((24, 37, 8))
        A = DescriptorField.from_array(base[:, 5:])
        B = DescriptorField.from_array(base[:, :32])
        nnf = patchmatch(A, B, PMParams(search_range=10, seed=2))
        inner = nnf.offsets[:, :27]
        exact = (inner[..., 0] == 5) & (inner[..., 1] == 0)
        self.assertGreaterEqual(exact.mean(), 0.95)

    def test_costs_never_increase(self):
        """Test costs never increase"""
        rng = np.random.default_rng(8)
        A, B = random_field(rng), random_field(rng)
        params_short = PMParams(search_range=6, iterations=1)
        params_long = PMParams(search_range=6, iterations=4)
        short = patchmatch(A, B, params_short, np.random.default_rng(9))
        long = patchmatch(A, B, params_long, np.random.default_rng(9))
        self.assertTrue(np.all(long.cost <= short.cost))

    def test_stored_cost_is_consistent(self):
        """Test stored cost is consistent"""
        rng = np.random.default_rng(10)
        A, B = random_field(rng), random_field(rng)
        nnf = patchmatch(A, B, PMParams(search_range=6, seed=3))
        tx, ty = nnf.targets()
        assert_allclose(nnf.cost, descriptor_cost(A.data, B.data[ty, tx]), rtol=1e-12, atol=0)

    def test_deterministic_regardless_of_workers(self):
        """Test deterministic regardless of workers"""
        rng = np.random.default_rng(11)
        A, B = random_field(rng, 16, 20), random_field(rng, 16, 20)
        params = PMParams(search_range=5, iterations=3, seed=4)
        fwd_1, bwd_1 = bidirectional_patchmatch(A, B, params, workers=1)
        fwd_2, bwd_2 = bidirectional_patchmatch(A, B, params, workers=2)
        assert_array_equal(fwd_1.offsets, fwd_2.offsets)
        assert_array_equal(bwd_1.offsets, bwd_2.offsets)


class TestConsistency(unittest.TestCase):
    """Test cases for the forward-backward check"""

    def _field(self, offsets):
        offsets = np.asarray(offsets, dtype=np.int64)
        h, w = offsets.shape[:2]
        return NNField(offsets, np.zeros((h, w)), w, h)

    def test_zero_fields_are_consistent(self):
        """Test zero fields are consistent"""
        zero = self._field(np.zeros((2, 3, 2)))
        flow = consistency_filter(zero, zero)
        self.assertTrue(flow.valid.all())

    def test_tolerance_is_inclusive(self):
        """Test tolerance is inclusive"""
        fwd = self._field(np.zeros((2, 3, 2)))
        back = np.zeros((2, 3, 2))
        back[0, 1] = (1, 0)
        bwd = self._field(back)
        self.assertFalse(consistency_filter(fwd, bwd, tau=0.5).valid[0, 1])
        self.assertTrue(consistency_filter(fwd, bwd, tau=1.0).valid[0, 1])

    def test_shift_round_trip(self):
        """Test shift round trip"""
        fwd = np.zeros((1, 4, 2))
        fwd[0, :3] = (1, 0)
        bwd = np.zeros((1, 4, 2))
        bwd[0, 1:] = (-1, 0)
        flow = consistency_filter(self._field(fwd), self._field(bwd), tau=0.0)
        assert_array_equal(flow.valid, [[True, True, True, False]])
        assert_array_equal(flow.u[0, :3], [1, 1, 1])

    def test_random_fields_match_direct_evaluation(self):
        """Test random fields match direct evaluation"""
        rng = np.random.default_rng(12)
        A, B = random_field(rng, 16, 16), random_field(rng, 16, 16)
        fwd, bwd = bidirectional_patchmatch(A, B, PMParams(search_range=4, iterations=2, seed=5), workers=1)
        flow = consistency_filter(fwd, bwd, tau=1.0)
        for y in range(16):
            for x in range(16):
                dx, dy = fwd.offsets[y, x]
                bx, by = bwd.offsets[y + dy, x + dx]
                self.assertEqual(flow.valid[y, x], np.hypot(dx + bx, dy + by) <= 1.0)

    def test_incompatible_dimensions(self):
        """Test incompatible dimensions"""
        with self.assertRaises(NNFError):
            consistency_filter(self._field(np.zeros((2, 3, 2))), self._field(np.zeros((3, 3, 2))))


if __name__ == '__main__':
    unittest.main()
