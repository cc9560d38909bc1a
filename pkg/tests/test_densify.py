import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.densify import DensifyParams, SparseToDense, densify
from utils.data_processing import FlowField, GrayImage
from utils.errors import DensifyError


def sparse_flow(shape, seeds):
    """Flow valid only at the given {(x, y): (u, v)} seeds"""
    u, v = np.zeros(shape), np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    for (x, y), (su, sv) in seeds.items():
        u[y, x], v[y, x] = su, sv
        valid[y, x] = True
    return FlowField.from_arrays(u, v, valid)


class TestDensify(unittest.TestCase):
    """Test cases for sparse-to-dense interpolation"""

    def setUp(self):
        """Set up test fixtures"""
        data = np.full((16, 16), 0.1)
        data[:, 8:] = 0.9
        self.img = GrayImage.from_array(data)
        self.seeds = {(2, 4): (1.0, 0.0), (3, 11): (1.0, 0.0), (12, 3): (-2.0, 0.5), (13, 12): (-2.0, 0.5)}
        self.sparse = sparse_flow((16, 16), self.seeds)

    def test_single_seed_fills_everything(self):
        """Test single seed fills everything"""
        sparse = sparse_flow((8, 8), {(3, 3): (2.5, -1.0)})
        dense = densify(sparse, GrayImage.from_array(np.random.default_rng(0).random((8, 8))))
        self.assertTrue(dense.valid.all())
        assert_allclose(dense.u, 2.5)
        assert_allclose(dense.v, -1.0)

    def test_seeds_are_copied_through(self):
        """Test seeds are copied through"""
        dense = densify(self.sparse, self.img)
        for (x, y), (su, sv) in self.seeds.items():
            self.assertEqual((dense.u[y, x], dense.v[y, x]), (su, sv))

    def test_logs_the_interpolation(self):
        """Test logs the interpolation"""
        with self.assertLogs("modules.densify", level="DEBUG") as logs:
            densify(self.sparse, self.img, DensifyParams(k=3))
        self.assertTrue(any("K=3" in line for line in logs.output))

    def test_fully_valid_input_is_unchanged(self):
        """Test fully valid input is unchanged"""
        rng = np.random.default_rng(1)
        flow = FlowField.from_arrays(rng.standard_normal((5, 6)), rng.standard_normal((5, 6)))
        dense = densify(flow, GrayImage.from_array(rng.random((5, 6))))
        assert_array_equal(dense.u, flow.u)
        assert_array_equal(dense.v, flow.v)

    def test_edges_keep_regions_apart(self):
        """Test edges keep regions apart"""
        dense = densify(self.sparse, self.img, DensifyParams(k=16, sigma_s=15.0, sigma_c=0.01))
        assert_allclose(dense.u[:, :8], 1.0, atol=1e-6)
        assert_allclose(dense.u[:, 8:], -2.0, atol=1e-6)
        assert_allclose(dense.v[:, 8:], 0.5, atol=1e-6)

    def test_matches_weighted_average_oracle(self):
        """Test matches weighted average oracle"""
        params = DensifyParams(k=16, sigma_s=6.0, sigma_c=0.5)
        dense = densify(self.sparse, self.img, params)
        seed_xy = np.array(list(self.seeds.keys()), dtype=np.float64)
        seed_flow = np.array(list(self.seeds.values()))
        seed_lum = np.array([self.img.data[y, x] for x, y in self.seeds])
        for y in range(16):
            for x in range(16):
                if (x, y) in self.seeds:
                    continue
                dist = np.hypot(seed_xy[:, 0] - x, seed_xy[:, 1] - y)
                w = np.exp(-dist / 6.0 - np.abs(self.img.data[y, x] - seed_lum) / 0.5)
                expected = (w[:, None] * seed_flow).sum(axis=0) / w.sum()
                assert_allclose([dense.u[y, x], dense.v[y, x]], expected, rtol=1e-9, atol=1e-12)

    def test_result_stays_within_seed_range(self):
        """Test result stays within seed range"""
        dense = densify(self.sparse, self.img, DensifyParams(k=3))
        self.assertTrue(np.all((dense.u >= -2.0 - 1e-12) & (dense.u <= 1.0 + 1e-12)))

    def test_log_domain_weights_survive_tiny_scales(self):
        """Test log domain weights survive tiny scales"""
        interpolator = SparseToDense(DensifyParams(sigma_s=1e-3, sigma_c=1e-3))
        w = interpolator.weights(np.array([[500.0, 501.0]]), np.array([[0.0, 0.0]]))
        self.assertTrue(np.all(np.isfinite(w)))
        self.assertAlmostEqual(w.sum(), 1.0)

    def test_errors(self):
        """Test errors"""
        with self.assertRaises(DensifyError):
            densify(sparse_flow((4, 4), {}), GrayImage.from_array(np.zeros((4, 4))))
        with self.assertRaises(DensifyError):
            densify(self.sparse, GrayImage.from_array(np.zeros((4, 4))))
        with self.assertRaises(DensifyError):
            DensifyParams(k=0)


if __name__ == '__main__':
    unittest.main()
