import unittest
import sys
import os
import tempfile

import numpy as np
import pandas as pd
from numpy.testing import assert_array_equal

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.descriptor_net import DescriptorNet, load_checkpoint
from modules.trainer import HISTORY_COLUMNS, DescriptorTrainer
from utils.data_processing import FlowField, GrayImage
from utils.errors import NetError

SMALL_LAYERS = [
    {"type": "conv", "channels": 4, "kernel": 3, "stride": 2},
    {"type": "tanh"},
    {"type": "dense", "units": 8},
]


def shifted_sample(seed, shift=3):
    """Textured frame and its copy shifted right by a whole number of pixels"""
    rng = np.random.default_rng(seed)
    base = rng.random((24, 24 + shift))
    first = GrayImage.from_array(base[:, shift:])
    second = GrayImage.from_array(base[:, :24])
    gt = FlowField.from_arrays(np.full((24, 24), float(shift)), np.zeros((24, 24)))
    return first, second, gt


class TestDescriptorTrainer(unittest.TestCase):
    """Test cases for the epoch loop"""

    def setUp(self):
        """Set up test fixtures"""
        self.samples = [shifted_sample(0)]

    def _trainer(self, strategy="spci", epochs=7, samples=None, **kwargs):
        net = DescriptorNet(SMALL_LAYERS, 9, seed=1)
        return DescriptorTrainer(samples or self.samples, net, strategy=strategy, epochs=epochs,
                                 triplets_per_epoch=40, batch_size=10, seed=3, **kwargs)

    def test_history_columns_and_rows(self):
        """Test history columns and rows"""
        history = self._trainer().train()
        self.assertEqual(list(history.columns), HISTORY_COLUMNS)
        self.assertEqual(list(history["epoch"]), list(range(1, 8)))
        self.assertTrue(np.all(np.isfinite(history["val_loss"])))

    def test_l_init_fixed_from_epoch_five(self):
        """Test l init fixed from epoch five"""
        history = self._trainer().train().set_index("epoch")
        self.assertTrue(history.loc[1:4, "l_init"].isna().all())
        self.assertEqual(history.loc[5, "l_init"], history.loc[5, "val_loss"])
        self.assertEqual(history.loc[7, "l_init"], history.loc[5, "val_loss"])

    def test_self_paced_threshold_fixed_at_epoch_five(self):
        """Test self paced threshold fixed at epoch five"""
        trainer = self._trainer(strategy="self_paced")
        for epoch in range(1, 5):
            trainer.train_epoch(epoch)
        self.assertIsNone(trainer.loss_threshold)
        trainer.train_epoch(5)
        fixed = trainer.loss_threshold
        self.assertGreaterEqual(fixed, 0.0)
        trainer.train_epoch(6)
        self.assertEqual(trainer.loss_threshold, fixed)
        self.assertEqual(trainer.schedule_state(7).loss_threshold, fixed)

    def test_spci_coefficient_zero_before_reference(self):
        """Test spci coefficient zero before reference"""
        history = self._trainer().train().set_index("epoch")
        self.assertTrue((history.loc[1:5, "spci_coeff"] == 0.0).all())
        self.assertTrue((history["spci_coeff"] >= 0.0).all())

    def test_validation_split(self):
        """Test validation split"""
        trainer = self._trainer()
        self.assertEqual(trainer.n_validation, 4)
        self.assertEqual(trainer.n_train, 36)
        self.assertEqual(len(trainer.validation), 4)

    def test_split_keeps_every_batch_trainable(self):
        """Test split keeps every batch trainable"""
        trainer = self._trainer()
        self.assertEqual(trainer._split(36), [10, 10, 10, 6])
        self.assertEqual(trainer._split(31), [10, 10, 11])

    def test_deterministic(self):
        """Test deterministic"""
        a = self._trainer(epochs=3).train()
        b = self._trainer(epochs=3).train()
        pd.testing.assert_frame_equal(a, b)

    def test_round_robin_over_pairs(self):
        """Test round robin over pairs"""
        trainer = self._trainer("interleave", epochs=2, samples=[shifted_sample(0), shifted_sample(1, 5)])
        self.assertEqual(len(trainer.samplers), 2)
        history = trainer.train()
        self.assertEqual(len(history), 2)

    def test_checkpoints(self):
        """Test checkpoints"""
        with tempfile.TemporaryDirectory() as tmp:
            trainer = self._trainer("baseline", epochs=4, checkpoint_every=2, checkpoint_dir=tmp)
            trainer.train()
            self.assertEqual(sorted(os.listdir(tmp)),
                             ["checkpoint_epoch0002.bin", "checkpoint_epoch0004.bin", "descriptor_net.bin"])
            loaded = load_checkpoint(os.path.join(tmp, "descriptor_net.bin"))
            for a, b in zip(trainer.net.params, loaded.params):
                assert_array_equal(a, b)

    def test_needs_samples(self):
        """Test needs samples"""
        with self.assertRaises(NetError):
            DescriptorTrainer([], DescriptorNet(SMALL_LAYERS, 9))


if __name__ == '__main__':
    unittest.main()
