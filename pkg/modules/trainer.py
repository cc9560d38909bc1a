import logging
import os
import sys

import numpy as np
import pandas as pd
from tqdm import tqdm

from modules.descriptor_net import (OptState, TripletPatches, loss_and_grad, save_checkpoint, sgd_step,
                                    triplet_distances)
from modules.loss import LossConfig, hinge_sd_loss, per_triplet_loss
from modules.sampler import (L_INIT_EPOCH, SELF_PACED_START_PERCENTILE, ScheduleState, TripletSampler,
                             schedule_coeff)
from utils.errors import NetError

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "l_init", "spci_coeff", "learning_rate", "strategy"]


class DescriptorTrainer:
    """Trains a DescriptorNet on triplets drawn under one learning strategy"""

    def __init__(self, samples, net, strategy="baseline", epochs=100, triplets_per_epoch=5000, batch_size=100,
                 loss_cfg=None, learning_rate=0.01, momentum=0.9, lr_halving_epochs=100, seed=0,
                 validation_fraction=0.1, lognormal=None, min_disp=None, max_disp=None,
                 checkpoint_every=0, checkpoint_dir=None):
        """
        Initialize the trainer

        Args:
            samples (list): (frame 1, frame 2, ground truth) training triples
            net (DescriptorNet): Initial network
            strategy (str): Sampling strategy tag
            epochs (int): Total epochs m
            triplets_per_epoch (int): Triplet budget per epoch, validation share included
            batch_size (int): Triplets per SGD step
            loss_cfg (LossConfig): Loss margin and mixing weight
            seed (int): Seed of every random stream in the run
            validation_fraction (float): Share of the budget held out as a fixed validation set
            min_disp (float): Optional lower bound on anchor displacement
            max_disp (float): Optional (exclusive) upper bound on anchor displacement
            checkpoint_every (int): Save a checkpoint every k epochs (0 saves only the final net)
            checkpoint_dir (str): Directory for checkpoints (None disables saving)
        """
        if not samples:
            raise NetError("Training needs at least one image pair with ground truth")
        if batch_size < 2:
            raise NetError(f"Batch size must be at least 2, got {batch_size}")

        self.net = net
        self.strategy = strategy
        self.epochs = int(epochs)
        self.triplets_per_epoch = int(triplets_per_epoch)
        self.batch_size = int(batch_size)
        self.loss_cfg = loss_cfg or LossConfig()
        self.opt = OptState.create(net, learning_rate, momentum, lr_halving_epochs)
        self.seed = int(seed)
        self.checkpoint_every = int(checkpoint_every)
        self.checkpoint_dir = checkpoint_dir
        self.logger = logging.getLogger(__name__)

        self.samplers = [
            TripletSampler((first, second), gt, net.input_size, lognormal=lognormal, loss_cfg=self.loss_cfg,
                           min_disp=min_disp, max_disp=max_disp)
            for first, second, gt in samples
        ]

        self.n_validation = max(2, int(round(validation_fraction * self.triplets_per_epoch)))
        self.n_train = max(2, self.triplets_per_epoch - self.n_validation)
        self.validation = self._validation_set()

        self.l_init = None
        self.l_prev = None
        self.loss_threshold = None

    def _split(self, total):
        sizes = [self.batch_size] * (total // self.batch_size)
        rest = total - sum(sizes)
        if rest >= 2 or not sizes:
            sizes.append(max(rest, 2))
        elif rest:
            sizes[-1] += rest
        return sizes

    def _sampler_for(self, batch_index):
        return self.samplers[batch_index % len(self.samplers)]

    def _validation_set(self):
        """Fixed baseline triplets from epoch 0, a stream training never uses"""
        state = ScheduleState("baseline", 0, self.epochs, seed=self.seed)
        parts = []
        for b, size in enumerate(self._split(self.n_validation)):
            sampler = self._sampler_for(b)
            parts.append(sampler.patches(sampler.build(state, size, batch_index=b)))
        return TripletPatches(
            np.concatenate([p.anchors for p in parts]),
            np.concatenate([p.positives for p in parts]),
            np.concatenate([p.negatives for p in parts]),
        )

    def validation_loss(self, net=None):
        d_match, d_nonmatch = triplet_distances(net or self.net, self.validation)
        return hinge_sd_loss(d_match, d_nonmatch, self.loss_cfg)

    def validation_threshold(self, net=None):
        """30th percentile of the per-triplet validation losses"""
        d_match, d_nonmatch = triplet_distances(net or self.net, self.validation)
        losses = per_triplet_loss(d_match, d_nonmatch, self.loss_cfg)
        return float(np.percentile(losses, SELF_PACED_START_PERCENTILE))

    def schedule_state(self, epoch):
        return ScheduleState(self.strategy, epoch, self.epochs, l_prev=self.l_prev,
                             l_init=self.l_init, seed=self.seed, loss_threshold=self.loss_threshold)

    def train_epoch(self, epoch):
        """
        Run one epoch of SGD and update the validation loss trace

        Returns:
            dict: One row of the training history
        """
        state = self.schedule_state(epoch)
        lr = self.opt.current_lr
        losses = []
        for b, size in enumerate(self._split(self.n_train)):
            sampler = self._sampler_for(b)
            batch = sampler.build(state, size, net=self.net, batch_index=b)
            loss, grads = loss_and_grad(self.net, sampler.patches(batch), self.loss_cfg)
            self.net, self.opt = sgd_step(self.net, grads, self.opt)
            losses.append(loss)
            self.logger.debug(f"Epoch {epoch} batch {b}: loss {loss:.4f}")
        self.opt = self.opt.next_epoch()

        val_loss = self.validation_loss()
        if epoch == L_INIT_EPOCH:
            self.l_init = val_loss
            self.loss_threshold = self.validation_threshold()
            self.logger.info(
                f"Reference loss l_init fixed at {val_loss:.4f}, self-paced threshold at {self.loss_threshold:.4f}"
            )
        self.l_prev = val_loss

        return {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "l_init": self.l_init,
            "spci_coeff": schedule_coeff(state),
            "learning_rate": lr,
            "strategy": self.strategy,
        }

    def _save(self, name):
        if not self.checkpoint_dir:
            return None
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        path = os.path.join(self.checkpoint_dir, name)
        save_checkpoint(path, self.net)
        return path

    def train(self):
        """
        Train for all epochs

        Returns:
            pandas.DataFrame: Per-epoch history with HISTORY_COLUMNS
        """
        self.logger.info(
            f"Training '{self.strategy}' for {self.epochs} epochs: {self.n_train} training and "
            f"{self.n_validation} validation triplets per epoch"
        )
        rows = []
        for epoch in tqdm(range(1, self.epochs + 1), desc="Training", disable=not sys.stdout.isatty()):
            row = self.train_epoch(epoch)
            rows.append(row)
            self.logger.info(
                f"Epoch {epoch}/{self.epochs}: train {row['train_loss']:.4f}, val {row['val_loss']:.4f}, "
                f"R {row['spci_coeff']:.3f}"
            )
            if self.checkpoint_every and epoch % self.checkpoint_every == 0:
                self._save(f"checkpoint_epoch{epoch:04d}.bin")
        self._save("descriptor_net.bin")
        return pd.DataFrame(rows, columns=HISTORY_COLUMNS)
