"""Sklearn-style front door around the training pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .losses import softmax_probs
from .network import build_arch, forward_modality
from .synthdata import Case, Dataset
from .tensor import Tensor
from .trainer import TrainingConfig, run_training


class CrossModalSegmenter(BaseEstimator):
    """Two-modality semantic segmentation with shared kernels and
    per-modality normalization, trainable with the confusion-alignment
    distillation loss.

    Parameters mirror the training configuration; ``fit`` expects image
    stacks plus a per-sample modality tag ('A' or 'B').
    """

    def __init__(self, setting="ours", arch="dilated-mini", norm="batch",
                 alpha=0.5, temperature=2.0, eta=1e-4, base_lr=1e-4,
                 iterations=200, batch_per_modality=4, seed=0):
        self.setting = setting
        self.arch = arch
        self.norm = norm
        self.alpha = alpha
        self.temperature = temperature
        self.eta = eta
        self.base_lr = base_lr
        self.iterations = iterations
        self.batch_per_modality = batch_per_modality
        self.seed = seed

    def fit(self, X, y, modality=None):
        """X: (n, H, W) float images; y: (n, H, W) integer label maps;
        modality: length-n sequence of 'A'/'B' tags (default: all 'A' is
        rejected, both modalities must appear for multi-modal settings)."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 3 or y.shape != X.shape:
            raise ValueError("X and y must both be (n, H, W)")
        if modality is None:
            raise ValueError("fit requires a per-sample modality array of 'A'/'B'")
        modality = np.asarray(modality)
        num_classes = int(y.max()) + 1
        ds = Dataset(num_classes, X.shape[1], X.shape[2])
        for i in range(len(X)):
            ds.cases[(str(modality[i]), "train")].append(Case(i, X[i], y[i]))

        cfg = TrainingConfig(setting=self.setting, alpha=self.alpha,
                             temperature=self.temperature, eta=self.eta,
                             base_lr=self.base_lr, iterations=self.iterations,
                             batch_per_modality=self.batch_per_modality, seed=self.seed,
                             validation_interval=max(self.iterations, 1),
                             snapshot_interval=max(self.iterations, 1))
        self.arch_ = build_arch(self.arch, num_classes, self.norm, 1, self.setting)
        self.store_, self.log_ = run_training(cfg, ds, self.arch_)
        self.num_classes_ = num_classes
        return self

    def predict_proba(self, X, modality="A"):
        """Per-pixel class probabilities, shape (n, C, H, W)."""
        if not hasattr(self, "store_"):
            raise RuntimeError("estimator is not fitted")
        X = np.asarray(X, dtype=np.float64)
        logits = forward_modality(self.arch_, self.store_, Tensor(X[:, None, :, :]),
                                  modality, mode="eval")
        return softmax_probs(logits).data

    def predict(self, X, modality="A"):
        """Per-pixel label maps, shape (n, H, W)."""
        return self.predict_proba(X, modality).argmax(axis=1)

    def score(self, X, y, modality="A"):
        """Mean foreground Dice fraction in [0, 1] over the given samples."""
        from .metrics import dice_coefficient
        pred = self.predict(X, modality)
        y = np.asarray(y)
        vals = [dice_coefficient(pred == c, y == c) for c in range(1, self.num_classes_)]
        return float(np.mean(vals)) / 100.0
