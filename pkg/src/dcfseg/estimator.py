"""Scikit-learn style front end for the training loop.

``DCFSegmenter`` behaves like a semi-supervised estimator: ``fit(X, y)``
takes an image stack and per-pixel targets where an all--1 target marks a
sample as unlabeled (the usual semi-supervised convention), ``predict``
returns hard masks and ``score`` the mean Dice.  ``get_params`` /
``set_params`` / ``clone`` work as for any other estimator.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import segnet, trainer
from .config import RunConfig
from .metrics import dice_score
from .synthdata import Dataset
from .validation import check_image_stack, check_mask_targets


class DCFSegmenter(BaseEstimator):
    """Semi-supervised binary segmenter trained by student competition.

    Parameters mirror the run configuration; see the package README for the
    training algorithm.  ``mode`` selects the full framework ("dcf") or the
    baselines ("mean_teacher", "supervised").
    """

    def __init__(self, mode: str = "dcf", iterations: int = 1000, seed: int = 0,
                 alpha: float = 0.99, lambda_max: float = 1.0,
                 ramp_iters: Optional[int] = None, tutoring: str = "tutor_loser",
                 competition: str = "dice", learning_rate: float = 1e-4,
                 weight_decay: float = 1e-4, batch_labeled: int = 2,
                 batch_unlabeled: int = 2, ema_warmup: int = 0):
        self.mode = mode
        self.iterations = iterations
        self.seed = seed
        self.alpha = alpha
        self.lambda_max = lambda_max
        self.ramp_iters = ramp_iters
        self.tutoring = tutoring
        self.competition = competition
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.ema_warmup = ema_warmup

    def _run_config(self, n_train: int) -> RunConfig:
        return RunConfig(
            mode=self.mode, seed=self.seed, iterations=self.iterations,
            batch_labeled=self.batch_labeled, batch_unlabeled=self.batch_unlabeled,
            alpha=self.alpha, lambda_max=self.lambda_max, ramp_iters=self.ramp_iters,
            tutoring=self.tutoring, competition=self.competition,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            ema_warmup=self.ema_warmup, n_train=max(n_train, 1), n_test=0,
            checkpoint_every=0,
        ).resolved()

    def fit(self, X, y) -> "DCFSegmenter":
        """Train on images X (n, H, W) with targets y (n, H, W).

        Binary masks supervise their samples; an all--1 target marks the
        sample as unlabeled and it contributes through the consistency and
        pseudo-label losses only.
        """
        images = check_image_stack(X)
        masks = check_mask_targets(y, images, allow_unlabeled=True)
        labeled = [(img, m) for img, m in zip(images, masks) if m is not None]
        unlabeled = [img for img, m in zip(images, masks) if m is None]
        cfg = self._run_config(len(images))
        if len(unlabeled) < cfg.batch_unlabeled:
            cfg = dataclasses.replace(cfg, batch_unlabeled=len(unlabeled))
        dataset = Dataset(labeled=labeled, unlabeled=unlabeled, test=[], seed=cfg.seed)
        result = trainer.train_run(dataset, cfg, out_dir=None)
        self.state_ = result.state
        self.eval_network_ = result.eval_network
        self.eval_params_ = result.eval_params
        self.n_iter_ = result.state.iteration
        self.image_shape_ = images.shape[1:]
        return self

    def _fitted_params(self):
        if not hasattr(self, "eval_params_"):
            raise NotFittedError("this DCFSegmenter instance is not fitted yet; call fit first")
        return self.eval_params_

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, (n, 2, H, W)."""
        params = self._fitted_params()
        images = check_image_stack(X)
        return segnet.predict_probs(params, images)

    def predict(self, X) -> np.ndarray:
        """Hard foreground masks, (n, H, W) boolean."""
        params = self._fitted_params()
        images = check_image_stack(X)
        return segnet.predict_masks(params, images)

    def score(self, X, y) -> float:
        """Mean Dice of hard predictions against fully labeled targets."""
        images = check_image_stack(X)
        masks = check_mask_targets(y, images, allow_unlabeled=False)
        preds = self.predict(images)
        return float(np.mean([dice_score(p, m) for p, m in zip(preds, masks)]))

    def save(self, path) -> None:
        """Write the evaluation network as a checkpoint file."""
        segnet.save_checkpoint(self._fitted_params(), path)
