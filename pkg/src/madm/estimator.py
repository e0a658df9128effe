"""scikit-learn style wrapper around the self-training loop."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import IGNORE_INDEX, LATENT_STRIDE, ConfusionMatrix, ShapeError
from .segmentation import confusion_update, miou
from .train import TrainConfig, fit_self_training, predict_arrays


def check_images(X, name: str = "X", multiple: int = 32) -> np.ndarray:
    """Validate an N x H x W x 3 image stack in [0, 1]; returns float32."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"{name} must be N x H x W x 3, got shape {X.shape}")
    if X.shape[1] % multiple or X.shape[2] % multiple:
        raise ShapeError(f"{name} spatial size {X.shape[1:3]} must be a multiple of {multiple}")
    if np.issubdtype(X.dtype, np.integer):
        raise TypeError(f"{name} must hold floats in [0, 1]; divide uint8 images by 255")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must be finite and within [0, 1]")
    return X.astype(np.float32)


def check_label_maps(y, X: np.ndarray, num_classes: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape[:3]:
        raise ShapeError(f"{name} shape {y.shape} does not match images {X.shape[:3]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError(f"{name} must hold integer class ids")
    bad = (y != IGNORE_INDEX) & ((y < 0) | (y >= num_classes))
    if bad.any():
        raise ValueError(f"{name} has ids outside [0, {num_classes}): {np.unique(y[bad]).tolist()}")
    return y.astype(np.int64)


class MADMSegmenter(ClassifierMixin, BaseEstimator):
    """Unsupervised modality adaptation for semantic segmentation.

    ``fit(X, y, X_target)`` trains on labelled source images and unlabelled
    target-modality images; ``predict`` returns per-pixel class ids. Unlisted
    training settings take their desk-scale defaults from
    :meth:`TrainConfig.desk`. ``gamma_dplg=None`` anneals the latent noise
    over the first 80% of ``iterations``.
    """

    def __init__(self, num_classes=6, iterations=2000, batch_size=2, lr=1e-3,
                 beta_dplg=50, gamma_dplg=None, lambda_reg=10.0, use_dplg=True, use_lplr=True,
                 ema_alpha=0.999, tau=0.968, noise_form="paper", ae_steps=600,
                 predict_with="teacher", random_state=0):
        self.num_classes = num_classes
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.beta_dplg = beta_dplg
        self.gamma_dplg = gamma_dplg
        self.lambda_reg = lambda_reg
        self.use_dplg = use_dplg
        self.use_lplr = use_lplr
        self.ema_alpha = ema_alpha
        self.tau = tau
        self.noise_form = noise_form
        self.ae_steps = ae_steps
        self.predict_with = predict_with
        self.random_state = random_state

    def _config(self, resolution: int) -> TrainConfig:
        gamma = self.gamma_dplg
        if gamma is None:
            gamma = max(1, round(0.8 * self.iterations))
        return TrainConfig(
            num_classes=self.num_classes, resolution=resolution, iterations=self.iterations,
            batch_size=self.batch_size, lr=self.lr, beta_dplg=self.beta_dplg,
            gamma_dplg=gamma, lambda_reg=self.lambda_reg, use_dplg=self.use_dplg,
            use_lplr=self.use_lplr, ema_alpha=self.ema_alpha, tau=self.tau,
            noise_form=self.noise_form, ae_steps=self.ae_steps, seed=self.random_state,
        )

    def fit(self, X, y, X_target=None, backbone=None):
        X = check_images(X)
        y = check_label_maps(y, X, self.num_classes)
        if X_target is None:
            raise ValueError("X_target (unlabelled target-modality images) is required")
        X_target = check_images(X_target, "X_target")
        if X_target.shape[1:] != X.shape[1:]:
            raise ShapeError("source and target images must share resolution")
        if self.predict_with not in ("teacher", "student"):
            raise ValueError("predict_with must be 'teacher' or 'student'")
        self.config_ = self._config(X.shape[1])
        result = fit_self_training(self.config_, X, y, X_target, backbone=backbone)
        self.student_ = result.pair.student
        self.teacher_ = result.pair.teacher
        self.history_ = result.history
        self.ae_mae_ = result.ae_mae
        self.classes_ = np.arange(self.num_classes)
        return self

    @property
    def model_(self):
        check_is_fitted(self, "teacher_")
        return self.teacher_ if self.predict_with == "teacher" else self.student_

    def predict(self, X) -> np.ndarray:
        model = self.model_
        return predict_arrays(model, check_images(X, multiple=LATENT_STRIDE * 4))

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        model = self.model_
        X = check_images(X)
        x = torch.from_numpy(X.transpose(0, 3, 1, 2).copy())
        model.eval()
        probs = torch.softmax(model(x).logits, dim=1)
        return probs.permute(0, 2, 3, 1).numpy()

    def score(self, X, y, sample_weight=None) -> float:
        """Mean IoU of the predictions against ``y``."""
        X = check_images(X)
        y = check_label_maps(y, X, self.num_classes)
        cm = confusion_update(ConfusionMatrix.zeros(self.num_classes), self.predict(X), y)
        return miou(cm)[1]
