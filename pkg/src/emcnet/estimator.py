"""Scikit-learn style classifier wrapping the training harness.

Example
-------
>>> clf = EMCNetClassifier(d=16, patch_size=8, image_side=32, epochs=20)
>>> clf.fit(train_images, train_labels).score(test_images, test_labels)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig
from .training import TrainConfig, patch_stack, predict_proba_patches, train_model
from .validation import check_image_batch, check_labels, stratified_holdout


class EMCNetClassifier(ClassifierMixin, BaseEstimator):
    """Patch-graph image classifier with three parallel graph encoders.

    Parameters mirror the training defaults: 64-wide embeddings of 32x32
    patches on 256x256 inputs, six message rounds, three pooling layers at
    ratio 0.75, momentum SGD at 5e-3 with plateau halving and early
    stopping on an internal validation split.

    Attributes set by :meth:`fit`: ``classes_``, ``params_``, ``config_``,
    ``history_``.
    """

    def __init__(
        self,
        d: int = 64,
        patch_size: int = 32,
        image_side: int = 256,
        message_rounds: int = 6,
        pooling_ratio: float = 0.75,
        use_genc: bool = True,
        use_hgenc: bool = True,
        use_ctenc: bool = True,
        epochs: int = 100,
        batch_size: int = 24,
        lr: float = 5e-3,
        momentum: float = 0.9,
        plateau_patience: int = 10,
        early_stop_patience: int | None = None,
        validation_fraction: float = 0.1,
        optimizer: str = "sgd",
        random_state: int = 0,
    ):
        self.d = d
        self.patch_size = patch_size
        self.image_side = image_side
        self.message_rounds = message_rounds
        self.pooling_ratio = pooling_ratio
        self.use_genc = use_genc
        self.use_hgenc = use_hgenc
        self.use_ctenc = use_ctenc
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.optimizer = optimizer
        self.random_state = random_state

    def _model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            message_rounds=self.message_rounds,
            pooling_ratio=self.pooling_ratio,
            patch_size=self.patch_size,
            image_side=self.image_side,
            n_classes=n_classes,
            use_genc=self.use_genc,
            use_hgenc=self.use_hgenc,
            use_ctenc=self.use_ctenc,
        )

    def fit(self, X, y) -> "EMCNetClassifier":
        images = check_image_batch(X, image_side=self.image_side)
        y = check_labels(y, len(images))
        self.classes_, y_idx = np.unique(y, return_inverse=True)

        config = self._model_config(len(self.classes_))
        train_config = TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr0=self.lr,
            momentum=self.momentum,
            plateau_patience=self.plateau_patience,
            early_stop_patience=self.early_stop_patience,
            optimizer=self.optimizer,
            seeds=(self.random_state,),
            k_folds=2,  # unused by plain fit; harness-level CV uses the CLI
        )
        patches = patch_stack(images, config)
        if self.validation_fraction > 0.0:
            train_idx, val_idx = stratified_holdout(y_idx, self.validation_fraction, self.random_state)
        else:
            train_idx, val_idx = np.arange(len(patches)), np.array([], dtype=int)
        val_patches = [patches[i] for i in val_idx] if len(val_idx) else None
        val_labels = y_idx[val_idx] if len(val_idx) else None
        result = train_model(
            [patches[i] for i in train_idx],
            y_idx[train_idx],
            config,
            train_config,
            seed=self.random_state,
            val_patches=val_patches,
            val_labels=val_labels,
        )
        self.params_ = result.params
        self.config_ = config
        self.history_ = result.history
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        images = check_image_batch(X, image_side=self.image_side)
        return predict_proba_patches(patch_stack(images, self.config_), self.params_, self.config_)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
