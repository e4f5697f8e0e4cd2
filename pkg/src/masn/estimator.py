"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import EpisodeDataset
from .model import Batch
from .training import TrainConfig, evaluate, predict_dataset, train


def check_dataset(X, y=None) -> EpisodeDataset:
    """Accept an ``EpisodeDataset``; optionally replace its answers with ``y``."""
    if not isinstance(X, EpisodeDataset):
        raise TypeError(f"expected an EpisodeDataset, got {type(X).__name__}")
    if y is None:
        return X
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"y must be 1-d with {len(X)} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("y must hold integer answers")
    arrays = dict(X.arrays)
    arrays["answer"] = y.astype(np.int64)
    return EpisodeDataset(X.config, arrays)


def check_compatible(estimator, X: EpisodeDataset) -> None:
    """Raise if ``X`` does not match the shapes the estimator was fitted on."""
    fitted = estimator.data_config_
    for key in ("task", "d_in", "T", "N", "question_length"):
        if getattr(X.config, key) != getattr(fitted, key):
            raise ValueError(f"{key}={getattr(X.config, key)!r} differs from the fitted "
                             f"value {getattr(fitted, key)!r}")
    if X.config.vocab > fitted.vocab:
        raise ValueError(f"vocab {X.config.vocab} exceeds the fitted vocab {fitted.vocab}")


class MASNVideoQA(BaseEstimator):
    """Motion-appearance video QA model trained with Adam on episode datasets.

    ``fit`` takes an ``EpisodeDataset``; the task (count, open-ended or
    multiple choice) comes from the dataset. ``transform`` returns the pooled
    fusion vector ``f`` per episode (per candidate for multiple choice).
    """

    def __init__(self, d=32, g=4, embed_dim=300, epochs=30, lr=1e-4, batch_size=None,
                 variant="triple", clip=False, seed=0):
        self.d = d
        self.g = g
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.variant = variant
        self.clip = clip
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           seed=self.seed, d=self.d, g=self.g, embed_dim=self.embed_dim,
                           variant=self.variant, clip=self.clip)

    def fit(self, X, y=None):
        ds = check_dataset(X, y)
        self.checkpoint_, self.history_ = train(self._train_config(), ds)
        self.data_config_ = ds.config
        self.task_ = ds.task
        self.n_features_in_ = ds.config.d_in
        return self

    def _forward(self):
        return self.checkpoint_.forward()

    def _checked(self, X):
        check_is_fitted(self, "checkpoint_")
        ds = check_dataset(X)
        check_compatible(self, ds)
        return ds

    def _outputs(self, X):
        ds = self._checked(X)
        with ad.no_grad():
            return self._forward()(self.checkpoint_.params, Batch.from_dataset(ds))

    def predict(self, X) -> np.ndarray:
        ds = self._checked(X)
        preds, _ = predict_dataset(self._forward(), self.checkpoint_.params, ds)
        return preds

    def decision_function(self, X) -> np.ndarray:
        """Raw head outputs: count value, class logits or candidate scores."""
        return self._outputs(X).head.raw.data.copy()

    def transform(self, X) -> np.ndarray:
        return self._outputs(X).f.data.copy()

    def score(self, X, y=None) -> float:
        """Accuracy, or negative mean squared error for counting."""
        ds = check_dataset(self._checked(X), y)
        m = evaluate(self._forward(), self.checkpoint_.params, ds)
        return -m["mse"] if m["task"] == "count" else m["accuracy"]
