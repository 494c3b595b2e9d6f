"""scikit-learn compatible wrappers so the models compose with pipelines and model selection."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .clustering import kmeans
from .metrics import map_report
from .taxonomy import CATEGORIES


def check_clips(X, frames: int | None = None) -> np.ndarray:
    """Validate a batch of clips shaped (N, 3, T, S, S) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 3:
        raise ValueError(f"expected clips shaped (N, 3, T, S, S), got {X.shape}")
    if X.shape[-1] != X.shape[-2]:
        raise ValueError(f"frames must be square, got {X.shape[-2]}x{X.shape[-1]}")
    if frames is not None and X.shape[2] != frames:
        raise ValueError(f"expected {frames} frames per clip, got {X.shape[2]}")
    if not np.isfinite(X).all():
        raise ValueError("clips contain non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("clip values must lie in [0, 1]")
    return X


def check_multilabel_targets(Y, n_samples: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2 or len(Y) != n_samples:
        raise ValueError(f"expected targets shaped ({n_samples}, L), got {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise ValueError("targets must be a {0, 1} indicator matrix")
    return Y.astype(np.float32)


class HATNetClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label video classifier over (N, 3, T, S, S) clips.

    ``label_categories`` binds every output column to one of the six categories;
    by default all columns are treated as ``scene``.
    """

    def __init__(
        self,
        mode="hatnet",
        backbone="r18",
        stage_channels=(64, 128, 256, 512),
        head_mode="single",
        label_categories=None,
        mr_norm=True,
        epochs=10,
        batch_size=8,
        lr=0.05,
        momentum=0.9,
        weight_decay=1e-4,
        active_categories=CATEGORIES,
        random_state=0,
    ):
        self.mode = mode
        self.backbone = backbone
        self.stage_channels = stage_channels
        self.head_mode = head_mode
        self.label_categories = label_categories
        self.mr_norm = mr_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.active_categories = active_categories
        self.random_state = random_state

    def _configs(self, n_labels: int, frames: int, size: int):
        from .model import ModelConfig
        from .training import TrainConfig

        cats = tuple(self.label_categories) if self.label_categories is not None else ("scene",) * n_labels
        if len(cats) != n_labels:
            raise ValueError(f"label_categories has {len(cats)} entries for {n_labels} target columns")
        mcfg = ModelConfig(
            cats, backbone=self.backbone, mode=self.mode, frames=frames, input_size=size,
            stage_channels=tuple(self.stage_channels), head_mode=self.head_mode, mr_norm=self.mr_norm,
        )
        tcfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, seed=self.random_state,
            active_categories=tuple(self.active_categories),
        )
        return mcfg, tcfg

    def fit(self, X, Y, X_val=None, Y_val=None):
        from .training import ArrayData, train

        X = check_clips(X)
        Y = check_multilabel_targets(Y, len(X))
        data = ArrayData(X, Y)
        if X_val is not None:
            data.val_x = check_clips(X_val, X.shape[2])
            data.val_y = check_multilabel_targets(Y_val, len(data.val_x))
        mcfg, self.train_config_ = self._configs(Y.shape[1], X.shape[2], X.shape[-1])
        self.checkpoint_, self.history_ = train(mcfg, self.train_config_, data)
        self.model_ = self.checkpoint_.to_model()
        self.classes_ = np.arange(Y.shape[1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        from .training import predict_logits

        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_clips(X, self.model_.config.frames))

    def predict_proba(self, X):
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(int)

    def transform(self, X):
        """Pooled trunk features, one row per clip."""
        from .clustering import extract_features

        check_is_fitted(self, "model_")
        return extract_features(self.checkpoint_, check_clips(X, self.model_.config.frames))

    def score(self, X, Y, sample_weight=None):
        """Overall mAP (unweighted mean of category mAPs)."""
        scores = self.decision_function(X)
        Y = check_multilabel_targets(Y, len(scores))
        return map_report(scores, Y, self.model_.config.label_categories).overall


class VideoKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    def __init__(self, n_clusters=8, n_init=10, tol=1e-4, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        res = kmeans(X, self.n_clusters, seed=self.random_state, n_init=self.n_init, tol=self.tol,
                     max_iter=self.max_iter)
        self.labels_ = res.assignments
        self.cluster_centers_ = res.centroids
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        self.inertia_history_ = res.inertia_history
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = np.asarray(X, dtype=np.float64)
        return np.sqrt(((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(-1))

    def predict(self, X):
        return self.transform(X).argmin(1)

    def score(self, X, y=None):
        d = self.transform(X)
        return -float((d.min(1) ** 2).sum())
