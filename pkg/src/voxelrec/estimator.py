"""scikit-learn style wrapper around the network and trainer."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .evaluation import binarize, encode_codes, predict_volumes, voxel_error
from .model import IMAGE_SIZES, VOLUME_RESOLUTIONS, Model, NetworkConfig
from .train import TrainConfig, train


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Validate an ``N x C x S x S`` image batch and return it as float32."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"images must be N x C x S x S, got shape {X.shape}")
    if X.shape[2] != X.shape[3] or X.shape[2] not in IMAGE_SIZES:
        raise ValueError(f"images must be square with size in {IMAGE_SIZES}, got {X.shape[2:]}")
    if X.shape[1] not in (3, 15):
        raise ValueError(f"images need 3 (RGB) or 15 (5-frame video) channels, got {X.shape[1]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"model expects {channels} channels, got {X.shape[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def check_volumes(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 4 or len(y) != n:
        raise ValueError(f"volumes must be {n} x R x R x R, got shape {y.shape}")
    if not (y.shape[1] == y.shape[2] == y.shape[3]) or y.shape[1] not in VOLUME_RESOLUTIONS:
        raise ValueError(f"volume resolution must be one of {VOLUME_RESOLUTIONS}, got {y.shape[1:]}")
    return y.astype(np.float32, copy=False)


class VolumeReconstructor(TransformerMixin, BaseEstimator):
    """Fit images to volumes; ``transform`` returns the graphics code.

    ``predict`` returns continuous occupancies, or binary ones when
    ``threshold`` is set.
    """

    def __init__(self, mode="volume_only", use_batchnorm=True, use_fc3000=False, epochs=1, lr=0.001,
                 batch_size=10, switch_period=3, shape_len=185, transform_len=15, threshold=None, seed=0):
        self.mode = mode
        self.use_batchnorm = use_batchnorm
        self.use_fc3000 = use_fc3000
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.switch_period = switch_period
        self.shape_len = shape_len
        self.transform_len = transform_len
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_volumes(y, len(X))
        net = NetworkConfig(image_size=X.shape[-1], frames=X.shape[1] // 3, volume_res=y.shape[1],
                            shape_len=self.shape_len, transform_len=self.transform_len,
                            use_batchnorm=self.use_batchnorm, use_fc3000=self.use_fc3000, seed=self.seed)
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, switch_period=self.switch_period,
                          epochs=self.epochs, mode=self.mode, seed=self.seed)
        self.model_, log = train(Model(net), SimpleNamespace(images=X, volumes=y), cfg)
        self.loss_curve_ = log.losses()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _model(self) -> Model:
        if not hasattr(self, "model_"):
            raise NotFittedError("VolumeReconstructor is not fitted yet; call fit first")
        return self.model_

    def predict(self, X) -> np.ndarray:
        m = self._model()
        v = predict_volumes(m, check_images(X, m.config.in_channels))
        return v if self.threshold is None else binarize(v, self.threshold)

    def transform(self, X) -> np.ndarray:
        m = self._model()
        return encode_codes(m, check_images(X, m.config.in_channels))

    def score(self, X, y) -> float:
        """Negative mean voxel error (higher is better)."""
        pred = np.clip(self.predict(X), 0.0, 1.0)
        return -voxel_error(pred, check_volumes(y, len(pred)))
