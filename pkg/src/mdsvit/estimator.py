"""scikit-learn style wrapper: fit on image/map arrays, predict saliency maps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, SaliencySample, normalize_image, resize_bilinear
from .exceptions import ShapeError
from .metrics import cc
from .model import ModelConfig, build_model
from .tensor import Tensor
from .training import TrainConfig, train_main, train_merge

OUTPUTS = ("map1", "map2", "merged", "mean")


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a stack of RGB images.

    Accepts (N, 3, H, W) or (N, H, W, 3) with values in [0, 1], or uint8.
    Returns float32 (N, 3, H, W).
    """
    arr = np.asarray(X)
    if arr.ndim == 3 and 3 in (arr.shape[0], arr.shape[-1]):
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, 3, H, W), got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise ShapeError(f"{name} must have 3 channels, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_maps(y, n: int | None = None, hw=None, name: str = "y") -> np.ndarray:
    """Validate saliency maps; returns float32 (N, H, W)."""
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be (N, H, W) or (N, 1, H, W), got shape {np.shape(y)}")
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{name} has {arr.shape[0]} maps for {n} images")
    if hw is not None and arr.shape[1:] != tuple(hw):
        raise ShapeError(f"{name} maps are {arr.shape[1:]}, images are {tuple(hw)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    flat = arr.reshape(arr.shape[0], -1)
    if np.any(flat.max(axis=1) == flat.min(axis=1)):
        raise ValueError(f"{name} contains a constant map")
    return arr


class SaliencyRegressor(BaseEstimator, RegressorMixin):
    """Dual-decoder saliency model behind fit / predict / score.

    ``predict`` returns maps at the input resolution; ``output`` picks
    map1, map2, merged (needs ``fit_merge``) or the mean of the two decoders.
    ``score`` is the mean Pearson correlation, not R^2.
    """

    def __init__(self, preset="toy", input_hw=None, epochs=15, batch_size=4, lr=1e-4,
                 weight_decay=0.0, step_size=10, gamma=0.5, patience=5, augment=False,
                 fit_merge=False, merge_epochs=15, merge_lr=1e-5, output="map1", seed=0):
        self.preset = preset
        self.input_hw = input_hw
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_size = step_size
        self.gamma = gamma
        self.patience = patience
        self.augment = augment
        self.fit_merge = fit_merge
        self.merge_epochs = merge_epochs
        self.merge_lr = merge_lr
        self.output = output
        self.seed = seed

    def _samples(self, X, y):
        return [SaliencySample(img, m[None], None, f"x{i:05d}") for i, (img, m) in enumerate(zip(X, y))]

    def fit(self, X, y, X_val=None, y_val=None):
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}, got {self.output!r}")
        if self.output == "merged" and not self.fit_merge:
            raise ValueError("output='merged' needs fit_merge=True")
        X = check_images(X)
        y = check_maps(y, len(X), X.shape[2:])
        train = self._samples(X, y)
        val = train
        if X_val is not None:
            Xv = check_images(X_val, "X_val")
            val = self._samples(Xv, check_maps(y_val, len(Xv), Xv.shape[2:], "y_val"))

        config = ModelConfig.preset_config(self.preset, self.input_hw)
        self.model_ = build_model(config, seed=self.seed)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, step_size=self.step_size, gamma=self.gamma,
            patience=self.patience, seed=self.seed,
            augment=AugmentConfig() if self.augment else None,
        )
        result = train_main(self.model_, train, val, cfg)
        self.model_.load_state_dict(result.best.model_state())
        self.history_ = result.log
        if self.fit_merge:
            mcfg = TrainConfig.merge_defaults(
                epochs=self.merge_epochs, lr=self.merge_lr, step_size=self.step_size,
                gamma=self.gamma, patience=self.patience, seed=self.seed,
            )
            mres = train_merge(self.model_, train, val, mcfg)
            self.model_.load_state_dict(mres.best.model_state())
            self.merge_history_ = mres.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        cfg = self.model_.config
        mode = "merged" if self.output == "merged" else "dual"
        self.model_.eval()
        out = []
        with T.no_grad():
            for img in X:
                x = resize_bilinear(img, cfg.input_hw)
                x = normalize_image(np.clip(x, 0.0, 1.0), IMAGENET_MEAN, IMAGENET_STD)
                maps = self.model_(Tensor(x[None].astype(np.float32)), mode)
                if self.output == "mean":
                    m = 0.5 * (maps["map1"].data + maps["map2"].data)
                else:
                    m = maps[self.output].data
                out.append(resize_bilinear(m[0], img.shape[1:])[0])
        return np.stack(out)

    def score(self, X, y, sample_weight=None) -> float:
        pred = self.predict(X)
        y = check_maps(y, len(pred), pred.shape[1:])
        scores = np.array([cc(p, g) for p, g in zip(pred, y)])
        return float(np.average(scores, weights=sample_weight))
